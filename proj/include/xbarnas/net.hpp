#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xbarnas {

// One line of a network spec file. Formats:
//   input <C> <H> <W>
//   conv k=<K> in=<I> out=<O> s=<S> searchable=<bool> [n=<N>]
//   block in=<I> out=<O> s=<S> searchable=<bool> [k1= k2= n1= n2=]
//   linear in=<I> out=<O> [n=<N>]
// A block is a two-conv residual unit; a 1x1 projection is inserted on the
// skip path when channels or stride change (mapped at n1, falling back to
// n2). In extracted (compact) specs k1=0 or k2=0 marks a deleted conv — the
// survivor carries the block's stride — and k1=0 k2=0 together reduce the
// block to its skip path.
struct NetLine {
  enum Kind { kConv, kBlock, kLinear } kind = kConv;
  int64_t k = 3;
  int64_t in = 0;
  int64_t out = 0;
  int64_t stride = 1;
  bool searchable = false;
  int64_t n = 0;  // crossbar size; 0 = unassigned (use hardware default)
  // block-only fields
  int64_t k1 = 3, k2 = 3;
  int64_t n1 = 0, n2 = 0;
};

struct NetworkSpec {
  int64_t in_channels = 0;
  int64_t in_height = 0;
  int64_t in_width = 0;
  std::vector<NetLine> lines;

  static NetworkSpec parse_file(const std::string& path);
  static NetworkSpec parse_string(const std::string& text, const std::string& name);
  std::string to_string() const;
  void save(const std::string& path) const;
};

// Primitive layer graph produced by elaborating a NetworkSpec. Each prim reads
// slot in0 (and in1 for adds); slot -1 is the network input, slot i is the
// output of prim i.
struct Prim {
  enum Kind { kConv, kBatchNorm, kRelu, kAvgPool, kLinear, kAdd } kind = kConv;
  std::string name;
  int in0 = -1;
  int in1 = -1;
  int64_t k = 0;
  int64_t in_c = 0, out_c = 0;
  int64_t stride = 1;
  int64_t h_in = 0, w_in = 0, h_out = 0, w_out = 0;
  bool searchable = false;
  int edge_id = -1;  // index among searchable convs, -1 otherwise
  int64_t n = 0;     // crossbar size from the spec, 0 = unassigned
  int line = -1;     // originating NetLine index

  bool mapped() const { return kind == kConv || kind == kLinear; }
  // rows x cols of the unrolled weight matrix a crossbar sees
  int64_t rows_needed() const { return kind == kLinear ? in_c : k * k * in_c; }
  int64_t cols_needed() const { return out_c; }
  bool zero_eligible() const {
    return kind == kConv && searchable && in_c == out_c && stride == 1;
  }
};

struct Elaborated {
  int64_t in_channels = 0, in_height = 0, in_width = 0;
  int64_t classes = 0;  // linear output width, 0 if no linear layer
  std::vector<Prim> prims;
  int num_edges = 0;

  std::vector<int> mapped_prims() const;      // indices of conv/linear prims
  std::vector<int> searchable_prims() const;  // indices ordered by edge_id
};

Elaborated elaborate(const NetworkSpec& spec);

}  // namespace xbarnas
