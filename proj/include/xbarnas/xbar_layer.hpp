#pragma once

#include <cstdint>
#include <vector>

#include "xbarnas/autodiff.hpp"
#include "xbarnas/mapper.hpp"
#include "xbarnas/rng.hpp"
#include "xbarnas/tensor.hpp"
#include "xbarnas/xbar.hpp"

namespace xbarnas {

struct LayerStats {
  int64_t solves = 0;        // crossbar patterns actually solved
  int64_t cached = 0;        // patterns served from the memo
  int64_t positions = 0;     // output positions evaluated
};

// One conv or linear layer programmed onto crossbars. Weights are quantized
// with one per-tensor scale, the matrix is chunked per the mapper, and each
// chunk owns a CrossbarBlock (slice stack + pattern memo). Activations are
// quantized per sample, streamed bit-serially, and partial sums across row
// partitions are added as integers before dequantization; the bias (e.g. a
// folded batch norm) is applied digitally.
class ProgrammedLayer {
 public:
  // w: [O, I, K, K]; rows follow the patch layout r = c*K*K + ky*K + kx.
  static ProgrammedLayer conv(const CrossbarConfig& hw, const ConvGeom& g, const Tensor& w,
                              const std::vector<double>& bias);
  // w: [O, I]; empty bias means none.
  static ProgrammedLayer linear(const CrossbarConfig& hw, const Tensor& w,
                                const std::vector<double>& bias);

  // Conv: [B, I, H, W] -> [B, O, H_o, W_o]; linear: [B, I] -> [B, O].
  // Output positions are processed in tiles of hw.tile_size; the tile size
  // changes evaluation order only, never values.
  Tensor forward(const Tensor& x, LayerStats* stats = nullptr);

  // Same quantization and integer accumulation, but through an exact integer
  // matrix product instead of the analog path. The fully ideal analog
  // configuration reproduces this bit-exactly.
  Tensor forward_reference(const Tensor& x) const;

  const MappedLayer& mapped() const { return mapped_; }
  double weight_scale() const { return w_scale_; }
  int64_t memo_size() const;

 private:
  ProgrammedLayer() = default;
  void program(const CrossbarConfig& hw, const std::vector<double>& matrix,
               const std::vector<double>& bias, int64_t vectors);
  // Integer accumulators for `count` quantized input vectors stored
  // column-major (xq[r * count + p]); acc is [count x cols].
  void run_vectors(const std::vector<uint32_t>& xq, int64_t count, int64_t* acc,
                   LayerStats* stats);
  void run_vectors_reference(const std::vector<uint32_t>& xq, int64_t count, int64_t* acc) const;

  CrossbarConfig hw_;
  ConvGeom geom_;  // k == 0 marks a linear layer
  bool is_linear_ = false;
  int64_t rows_ = 0, cols_ = 0;
  MappedLayer mapped_;
  std::vector<Chunk> chunks_;
  std::vector<CrossbarBlock> blocks_;
  std::vector<int32_t> wq_;  // full signed code matrix, rows x cols
  double w_scale_ = 1.0;
  std::vector<double> bias_;
};

struct MvmErrorResult {
  double mean_rel_error = 0.0;  // mean over instances of sum|y - y_exact| / sum|y_exact|
  LayerStats stats;
};

// Mean relative error of the non-ideal pipeline against the exact integer
// product on random dense instances (weight codes spanning the full signed
// range, activations the full unsigned range). rows/cols <= hw.n gives a
// single partially-utilized crossbar.
MvmErrorResult mvm_error_stat(const CrossbarConfig& hw, int64_t rows, int64_t cols,
                              int64_t instances, Rng& rng);

}  // namespace xbarnas
