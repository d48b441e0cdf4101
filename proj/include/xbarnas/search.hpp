#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "xbarnas/autodiff.hpp"
#include "xbarnas/config.hpp"
#include "xbarnas/cost.hpp"
#include "xbarnas/dataio.hpp"
#include "xbarnas/model.hpp"
#include "xbarnas/net.hpp"
#include "xbarnas/rng.hpp"
#include "xbarnas/xbar.hpp"

namespace xbarnas {

struct SearchOptions {
  double lambda1 = 0.0;  // weight decay
  double lambda2 = 0.0;  // latency-area coefficient (per ms*mm^2)
  double lambda3 = 0.0;  // energy coefficient (per mJ)
  double lr_w = 0.05;
  double lr_arch = 0.01;
  double momentum = 0.9;  // weight steps only; alpha uses plain SGD
  int epochs = 8;         // weight/arch epoch pairs
  int warmup_epochs = 0;  // leading epochs that train weights only (no arch steps)
  double val_fraction = 0.2;
  int nonideal_layers_per_step = 2;
  bool all_paths = true;  // false: two-path arch steps (active + one rival)
  uint64_t seed = 1;
  int64_t batch = 16;
  std::vector<int64_t> kernels{3, 5};
  std::vector<int64_t> sizes{32, 64};

  static SearchOptions from_config(const KeyValueConfig& cfg);
  void validate(int num_edges) const;
};

// One op of a mixed edge; k == 0 is the zero op.
struct EdgeCandidate {
  int64_t k = 0;
  int64_t n = 0;
  std::string name;  // parameter prefix, e.g. "e2.k3n64"
  bool is_zero() const { return k == 0; }
};

struct TraceRow {
  int epoch = 0;
  char phase = 'w';  // 'w' weight epoch, 'a' arch epoch
  double loss = 0.0;
  double ce_loss = 0.0;
  double e_energy = 0.0;   // expected energy over searchable edges, mJ
  double e_latency = 0.0;  // expected latency-area over searchable edges, ms*mm^2
};

// Expected hardware effort of one edge and its gradient wrt that edge's
// alpha: value = sum_j p_j F_j, d/dalpha_i = p_i (F_i - value). F is read
// from the LUT (energy in mJ or latency-area in ms*mm^2); the zero op costs
// nothing.
struct EdgeHwe {
  double value = 0.0;
  std::vector<double> dalpha;
};
EdgeHwe expected_hwe(const std::vector<EdgeCandidate>& cands, const std::vector<double>& alpha,
                     const CostLut& lut, int edge_id, bool energy);

// Softmax probabilities of one edge's alpha vector.
std::vector<double> edge_probs(const std::vector<double>& alpha);
// Inverse-CDF draw over the softmax; consumes exactly one uniform.
int sample_gate(const std::vector<double>& alpha, Rng& rng);

// Over-parameterized network: the backbone of a spec with every searchable
// conv replaced by a mixed edge whose candidates are kernels x sizes plus a
// zero op where shapes allow. Each candidate owns its weights and batch norm.
class SuperNet {
 public:
  SuperNet(const NetworkSpec& spec, const SearchOptions& opt, Rng& rng);

  const Elaborated& net() const { return net_; }
  int num_edges() const { return net_.num_edges; }
  const std::vector<EdgeCandidate>& candidates(int edge) const {
    return cands_[static_cast<size_t>(edge)];
  }
  std::vector<double>& alpha(int edge) { return alpha_[static_cast<size_t>(edge)]; }
  const std::vector<double>& alpha(int edge) const { return alpha_[static_cast<size_t>(edge)]; }
  ParamStore& store() { return store_; }

  struct ForwardResult {
    int logits = -1;
    std::vector<int> gate_nodes;           // per edge, -1 outside arch mode
    std::vector<std::string> used_params;  // leaves touched this forward
  };
  // Weight mode (arch_mode false): only the active candidate per edge runs,
  // on the float path with batch-stat batch norm. Arch mode: every candidate
  // runs (running-stat batch norm), outputs join in a gated sum carrying the
  // sampled one-hot gates; edges listed in ni_edges plus the first conv and
  // the final linear execute on simulated crossbars with straight-through
  // backward. arch_paths optionally restricts which candidates run per edge
  // (two-path mode); null means all.
  ForwardResult forward(Tape& tape, const Tensor& images, const std::vector<int>& active,
                        bool arch_mode, const CrossbarConfig* hw,
                        const std::vector<int>& ni_edges,
                        const std::vector<std::vector<int>>* arch_paths = nullptr);

  void invalidate_programming() { programmed_.clear(); }

  // Expected hardware effort summed over edges at the current alpha.
  double expected_total(const CostLut& lut, bool energy) const;
  // argmax per edge, ties to the lowest index.
  std::vector<int> chosen() const;

  LayerStats stats;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

 private:
  friend NetworkSpec extract_compact(const SuperNet& sn, const NetworkSpec& spec);
  ProgrammedLayer& programmed_conv(const std::string& wname, const std::string& bnname,
                                   const Prim& p, int64_t k, int64_t n,
                                   const CrossbarConfig& hw);
  ProgrammedLayer& programmed_linear(const Prim& p, const CrossbarConfig& hw);

  Elaborated net_;
  std::vector<std::vector<EdgeCandidate>> cands_;
  std::vector<std::vector<double>> alpha_;
  ParamStore store_;
  std::map<std::string, ProgrammedLayer> programmed_;
  int first_conv_ = -1;   // always non-ideal in arch steps
  int last_linear_ = -1;  // always non-ideal in arch steps
};

struct SearchResult {
  NetworkSpec compact;
  std::vector<int> chosen_candidate;  // per edge
  std::vector<TraceRow> trace;
  int aborted_arch_steps = 0;
  double e_energy = 0.0;   // at the final alpha, mJ
  double e_latency = 0.0;  // at the final alpha, ms*mm^2
};

// Alternates one weight epoch (sampled single paths, ideal math) and one
// arch epoch (gated sums, non-ideal subset, analytic alpha updates) per
// round, then extracts the argmax network. Trace rows are appended to
// *live_trace as they finish so a caller can persist them even when the
// search aborts on divergence (NumericError).
SearchResult run_search(const NetworkSpec& spec, const Dataset& train, const Dataset& val,
                        const CostLut& lut, const CrossbarConfig& hw, const SearchOptions& opt,
                        std::ostream* log = nullptr, std::vector<TraceRow>* live_trace = nullptr);

// Compact spec from the argmax candidates: searched conv lines take the
// chosen k and n (zero-chosen lines are dropped), searched blocks take
// k1/n1, k2/n2 with zero choices expressed through the k1=0 / k1=k2=0 block
// forms. The result is re-elaborated to validate shapes.
NetworkSpec extract_compact(const SuperNet& sn, const NetworkSpec& spec);

}  // namespace xbarnas
