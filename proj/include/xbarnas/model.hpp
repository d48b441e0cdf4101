#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xbarnas/autodiff.hpp"
#include "xbarnas/dataio.hpp"
#include "xbarnas/net.hpp"
#include "xbarnas/optim.hpp"
#include "xbarnas/rng.hpp"
#include "xbarnas/tensor.hpp"
#include "xbarnas/xbar.hpp"
#include "xbarnas/xbar_layer.hpp"

namespace xbarnas {

// Named parameter/buffer bag. Parameters carry grad storage so the tape can
// mirror gradients back after backward; `order` fixes the optimizer's update
// sequence so runs are reproducible.
struct ParamStore {
  std::vector<std::string> order;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  std::map<std::string, std::vector<double>> velocity;

  void add_param(const std::string& name, Tensor t);
  void add_buffer(const std::string& name, Tensor t);
  bool has_param(const std::string& name) const { return params.count(name) != 0; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  Tensor& buffer(const std::string& name);
  const Tensor& buffer(const std::string& name) const;
  // Sum of squared entries over weight tensors (names ending in ".w"), i.e.
  // the quantity multiplied by the weight-decay coefficient in the loss.
  double weight_sq_norm() const;
};

// Kaiming-normal conv/linear weights, identity batch norm. Draw order is
// fixed by construction order, so a seed pins the whole initialization.
void init_conv_param(ParamStore& s, const std::string& base, int64_t out_c, int64_t in_c,
                     int64_t k, Rng& rng);
void init_bn_param(ParamStore& s, const std::string& base, int64_t channels);
void init_linear_param(ParamStore& s, const std::string& base, int64_t out_c, int64_t in_c,
                       Rng& rng);
ParamStore init_params(const Elaborated& net, Rng& rng);

// Batch norm folded into the preceding conv: w'[o,..] = w[o,..]*g/sqrt(v+eps),
// bias_o = b - g*m/sqrt(v+eps). Applying conv(w')+bias matches conv -> eval
// batch norm exactly.
struct FoldedConv {
  Tensor w;
  std::vector<double> bias;
};
FoldedConv fold_batchnorm(const Tensor& w, const Tensor& gamma, const Tensor& beta,
                          const Tensor& run_mean, const Tensor& run_var, double eps);

// Straight-through backward closures for crossbar outputs spliced into a
// tape: the input gradient flows through the float (folded) weights while
// the forward value stays the simulated one.
std::function<void(const Tensor&, const Tensor&, Tensor&)> conv_ste(Tensor w, ConvGeom g);
std::function<void(const Tensor&, const Tensor&, Tensor&)> linear_ste(Tensor w);

enum class RunMode {
  kTrain,           // float path, batch-norm batch statistics
  kEvalIdeal,       // float path, running statistics
  kEvalNonideal,    // crossbar simulation for mapped layers (or a subset)
  kEvalQuantReference  // same quantization, exact integer accumulation
};

// Executes an elaborated network on a tape. In the non-ideal modes each conv
// is folded with its batch norm, programmed onto crossbars sized by the
// layer's own n (hardware default when unassigned), and spliced into the tape
// with a straight-through backward that uses the folded float weights.
class Model {
 public:
  Model(const Elaborated& net, ParamStore& store);

  // Returns the logits node. hw is required for the non-ideal and quantized
  // modes. nonideal_prims restricts crossbar execution to those prim indices
  // (others stay on the float path); null means every mapped prim.
  int forward(Tape& tape, const Tensor& images, RunMode mode, const CrossbarConfig* hw = nullptr,
              const std::vector<int>* nonideal_prims = nullptr);

  // Drop programmed layers (after weight updates or hardware changes).
  void invalidate_programming() { programmed_.clear(); }

  const Elaborated& net() const { return *net_; }
  ParamStore& store() { return *store_; }
  int64_t programmed_layers() const { return static_cast<int64_t>(programmed_.size()); }

  LayerStats stats;  // accumulated over crossbar forwards
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

 private:
  ProgrammedLayer& programmed(const Prim& p, const CrossbarConfig& hw);
  int bn_consumer(int prim_idx) const;

  const Elaborated* net_;
  ParamStore* store_;
  std::map<std::string, ProgrammedLayer> programmed_;
};

struct EvalOptions {
  int64_t batch = 64;
  RunMode mode = RunMode::kEvalIdeal;
  const CrossbarConfig* hw = nullptr;
  // Count solver failures per batch and keep going instead of propagating.
  bool skip_failures = false;
};

struct EvalResult {
  double accuracy = 0.0;
  double avg_loss = 0.0;
  int64_t evaluated = 0;
  int64_t failed = 0;  // samples in batches the solver could not converge
};

// Top-1 accuracy (argmax, ties to the lowest class) over the given sample
// indices; empty `indices` means the whole set.
EvalResult evaluate(Model& model, const Dataset& ds, const std::vector<int64_t>& indices,
                    const EvalOptions& opt);

struct TrainOptions {
  int epochs = 10;
  int64_t batch = 16;
  SgdOptions sgd;
  uint64_t seed = 1;
  bool verbose = false;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;      // mean CE + weight decay term
  double ce_loss = 0.0;   // mean CE alone
  double accuracy = 0.0;  // training accuracy over the epoch
};

// Plain SGD training on the float path. Shuffles per epoch from a single
// seeded generator; throws NumericError if the loss stops being finite.
std::vector<EpochLog> train_model(Model& model, const Dataset& train, const TrainOptions& opt,
                                  const std::vector<int64_t>& indices = {});

// Binary weight container ("XBWT"): params then buffers, each name + shape +
// float64 payload, little endian. Loading requires an identically shaped
// store (same names, same dims).
void save_weights(const std::string& path, const ParamStore& store);
void load_weights(const std::string& path, ParamStore& store);

}  // namespace xbarnas
