#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "xbarnas/tensor.hpp"

namespace xbarnas {

struct ConvGeom {
  int64_t k = 0, in_c = 0, out_c = 0, stride = 1, pad = 0;
  int64_t h_in = 0, w_in = 0, h_out = 0, w_out = 0;

  static ConvGeom same_pad(int64_t k, int64_t in_c, int64_t out_c, int64_t stride, int64_t h_in,
                           int64_t w_in);
  int64_t rows() const { return k * k * in_c; }  // unrolled patch length
  int64_t patches() const { return h_out * w_out; }
};

// Patch unrolling shared by the ideal convolution and the crossbar mapping:
// row index r = c*k*k + ky*k + kx, one column per output position.
void im2col(const double* x, const ConvGeom& g, double* cols);
void col2im(const double* cols, const ConvGeom& g, double* x);

// Reverse-mode tape. Nodes are created in topological order; backward walks
// them in reverse. Values are owned by the tape; gradients are allocated
// during backward and are deterministic for a fixed tape.
class Tape {
 public:
  // Leaves: `leaf` participates in backward when t.requires_grad is set,
  // `constant` never does.
  int leaf(Tensor t);
  int constant(Tensor t);

  // x: [B, I, H, W], w: [O, I, K, K]; same padding comes from g.
  int conv2d(int x, int w, const ConvGeom& g);
  // x: [B, I], w: [O, I], b: [O] (b = -1 for no bias).
  int linear(int x, int w, int b);
  int relu(int x);
  // Global average pool [B, C, H, W] -> [B, C].
  int avgpool(int x);
  // Affine batch norm over (B, H, W) per channel. In training mode batch
  // statistics are used and running stats (owned by the caller) are updated
  // in place; in eval mode the running stats are used.
  int batchnorm(int x, int gamma, int beta, Tensor* run_mean, Tensor* run_var, bool training,
                double momentum, double eps);
  int add(int a, int b);
  // y = sum_i gates[i] * xs[i]; d(gate_i) = <dy, xs[i]> even for zero gates.
  int gated_sum(const std::vector<int>& xs, int gates);
  // Mean cross-entropy with integer labels; returns a scalar node.
  int softmax_ce(int logits, const std::vector<uint16_t>& labels);
  int sum(int x);
  // Scalar dot(weights, x); weights is a plain tensor, not a node.
  int weighted_sum(int x, Tensor weights);
  // Injects an externally computed value (e.g. crossbar simulation) with a
  // caller-supplied Jacobian for the single input x.
  int external(Tensor value, int x,
               std::function<void(const Tensor& dy, const Tensor& x_value, Tensor& dx)> bwd);

  void backward(int loss);

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  // Valid after backward; zero tensor if the node was not reached.
  const Tensor& grad(int id);
  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].has_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::vector<int> parents;
    std::function<void(Tape&, int)> bwd;
  };

  int push(Node n);
  Tensor& grad_ref(int id);
  void accumulate(int id, const Tensor& g);
  bool any_parent_needs(const std::vector<int>& parents) const;

  std::vector<Node> nodes_;
};

}  // namespace xbarnas
