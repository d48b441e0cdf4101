#pragma once

#include <string>
#include <vector>

#include "xbarnas/tensor.hpp"

namespace xbarnas {

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.0;
  // Coefficient of the ||w||^2 loss term; the update applies its gradient,
  // i.e. w <- w - lr * (grad + 2 * weight_decay * w).
  double weight_decay = 0.0;
};

// In-place SGD update using the gradient mirrored into p.grad by the tape.
// velocity may be null when momentum is zero; `name` labels error messages.
// Throws NumericError on a missing or non-finite gradient.
void sgd_step(Tensor& p, const SgdOptions& opt, std::vector<double>* velocity,
              const std::string& name);

}  // namespace xbarnas
