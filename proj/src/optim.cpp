#include "xbarnas/optim.hpp"

#include <cmath>

#include "xbarnas/errors.hpp"

namespace xbarnas {

void sgd_step(Tensor& p, const SgdOptions& opt, std::vector<double>* velocity,
              const std::string& name) {
  if (!p.grad || p.grad->size() != p.data.size())
    throw NumericError("sgd_step: no gradient recorded for " + name);
  const std::vector<double>& g = *p.grad;
  for (double gv : g)
    if (!std::isfinite(gv)) throw NumericError("sgd_step: non-finite gradient for " + name);
  const double wd = 2.0 * opt.weight_decay;
  if (opt.momentum != 0.0) {
    if (!velocity) throw NumericError("sgd_step: momentum requires velocity state for " + name);
    if (velocity->size() != p.data.size()) velocity->assign(p.data.size(), 0.0);
    for (size_t i = 0; i < p.data.size(); ++i) {
      double step = g[i] + wd * p.data[i];
      (*velocity)[i] = opt.momentum * (*velocity)[i] + step;
      p.data[i] -= opt.lr * (*velocity)[i];
    }
  } else {
    for (size_t i = 0; i < p.data.size(); ++i)
      p.data[i] -= opt.lr * (g[i] + wd * p.data[i]);
  }
}

}  // namespace xbarnas
