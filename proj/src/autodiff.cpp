#include "xbarnas/autodiff.hpp"

#include <cmath>

#include "xbarnas/errors.hpp"
#include "xbarnas/gemm.hpp"
#include "xbarnas/parallel.hpp"

namespace xbarnas {

ConvGeom ConvGeom::same_pad(int64_t k, int64_t in_c, int64_t out_c, int64_t stride, int64_t h_in,
                            int64_t w_in) {
  ConvGeom g;
  g.k = k;
  g.in_c = in_c;
  g.out_c = out_c;
  g.stride = stride;
  g.pad = (k - 1) / 2;
  g.h_in = h_in;
  g.w_in = w_in;
  g.h_out = (h_in + 2 * g.pad - k) / stride + 1;
  g.w_out = (w_in + 2 * g.pad - k) / stride + 1;
  return g;
}

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const int64_t P = g.patches();
  for (int64_t c = 0; c < g.in_c; ++c) {
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (int64_t oy = 0; oy < g.h_out; ++oy) {
          int64_t iy = oy * g.stride - g.pad + ky;
          for (int64_t ox = 0; ox < g.w_out; ++ox) {
            int64_t ix = ox * g.stride - g.pad + kx;
            double v = 0.0;
            if (iy >= 0 && iy < g.h_in && ix >= 0 && ix < g.w_in)
              v = x[(c * g.h_in + iy) * g.w_in + ix];
            row[oy * g.w_out + ox] = v;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* x) {
  const int64_t P = g.patches();
  for (int64_t c = 0; c < g.in_c; ++c) {
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (int64_t oy = 0; oy < g.h_out; ++oy) {
          int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h_in) continue;
          for (int64_t ox = 0; ox < g.w_out; ++ox) {
            int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w_in) continue;
            x[(c * g.h_in + iy) * g.w_in + ix] += row[oy * g.w_out + ox];
          }
        }
      }
    }
  }
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape);
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor& Tape::grad(int id) {
  return grad_ref(id);
}

void Tape::accumulate(int id, const Tensor& g) {
  Tensor& dst = grad_ref(id);
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
}

bool Tape::any_parent_needs(const std::vector<int>& parents) const {
  for (int p : parents)
    if (p >= 0 && nodes_[static_cast<size_t>(p)].needs_grad) return true;
  return false;
}

int Tape::leaf(Tensor t) {
  Node n;
  n.needs_grad = t.requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

int Tape::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  return push(std::move(n));
}

int Tape::conv2d(int x, int w, const ConvGeom& g) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  if (xv.ndim() != 4 || xv.dim(1) != g.in_c || xv.dim(2) != g.h_in || xv.dim(3) != g.w_in)
    throw ConfigError("conv2d: input shape " + xv.shape_str() + " does not match geometry");
  if (wv.numel() != g.out_c * g.rows())
    throw ConfigError("conv2d: weight shape " + wv.shape_str() + " does not match geometry");
  const int64_t B = xv.dim(0), R = g.rows(), P = g.patches();

  Tensor out({B, g.out_c, g.h_out, g.w_out});
  par::for_range(B, [&](int64_t b) {
    std::vector<double> col(static_cast<size_t>(R * P));
    im2col(xv.data.data() + b * g.in_c * g.h_in * g.w_in, g, col.data());
    gemm(wv.data.data(), col.data(), out.data.data() + b * g.out_c * P, g.out_c, R, P,
         /*parallel=*/false);
  });

  Node n;
  n.value = std::move(out);
  n.parents = {x, w};
  n.needs_grad = any_parent_needs(n.parents);
  ConvGeom geom = g;
  n.bwd = [x, w, geom](Tape& t, int self) {
    const Tensor& dy = t.grad_ref(self);
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const int64_t B = xv.dim(0), R = geom.rows(), P = geom.patches();
    const bool need_x = t.nodes_[static_cast<size_t>(x)].needs_grad;
    const bool need_w = t.nodes_[static_cast<size_t>(w)].needs_grad;
    std::vector<double> col(static_cast<size_t>(R * P));
    std::vector<double> dcol(static_cast<size_t>(R * P));
    Tensor* dx = need_x ? &t.grad_ref(x) : nullptr;
    Tensor* dw = need_w ? &t.grad_ref(w) : nullptr;
    for (int64_t b = 0; b < B; ++b) {  // sequential: fixed accumulation order
      const double* dyb = dy.data.data() + b * geom.out_c * P;
      if (need_w) {
        im2col(xv.data.data() + b * geom.in_c * geom.h_in * geom.w_in, geom, col.data());
        gemm_bt_acc(dyb, col.data(), dw->data.data(), geom.out_c, P, R);
      }
      if (need_x) {
        gemm_at(wv.data.data(), dyb, dcol.data(), R, geom.out_c, P);
        col2im(dcol.data(), geom, dx->data.data() + b * geom.in_c * geom.h_in * geom.w_in);
      }
    }
  };
  return push(std::move(n));
}

int Tape::linear(int x, int w, int b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const int64_t B = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
  if (wv.dim(1) != I)
    throw ConfigError("linear: weight shape " + wv.shape_str() + " does not match input " +
                      xv.shape_str());
  Tensor out({B, O});
  gemm_bt(xv.data.data(), wv.data.data(), out.data.data(), B, I, O);
  if (b >= 0) {
    const Tensor& bv = value(b);
    for (int64_t i = 0; i < B; ++i)
      for (int64_t j = 0; j < O; ++j) out.data[static_cast<size_t>(i * O + j)] += bv[j];
  }
  Node n;
  n.value = std::move(out);
  n.parents = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
  n.needs_grad = any_parent_needs(n.parents);
  n.bwd = [x, w, b, B, I, O](Tape& t, int self) {
    const Tensor& dy = t.grad_ref(self);
    if (t.nodes_[static_cast<size_t>(x)].needs_grad) {
      Tensor dx({B, I});
      gemm(dy.data.data(), t.value(w).data.data(), dx.data.data(), B, O, I);
      t.accumulate(x, dx);
    }
    if (t.nodes_[static_cast<size_t>(w)].needs_grad) {
      Tensor dw({O, I});
      gemm_at(dy.data.data(), t.value(x).data.data(), dw.data.data(), O, B, I);
      t.accumulate(w, dw);
    }
    if (b >= 0 && t.nodes_[static_cast<size_t>(b)].needs_grad) {
      Tensor& db = t.grad_ref(b);
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < O; ++j) db.data[static_cast<size_t>(j)] += dy[i * O + j];
    }
  };
  return push(std::move(n));
}

int Tape::relu(int x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape);
  for (size_t i = 0; i < xv.data.size(); ++i) out.data[i] = xv.data[i] > 0.0 ? xv.data[i] : 0.0;
  Node n;
  n.value = std::move(out);
  n.parents = {x};
  n.needs_grad = any_parent_needs(n.parents);
  n.bwd = [x](Tape& t, int self) {
    if (!t.nodes_[static_cast<size_t>(x)].needs_grad) return;
    const Tensor& dy = t.grad_ref(self);
    const Tensor& xv = t.value(x);
    Tensor& dx = t.grad_ref(x);
    for (size_t i = 0; i < dx.data.size(); ++i)
      if (xv.data[i] > 0.0) dx.data[i] += dy.data[i];
  };
  return push(std::move(n));
}

int Tape::avgpool(int x) {
  const Tensor& xv = value(x);
  const int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out({B, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = xv.data.data() + (b * C + c) * HW;
      double s = 0.0;
      for (int64_t i = 0; i < HW; ++i) s += p[i];
      out.data[static_cast<size_t>(b * C + c)] = s / static_cast<double>(HW);
    }
  Node n;
  n.value = std::move(out);
  n.parents = {x};
  n.needs_grad = any_parent_needs(n.parents);
  n.bwd = [x, B, C, HW](Tape& t, int self) {
    if (!t.nodes_[static_cast<size_t>(x)].needs_grad) return;
    const Tensor& dy = t.grad_ref(self);
    Tensor& dx = t.grad_ref(x);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        double g = dy[b * C + c] / static_cast<double>(HW);
        double* p = dx.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) p[i] += g;
      }
  };
  return push(std::move(n));
}

int Tape::batchnorm(int x, int gamma, int beta, Tensor* run_mean, Tensor* run_var, bool training,
                    double momentum, double eps) {
  const Tensor& xv = value(x);
  if (xv.ndim() != 4) throw ConfigError("batchnorm expects a 4-d activation");
  const int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  const double M = static_cast<double>(B * HW);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);

  auto mean_var = std::make_shared<std::vector<double>>(static_cast<size_t>(2 * C));
  double* mu = mean_var->data();
  double* istd = mean_var->data() + C;
  for (int64_t c = 0; c < C; ++c) {
    double m = 0.0, v = 0.0;
    if (training) {
      for (int64_t b = 0; b < B; ++b) {
        const double* p = xv.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) m += p[i];
      }
      m /= M;
      for (int64_t b = 0; b < B; ++b) {
        const double* p = xv.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= M;
      (*run_mean)[c] = (1.0 - momentum) * (*run_mean)[c] + momentum * m;
      (*run_var)[c] = (1.0 - momentum) * (*run_var)[c] + momentum * v;
    } else {
      m = (*run_mean)[c];
      v = (*run_var)[c];
    }
    mu[c] = m;
    istd[c] = 1.0 / std::sqrt(v + eps);
  }

  Tensor out(xv.shape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = xv.data.data() + (b * C + c) * HW;
      double* q = out.data.data() + (b * C + c) * HW;
      double g = gv[c], bb = bv[c], m = mu[c], is = istd[c];
      for (int64_t i = 0; i < HW; ++i) q[i] = g * (p[i] - m) * is + bb;
    }

  Node n;
  n.value = std::move(out);
  n.parents = {x, gamma, beta};
  n.needs_grad = any_parent_needs(n.parents);
  n.bwd = [x, gamma, beta, mean_var, training, B, C, HW, M](Tape& t, int self) {
    const Tensor& dy = t.grad_ref(self);
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gamma);
    const double* mu = mean_var->data();
    const double* istd = mean_var->data() + C;
    const bool need_x = t.nodes_[static_cast<size_t>(x)].needs_grad;
    const bool need_g = t.nodes_[static_cast<size_t>(gamma)].needs_grad;
    const bool need_b = t.nodes_[static_cast<size_t>(beta)].needs_grad;
    Tensor* dx = need_x ? &t.grad_ref(x) : nullptr;
    Tensor* dg = need_g ? &t.grad_ref(gamma) : nullptr;
    Tensor* db = need_b ? &t.grad_ref(beta) : nullptr;
    for (int64_t c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const double* pdy = dy.data.data() + (b * C + c) * HW;
        const double* px = xv.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          sum_dy += pdy[i];
          sum_dy_xh += pdy[i] * (px[i] - mu[c]) * istd[c];
        }
      }
      if (need_g) dg->data[static_cast<size_t>(c)] += sum_dy_xh;
      if (need_b) db->data[static_cast<size_t>(c)] += sum_dy;
      if (need_x) {
        double g_istd = gv[c] * istd[c];
        for (int64_t b = 0; b < B; ++b) {
          const double* pdy = dy.data.data() + (b * C + c) * HW;
          const double* px = xv.data.data() + (b * C + c) * HW;
          double* pdx = dx->data.data() + (b * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            if (training) {
              double xh = (px[i] - mu[c]) * istd[c];
              pdx[i] += g_istd * (pdy[i] - sum_dy / M - xh * sum_dy_xh / M);
            } else {
              pdx[i] += g_istd * pdy[i];
            }
          }
        }
      }
    }
  };
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv))
    throw ConfigError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out(av.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  Node n;
  n.value = std::move(out);
  n.parents = {a, b};
  n.needs_grad = any_parent_needs(n.parents);
  n.bwd = [a, b](Tape& t, int self) {
    const Tensor& dy = t.grad_ref(self);
    if (t.nodes_[static_cast<size_t>(a)].needs_grad) t.accumulate(a, dy);
    if (t.nodes_[static_cast<size_t>(b)].needs_grad) t.accumulate(b, dy);
  };
  return push(std::move(n));
}

int Tape::gated_sum(const std::vector<int>& xs, int gates) {
  if (xs.empty()) throw ConfigError("gated_sum: no inputs");
  const Tensor& gv = value(gates);
  if (gv.numel() != static_cast<int64_t>(xs.size()))
    throw ConfigError("gated_sum: gate count does not match input count");
  Tensor out(value(xs[0]).shape);
  for (size_t i = 0; i < xs.size(); ++i) {
    const Tensor& xi = value(xs[i]);
    if (!xi.same_shape(out))
      throw ConfigError("gated_sum: candidate output shapes differ");
    double g = gv[static_cast<int64_t>(i)];
    if (g == 0.0) continue;
    for (size_t j = 0; j < out.data.size(); ++j) out.data[j] += g * xi.data[j];
  }
  Node n;
  n.value = std::move(out);
  n.parents = xs;
  n.parents.push_back(gates);
  n.needs_grad = any_parent_needs(n.parents);
  std::vector<int> inputs = xs;
  n.bwd = [inputs, gates](Tape& t, int self) {
    const Tensor& dy = t.grad_ref(self);
    const Tensor& gv = t.value(gates);
    for (size_t i = 0; i < inputs.size(); ++i) {
      if (t.nodes_[static_cast<size_t>(inputs[i])].needs_grad &&
          gv[static_cast<int64_t>(i)] != 0.0) {
        Tensor& dx = t.grad_ref(inputs[i]);
        double g = gv[static_cast<int64_t>(i)];
        for (size_t j = 0; j < dx.data.size(); ++j) dx.data[j] += g * dy.data[j];
      }
    }
    if (t.nodes_[static_cast<size_t>(gates)].needs_grad) {
      Tensor& dg = t.grad_ref(gates);
      for (size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& xi = t.value(inputs[i]);
        double s = 0.0;
        for (size_t j = 0; j < xi.data.size(); ++j) s += dy.data[j] * xi.data[j];
        dg.data[i] += s;
      }
    }
  };
  return push(std::move(n));
}

int Tape::softmax_ce(int logits, const std::vector<uint16_t>& labels) {
  const Tensor& lv = value(logits);
  const int64_t B = lv.dim(0), C = lv.dim(1);
  if (static_cast<int64_t>(labels.size()) != B)
    throw ConfigError("softmax_ce: label count does not match batch");
  auto probs = std::make_shared<Tensor>(Tensor({B, C}));
  double loss = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const double* row = lv.data.data() + b * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    double logz = std::log(z) + mx;
    for (int64_t c = 0; c < C; ++c)
      probs->data[static_cast<size_t>(b * C + c)] = std::exp(row[c] - logz);
    loss += logz - row[labels[static_cast<size_t>(b)]];
  }
  Tensor out({1});
  out.data[0] = loss / static_cast<double>(B);
  Node n;
  n.value = std::move(out);
  n.parents = {logits};
  n.needs_grad = any_parent_needs(n.parents);
  std::vector<uint16_t> lab = labels;
  n.bwd = [logits, probs, lab, B, C](Tape& t, int self) {
    if (!t.nodes_[static_cast<size_t>(logits)].needs_grad) return;
    double dy = t.grad_ref(self)[0];
    Tensor& dl = t.grad_ref(logits);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t c = 0; c < C; ++c) {
        double p = probs->data[static_cast<size_t>(b * C + c)];
        double ind = (c == lab[static_cast<size_t>(b)]) ? 1.0 : 0.0;
        dl.data[static_cast<size_t>(b * C + c)] += dy * (p - ind) / static_cast<double>(B);
      }
    }
  };
  return push(std::move(n));
}

int Tape::sum(int x) {
  const Tensor& xv = value(x);
  Tensor out({1});
  double s = 0.0;
  for (double v : xv.data) s += v;
  out.data[0] = s;
  Node n;
  n.value = std::move(out);
  n.parents = {x};
  n.needs_grad = any_parent_needs(n.parents);
  n.bwd = [x](Tape& t, int self) {
    if (!t.nodes_[static_cast<size_t>(x)].needs_grad) return;
    double dy = t.grad_ref(self)[0];
    Tensor& dx = t.grad_ref(x);
    for (double& v : dx.data) v += dy;
  };
  return push(std::move(n));
}

int Tape::weighted_sum(int x, Tensor weights) {
  const Tensor& xv = value(x);
  if (weights.numel() != xv.numel())
    throw ConfigError("weighted_sum: weight count mismatch");
  Tensor out({1});
  double s = 0.0;
  for (size_t i = 0; i < xv.data.size(); ++i) s += weights.data[i] * xv.data[i];
  out.data[0] = s;
  Node n;
  n.value = std::move(out);
  n.parents = {x};
  n.needs_grad = any_parent_needs(n.parents);
  auto wp = std::make_shared<Tensor>(std::move(weights));
  n.bwd = [x, wp](Tape& t, int self) {
    if (!t.nodes_[static_cast<size_t>(x)].needs_grad) return;
    double dy = t.grad_ref(self)[0];
    Tensor& dx = t.grad_ref(x);
    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dy * wp->data[i];
  };
  return push(std::move(n));
}

int Tape::external(Tensor value_in, int x,
                   std::function<void(const Tensor&, const Tensor&, Tensor&)> bwd) {
  Node n;
  n.value = std::move(value_in);
  n.parents = {x};
  n.needs_grad = any_parent_needs(n.parents);
  n.bwd = [x, bwd](Tape& t, int self) {
    if (!t.nodes_[static_cast<size_t>(x)].needs_grad) return;
    const Tensor& dy = t.grad_ref(self);
    bwd(dy, t.value(x), t.grad_ref(x));
  };
  return push(std::move(n));
}

void Tape::backward(int loss) {
  Node& ln = nodes_[static_cast<size_t>(loss)];
  if (ln.value.numel() != 1) throw ConfigError("backward: loss must be a scalar node");
  if (!std::isfinite(ln.value[0]))
    throw NumericError("backward: loss is not finite");
  grad_ref(loss)[0] = 1.0;
  for (int id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.has_grad && n.needs_grad && n.bwd) n.bwd(*this, id);
  }
  // Mirror leaf gradients into the tensors the caller handed in, so the
  // optimizer can run after the tape is gone.
  for (Node& n : nodes_) {
    if (!n.value.requires_grad || !n.value.grad) continue;
    if (n.has_grad)
      *n.value.grad = n.grad.data;
    else
      n.value.grad->assign(static_cast<size_t>(n.value.numel()), 0.0);
  }
}

}  // namespace xbarnas
