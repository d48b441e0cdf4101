#include "xbarnas/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "xbarnas/errors.hpp"
#include "xbarnas/gemm.hpp"

namespace xbarnas {

void ParamStore::add_param(const std::string& name, Tensor t) {
  if (params.count(name)) throw ConfigError("duplicate parameter " + name);
  t.requires_grad = true;
  if (!t.grad) t.grad = std::make_shared<std::vector<double>>(t.data.size(), 0.0);
  params.emplace(name, std::move(t));
  order.push_back(name);
}

void ParamStore::add_buffer(const std::string& name, Tensor t) {
  if (buffers.count(name)) throw ConfigError("duplicate buffer " + name);
  buffers.emplace(name, std::move(t));
}

Tensor& ParamStore::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

const Tensor& ParamStore::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

Tensor& ParamStore::buffer(const std::string& name) {
  auto it = buffers.find(name);
  if (it == buffers.end()) throw ConfigError("unknown buffer " + name);
  return it->second;
}

const Tensor& ParamStore::buffer(const std::string& name) const {
  auto it = buffers.find(name);
  if (it == buffers.end()) throw ConfigError("unknown buffer " + name);
  return it->second;
}

double ParamStore::weight_sq_norm() const {
  double s = 0.0;
  for (const std::string& name : order) {
    if (name.size() < 2 || name.compare(name.size() - 2, 2, ".w") != 0) continue;
    const Tensor& t = params.at(name);
    for (double v : t.data) s += v * v;
  }
  return s;
}

void init_conv_param(ParamStore& s, const std::string& base, int64_t out_c, int64_t in_c,
                     int64_t k, Rng& rng) {
  Tensor w({out_c, in_c, k, k});
  double std_dev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
  for (double& v : w.data) v = std_dev * rng.normal();
  s.add_param(base + ".w", std::move(w));
}

void init_bn_param(ParamStore& s, const std::string& base, int64_t channels) {
  Tensor g({channels});
  std::fill(g.data.begin(), g.data.end(), 1.0);
  s.add_param(base + ".g", std::move(g));
  s.add_param(base + ".b", Tensor::zeros({channels}));
  s.add_buffer(base + ".rm", Tensor::zeros({channels}));
  Tensor rv({channels});
  std::fill(rv.data.begin(), rv.data.end(), 1.0);
  s.add_buffer(base + ".rv", std::move(rv));
}

void init_linear_param(ParamStore& s, const std::string& base, int64_t out_c, int64_t in_c,
                       Rng& rng) {
  Tensor w({out_c, in_c});
  double std_dev = std::sqrt(2.0 / static_cast<double>(in_c));
  for (double& v : w.data) v = std_dev * rng.normal();
  s.add_param(base + ".w", std::move(w));
  s.add_param(base + ".b", Tensor::zeros({out_c}));
}

ParamStore init_params(const Elaborated& net, Rng& rng) {
  ParamStore s;
  for (const Prim& p : net.prims) {
    switch (p.kind) {
      case Prim::kConv:
        init_conv_param(s, p.name, p.out_c, p.in_c, p.k, rng);
        break;
      case Prim::kBatchNorm:
        init_bn_param(s, p.name, p.out_c);
        break;
      case Prim::kLinear:
        init_linear_param(s, p.name, p.out_c, p.in_c, rng);
        break;
      default:
        break;
    }
  }
  return s;
}

FoldedConv fold_batchnorm(const Tensor& w, const Tensor& gamma, const Tensor& beta,
                          const Tensor& run_mean, const Tensor& run_var, double eps) {
  int64_t out_c = w.dim(0);
  if (gamma.numel() != out_c || beta.numel() != out_c || run_mean.numel() != out_c ||
      run_var.numel() != out_c)
    throw ConfigError("fold_batchnorm: channel count mismatch");
  FoldedConv f;
  f.w = w;
  f.w.requires_grad = false;
  f.w.grad.reset();
  f.bias.resize(static_cast<size_t>(out_c));
  int64_t per_out = w.numel() / out_c;
  for (int64_t o = 0; o < out_c; ++o) {
    double istd = 1.0 / std::sqrt(run_var[o] + eps);
    double scale = gamma[o] * istd;
    double* row = f.w.data.data() + o * per_out;
    for (int64_t i = 0; i < per_out; ++i) row[i] *= scale;
    f.bias[static_cast<size_t>(o)] = beta[o] - run_mean[o] * scale;
  }
  return f;
}

Model::Model(const Elaborated& net, ParamStore& store) : net_(&net), store_(&store) {}

int Model::bn_consumer(int prim_idx) const {
  const std::vector<Prim>& prims = net_->prims;
  for (size_t i = static_cast<size_t>(prim_idx) + 1; i < prims.size(); ++i)
    if (prims[i].kind == Prim::kBatchNorm && prims[i].in0 == prim_idx)
      return static_cast<int>(i);
  return -1;
}

ProgrammedLayer& Model::programmed(const Prim& p, const CrossbarConfig& hw) {
  auto it = programmed_.find(p.name);
  if (it != programmed_.end()) return it->second;

  CrossbarConfig lhw = hw.with_n(p.n > 0 ? p.n : hw.n);
  if (p.kind == Prim::kLinear) {
    FoldedConv f;
    f.w = store_->param(p.name + ".w");
    const Tensor& b = store_->param(p.name + ".b");
    f.bias.assign(b.data.begin(), b.data.end());
    ProgrammedLayer pl = ProgrammedLayer::linear(lhw, f.w, f.bias);
    return programmed_.emplace(p.name, std::move(pl)).first->second;
  }
  int bn = bn_consumer(static_cast<int>(&p - net_->prims.data()));
  FoldedConv f;
  if (bn >= 0) {
    const std::string& bname = net_->prims[static_cast<size_t>(bn)].name;
    f = fold_batchnorm(store_->param(p.name + ".w"), store_->param(bname + ".g"),
                       store_->param(bname + ".b"), store_->buffer(bname + ".rm"),
                       store_->buffer(bname + ".rv"), bn_eps);
  } else {
    f.w = store_->param(p.name + ".w");
    f.bias.assign(static_cast<size_t>(p.out_c), 0.0);
  }
  ConvGeom g = ConvGeom::same_pad(p.k, p.in_c, p.out_c, p.stride, p.h_in, p.w_in);
  ProgrammedLayer pl = ProgrammedLayer::conv(lhw, g, f.w, f.bias);
  return programmed_.emplace(p.name, std::move(pl)).first->second;
}

std::function<void(const Tensor&, const Tensor&, Tensor&)> conv_ste(Tensor w, ConvGeom g) {
  return [w = std::move(w), g](const Tensor& dy, const Tensor& x_value, Tensor& dx) {
    int64_t batch = x_value.dim(0);
    int64_t rows = g.rows(), patches = g.patches();
    std::vector<double> dcol(static_cast<size_t>(rows * patches));
    std::vector<double> dxb(static_cast<size_t>(g.in_c * g.h_in * g.w_in));
    for (int64_t b = 0; b < batch; ++b) {
      const double* dyb = dy.data.data() + b * g.out_c * patches;
      gemm_at(w.data.data(), dyb, dcol.data(), rows, g.out_c, patches, false);
      col2im(dcol.data(), g, dxb.data());
      double* out = dx.data.data() + b * g.in_c * g.h_in * g.w_in;
      for (size_t i = 0; i < dxb.size(); ++i) out[i] += dxb[i];
    }
  };
}

std::function<void(const Tensor&, const Tensor&, Tensor&)> linear_ste(Tensor w) {
  return [w = std::move(w)](const Tensor& dy, const Tensor& x_value, Tensor& dx) {
    int64_t batch = x_value.dim(0);
    int64_t out_c = w.dim(0), in_c = w.dim(1);
    std::vector<double> tmp(static_cast<size_t>(batch * in_c));
    gemm(dy.data.data(), w.data.data(), tmp.data(), batch, out_c, in_c, false);
    for (size_t i = 0; i < tmp.size(); ++i) dx.data[i] += tmp[i];
  };
}

int Model::forward(Tape& tape, const Tensor& images, RunMode mode, const CrossbarConfig* hw,
                   const std::vector<int>* nonideal_prims) {
  bool analog = mode == RunMode::kEvalNonideal || mode == RunMode::kEvalQuantReference;
  if (analog && !hw)
    throw ConfigError("model forward: crossbar mode needs a hardware config");
  bool training = mode == RunMode::kTrain;

  auto on_xbar = [&](int idx) {
    if (!analog) return false;
    if (!nonideal_prims) return true;
    return std::find(nonideal_prims->begin(), nonideal_prims->end(), idx) !=
           nonideal_prims->end();
  };

  std::vector<int> node(net_->prims.size(), -1);
  std::vector<char> folded(net_->prims.size(), 0);
  std::map<std::string, int> leaves;
  auto leaf_of = [&](const std::string& name) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    int id = tape.leaf(store_->param(name));
    leaves.emplace(name, id);
    return id;
  };

  int input = tape.constant(images);
  auto slot = [&](int s) { return s < 0 ? input : node[static_cast<size_t>(s)]; };

  for (size_t i = 0; i < net_->prims.size(); ++i) {
    const Prim& p = net_->prims[i];
    int x = slot(p.in0);
    switch (p.kind) {
      case Prim::kConv: {
        if (on_xbar(static_cast<int>(i))) {
          ProgrammedLayer& pl = programmed(p, *hw);
          Tensor y = mode == RunMode::kEvalQuantReference
                         ? pl.forward_reference(tape.value(x))
                         : pl.forward(tape.value(x), &stats);
          ConvGeom g = ConvGeom::same_pad(p.k, p.in_c, p.out_c, p.stride, p.h_in, p.w_in);
          FoldedConv f;
          int bn = bn_consumer(static_cast<int>(i));
          if (bn >= 0) {
            const std::string& bname = net_->prims[static_cast<size_t>(bn)].name;
            f = fold_batchnorm(store_->param(p.name + ".w"), store_->param(bname + ".g"),
                               store_->param(bname + ".b"), store_->buffer(bname + ".rm"),
                               store_->buffer(bname + ".rv"), bn_eps);
            folded[static_cast<size_t>(bn)] = 1;
          } else {
            f.w = store_->param(p.name + ".w");
          }
          node[i] = tape.external(std::move(y), x, conv_ste(std::move(f.w), g));
        } else {
          ConvGeom g = ConvGeom::same_pad(p.k, p.in_c, p.out_c, p.stride, p.h_in, p.w_in);
          node[i] = tape.conv2d(x, leaf_of(p.name + ".w"), g);
        }
        break;
      }
      case Prim::kBatchNorm: {
        if (folded[i]) {
          node[i] = x;  // already applied inside the programmed conv
          break;
        }
        node[i] = tape.batchnorm(x, leaf_of(p.name + ".g"), leaf_of(p.name + ".b"),
                                 &store_->buffer(p.name + ".rm"), &store_->buffer(p.name + ".rv"),
                                 training, bn_momentum, bn_eps);
        break;
      }
      case Prim::kRelu:
        node[i] = tape.relu(x);
        break;
      case Prim::kAvgPool:
        node[i] = tape.avgpool(x);
        break;
      case Prim::kAdd:
        node[i] = tape.add(x, slot(p.in1));
        break;
      case Prim::kLinear: {
        if (on_xbar(static_cast<int>(i))) {
          ProgrammedLayer& pl = programmed(p, *hw);
          Tensor y = mode == RunMode::kEvalQuantReference
                         ? pl.forward_reference(tape.value(x))
                         : pl.forward(tape.value(x), &stats);
          node[i] = tape.external(std::move(y), x, linear_ste(store_->param(p.name + ".w")));
        } else {
          node[i] = tape.linear(x, leaf_of(p.name + ".w"), leaf_of(p.name + ".b"));
        }
        break;
      }
    }
  }
  if (net_->prims.empty()) throw ConfigError("model forward: empty network");
  return node.back();
}

EvalResult evaluate(Model& model, const Dataset& ds, const std::vector<int64_t>& indices,
                    const EvalOptions& opt) {
  std::vector<int64_t> idx = indices;
  if (idx.empty()) {
    idx.resize(static_cast<size_t>(ds.count));
    std::iota(idx.begin(), idx.end(), 0);
  }
  EvalResult r;
  int64_t correct = 0;
  double loss_sum = 0.0;
  for (int64_t first = 0; first < static_cast<int64_t>(idx.size()); first += opt.batch) {
    int64_t n = std::min<int64_t>(opt.batch, static_cast<int64_t>(idx.size()) - first);
    Tensor images = ds.batch(idx, first, n);
    std::vector<uint16_t> labels(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b)
      labels[static_cast<size_t>(b)] = ds.labels[static_cast<size_t>(idx[static_cast<size_t>(first + b)])];
    try {
      Tape tape;
      int logits = model.forward(tape, images, opt.mode, opt.hw, nullptr);
      const Tensor& y = tape.value(logits);
      int64_t classes = y.dim(1);
      for (int64_t b = 0; b < n; ++b) {
        const double* row = y.data.data() + b * classes;
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
          if (row[c] > row[best]) best = c;
        if (best == labels[static_cast<size_t>(b)]) ++correct;
      }
      int ce = tape.softmax_ce(logits, labels);
      loss_sum += tape.value(ce)[0] * static_cast<double>(n);
      r.evaluated += n;
    } catch (const NumericError&) {
      if (!opt.skip_failures) throw;
      r.failed += n;
    }
  }
  if (r.evaluated > 0) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.evaluated);
    r.avg_loss = loss_sum / static_cast<double>(r.evaluated);
  }
  return r;
}

std::vector<EpochLog> train_model(Model& model, const Dataset& train, const TrainOptions& opt,
                                  const std::vector<int64_t>& indices) {
  std::vector<int64_t> idx = indices;
  if (idx.empty()) {
    idx.resize(static_cast<size_t>(train.count));
    std::iota(idx.begin(), idx.end(), 0);
  }
  Rng rng(opt.seed);
  ParamStore& store = model.store();
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(idx);
    double ce_sum = 0.0;
    int64_t seen = 0, correct = 0;
    for (int64_t first = 0; first < static_cast<int64_t>(idx.size()); first += opt.batch) {
      int64_t n = std::min<int64_t>(opt.batch, static_cast<int64_t>(idx.size()) - first);
      Tensor images = train.batch(idx, first, n);
      std::vector<uint16_t> labels(static_cast<size_t>(n));
      for (int64_t b = 0; b < n; ++b)
        labels[static_cast<size_t>(b)] =
            train.labels[static_cast<size_t>(idx[static_cast<size_t>(first + b)])];
      Tape tape;
      int logits = model.forward(tape, images, RunMode::kTrain, nullptr, nullptr);
      int ce = tape.softmax_ce(logits, labels);
      tape.backward(ce);
      const Tensor& y = tape.value(logits);
      int64_t classes = y.dim(1);
      for (int64_t b = 0; b < n; ++b) {
        const double* row = y.data.data() + b * classes;
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
          if (row[c] > row[best]) best = c;
        if (best == labels[static_cast<size_t>(b)]) ++correct;
      }
      ce_sum += tape.value(ce)[0] * static_cast<double>(n);
      seen += n;
      for (const std::string& name : store.order) {
        SgdOptions po = opt.sgd;
        // Weight decay targets conv/linear weights, not biases or norms.
        if (name.size() < 2 || name.compare(name.size() - 2, 2, ".w") != 0)
          po.weight_decay = 0.0;
        sgd_step(store.param(name), po, &store.velocity[name], name);
      }
    }
    EpochLog log;
    log.epoch = epoch;
    log.ce_loss = ce_sum / static_cast<double>(seen);
    log.loss = log.ce_loss + opt.sgd.weight_decay * store.weight_sq_norm();
    log.accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    logs.push_back(log);
  }
  model.invalidate_programming();
  return logs;
}

namespace {

void put_u32(std::string& out, uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
               static_cast<char>(v >> 24)};
  out.append(b, 4);
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<uint32_t>(t.shape.size()));
  for (int64_t d : t.shape) {
    uint64_t u = static_cast<uint64_t>(d);
    for (int s = 0; s < 64; s += 8) out.push_back(static_cast<char>(u >> s));
  }
  out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
}

struct WeightReader {
  std::ifstream f;
  std::string path;
  uint32_t u32() {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw ConfigError(path + ": truncated weight file");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
  }
  void read_tensor(std::string& name, Tensor& t) {
    uint32_t nl = u32();
    name.resize(nl);
    f.read(name.data(), nl);
    uint32_t nd = u32();
    std::vector<int64_t> shape(nd);
    for (uint32_t i = 0; i < nd; ++i) {
      unsigned char b[8];
      f.read(reinterpret_cast<char*>(b), 8);
      uint64_t u = 0;
      for (int s = 0; s < 8; ++s) u |= static_cast<uint64_t>(b[s]) << (8 * s);
      shape[i] = static_cast<int64_t>(u);
    }
    if (!f) throw ConfigError(path + ": truncated weight file");
    t = Tensor::zeros(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!f) throw ConfigError(path + ": truncated weight file");
  }
};

}  // namespace

void save_weights(const std::string& path, const ParamStore& store) {
  std::string out = "XBWT";
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(store.params.size()));
  for (const auto& [name, t] : store.params) put_tensor(out, name, t);
  put_u32(out, static_cast<uint32_t>(store.buffers.size()));
  for (const auto& [name, t] : store.buffers) put_tensor(out, name, t);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw MissingArtifactError("cannot write " + tmp);
    f << out;
    if (!f) throw MissingArtifactError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw MissingArtifactError("cannot rename " + tmp + " to " + path);
}

void load_weights(const std::string& path, ParamStore& store) {
  WeightReader r;
  r.path = path;
  r.f.open(path, std::ios::binary);
  if (!r.f) throw MissingArtifactError("cannot open weights " + path);
  char magic[4];
  r.f.read(magic, 4);
  if (!r.f || std::memcmp(magic, "XBWT", 4) != 0)
    throw ConfigError(path + ": not a weight file");
  if (r.u32() != 1) throw ConfigError(path + ": unsupported weight file version");
  auto fill = [&](std::map<std::string, Tensor>& dst, const char* what, uint32_t count) {
    for (uint32_t i = 0; i < count; ++i) {
      std::string name;
      Tensor t;
      r.read_tensor(name, t);
      auto it = dst.find(name);
      if (it == dst.end())
        throw ConfigError(path + ": " + what + " " + name + " does not exist in this network");
      if (it->second.shape != t.shape)
        throw ConfigError(path + ": shape mismatch for " + name);
      it->second.data = std::move(t.data);
    }
  };
  uint32_t np = r.u32();
  if (np != store.params.size()) throw ConfigError(path + ": parameter count mismatch");
  fill(store.params, "parameter", np);
  uint32_t nb = r.u32();
  if (nb != store.buffers.size()) throw ConfigError(path + ": buffer count mismatch");
  fill(store.buffers, "buffer", nb);
}

}  // namespace xbarnas
