#include "xbarnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "xbarnas/errors.hpp"

namespace xbarnas {

SearchOptions SearchOptions::from_config(const KeyValueConfig& cfg) {
  SearchOptions o;
  o.lambda1 = cfg.get_double("lambda1", o.lambda1);
  o.lambda2 = cfg.get_double("lambda2", o.lambda2);
  o.lambda3 = cfg.get_double("lambda3", o.lambda3);
  o.lr_w = cfg.get_double("lr_w", o.lr_w);
  o.lr_arch = cfg.get_double("lr_arch", o.lr_arch);
  o.momentum = cfg.get_double("momentum", o.momentum);
  o.epochs = cfg.get_int("epochs", o.epochs);
  o.warmup_epochs = cfg.get_int("warmup_epochs", o.warmup_epochs);
  o.val_fraction = cfg.get_double("val_fraction", o.val_fraction);
  o.nonideal_layers_per_step = cfg.get_int("nonideal_layers_per_step", o.nonideal_layers_per_step);
  o.all_paths = cfg.get_bool("all_paths", o.all_paths);
  o.seed = static_cast<uint64_t>(cfg.get_int("seed", static_cast<int>(o.seed)));
  o.batch = cfg.get_int("batch", static_cast<int>(o.batch));
  std::vector<int> kd(o.kernels.begin(), o.kernels.end());
  std::vector<int> sd(o.sizes.begin(), o.sizes.end());
  std::vector<int> k = cfg.get_int_list("kernels", kd);
  std::vector<int> s = cfg.get_int_list("sizes", sd);
  o.kernels.assign(k.begin(), k.end());
  o.sizes.assign(s.begin(), s.end());
  return o;
}

void SearchOptions::validate(int num_edges) const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
    throw ConfigError("search: lambda coefficients must be >= 0");
  if (lr_w <= 0 || lr_arch <= 0) throw ConfigError("search: learning rates must be > 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("search: momentum must be in [0, 1)");
  if (epochs < 1) throw ConfigError("search: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs)
    throw ConfigError("search: warmup_epochs must be in [0, epochs)");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("search: val_fraction must be in (0, 1)");
  if (nonideal_layers_per_step < 0)
    throw ConfigError("search: nonideal_layers_per_step must be >= 0");
  if (nonideal_layers_per_step > num_edges)
    throw ConfigError("search: nonideal_layers_per_step exceeds the " +
                      std::to_string(num_edges) + " searchable edges");
  if (batch < 1) throw ConfigError("search: batch must be >= 1");
  if (kernels.empty()) throw ConfigError("search: kernel candidate list is empty");
  for (int64_t k : kernels)
    if (k < 1 || k % 2 == 0) throw ConfigError("search: kernels must be odd and positive");
  if (sizes.empty()) throw ConfigError("search: size candidate list is empty");
  for (int64_t n : sizes)
    if (!cost_size_supported(n))
      throw ConfigError("search: unsupported crossbar size " + std::to_string(n));
}

std::vector<double> edge_probs(const std::vector<double>& alpha) {
  std::vector<double> p(alpha.size());
  double mx = alpha[0];
  for (double a : alpha) mx = std::max(mx, a);
  double z = 0.0;
  for (size_t i = 0; i < alpha.size(); ++i) {
    p[i] = std::exp(alpha[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

int sample_gate(const std::vector<double>& alpha, Rng& rng) {
  for (double a : alpha)
    if (!std::isfinite(a)) throw NumericError("sample_gate: non-finite architecture parameter");
  std::vector<double> p = edge_probs(alpha);
  double u = rng.uniform();
  double cum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    cum += p[i];
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;
}

EdgeHwe expected_hwe(const std::vector<EdgeCandidate>& cands, const std::vector<double>& alpha,
                     const CostLut& lut, int edge_id, bool energy) {
  if (cands.size() != alpha.size()) throw ConfigError("expected_hwe: alpha/candidate mismatch");
  std::vector<double> p = edge_probs(alpha);
  std::vector<double> f(cands.size(), 0.0);
  for (size_t i = 0; i < cands.size(); ++i) {
    const EdgeCandidate& c = cands[i];
    const CostEntry& e = lut.at(edge_id, c.k, c.n);  // zero op has an all-zero row
    f[i] = energy ? e.energy_j * 1e3 : e.latency_area * 1e3;
  }
  EdgeHwe r;
  for (size_t i = 0; i < cands.size(); ++i) r.value += p[i] * f[i];
  r.dalpha.resize(cands.size());
  for (size_t i = 0; i < cands.size(); ++i) r.dalpha[i] = p[i] * (f[i] - r.value);
  return r;
}

SuperNet::SuperNet(const NetworkSpec& spec, const SearchOptions& opt, Rng& rng)
    : net_(elaborate(spec)) {
  cands_.resize(static_cast<size_t>(net_.num_edges));
  alpha_.resize(static_cast<size_t>(net_.num_edges));
  for (size_t i = 0; i < net_.prims.size(); ++i) {
    const Prim& p = net_.prims[i];
    if (p.kind == Prim::kConv && p.searchable) {
      if (first_conv_ == -1) first_conv_ = static_cast<int>(i);
      auto& cs = cands_[static_cast<size_t>(p.edge_id)];
      for (int64_t k : opt.kernels)
        for (int64_t n : opt.sizes) {
          EdgeCandidate c;
          c.k = k;
          c.n = n;
          c.name = "e" + std::to_string(p.edge_id) + ".k" + std::to_string(k) + "n" +
                   std::to_string(n);
          init_conv_param(store_, c.name, p.out_c, p.in_c, k, rng);
          init_bn_param(store_, c.name + ".bn", p.out_c);
          cs.push_back(std::move(c));
        }
      if (p.zero_eligible()) {
        EdgeCandidate z;
        z.name = "e" + std::to_string(p.edge_id) + ".zero";
        cs.push_back(std::move(z));
      }
      alpha_[static_cast<size_t>(p.edge_id)].assign(cs.size(), 0.0);
    } else if (p.kind == Prim::kConv) {
      if (first_conv_ == -1) first_conv_ = static_cast<int>(i);
      init_conv_param(store_, p.name, p.out_c, p.in_c, p.k, rng);
    } else if (p.kind == Prim::kBatchNorm) {
      const Prim& src = net_.prims[static_cast<size_t>(p.in0)];
      if (!(src.kind == Prim::kConv && src.searchable))
        init_bn_param(store_, p.name, p.out_c);  // candidates own their norms
    } else if (p.kind == Prim::kLinear) {
      last_linear_ = static_cast<int>(i);
      init_linear_param(store_, p.name, p.out_c, p.in_c, rng);
    }
  }
}

ProgrammedLayer& SuperNet::programmed_conv(const std::string& wname, const std::string& bnbase,
                                           const Prim& p, int64_t k, int64_t n,
                                           const CrossbarConfig& hw) {
  auto it = programmed_.find(wname);
  if (it != programmed_.end()) return it->second;
  FoldedConv f = fold_batchnorm(store_.param(wname), store_.param(bnbase + ".g"),
                                store_.param(bnbase + ".b"), store_.buffer(bnbase + ".rm"),
                                store_.buffer(bnbase + ".rv"), bn_eps);
  ConvGeom g = ConvGeom::same_pad(k, p.in_c, p.out_c, p.stride, p.h_in, p.w_in);
  ProgrammedLayer pl = ProgrammedLayer::conv(hw.with_n(n > 0 ? n : hw.n), g, f.w, f.bias);
  return programmed_.emplace(wname, std::move(pl)).first->second;
}

ProgrammedLayer& SuperNet::programmed_linear(const Prim& p, const CrossbarConfig& hw) {
  auto it = programmed_.find(p.name);
  if (it != programmed_.end()) return it->second;
  const Tensor& w = store_.param(p.name + ".w");
  const Tensor& b = store_.param(p.name + ".b");
  std::vector<double> bias(b.data.begin(), b.data.end());
  ProgrammedLayer pl = ProgrammedLayer::linear(hw.with_n(p.n > 0 ? p.n : hw.n), w, bias);
  return programmed_.emplace(p.name, std::move(pl)).first->second;
}

SuperNet::ForwardResult SuperNet::forward(Tape& tape, const Tensor& images,
                                          const std::vector<int>& active, bool arch_mode,
                                          const CrossbarConfig* hw,
                                          const std::vector<int>& ni_edges,
                                          const std::vector<std::vector<int>>* arch_paths) {
  if (arch_mode && !hw) throw ConfigError("supernet forward: arch mode needs a hardware config");
  if (static_cast<int>(active.size()) != net_.num_edges)
    throw ConfigError("supernet forward: need one active candidate per edge");
  int64_t batch = images.dim(0);

  ForwardResult fr;
  fr.gate_nodes.assign(static_cast<size_t>(net_.num_edges), -1);
  std::map<std::string, int> leaves;
  auto leaf_of = [&](const std::string& name) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    int id = tape.leaf(store_.param(name));
    leaves.emplace(name, id);
    fr.used_params.push_back(name);
    return id;
  };
  auto edge_nonideal = [&](int e) {
    return arch_mode &&
           std::find(ni_edges.begin(), ni_edges.end(), e) != ni_edges.end();
  };

  std::vector<int> node(net_.prims.size(), -1);
  std::vector<char> folded(net_.prims.size(), 0);
  int input = tape.constant(images);
  auto slot = [&](int s) { return s < 0 ? input : node[static_cast<size_t>(s)]; };
  auto bn_of = [&](size_t i) {
    for (size_t j = i + 1; j < net_.prims.size(); ++j)
      if (net_.prims[j].kind == Prim::kBatchNorm && net_.prims[j].in0 == static_cast<int>(i))
        return static_cast<int>(j);
    return -1;
  };

  for (size_t i = 0; i < net_.prims.size(); ++i) {
    const Prim& p = net_.prims[i];
    int x = slot(p.in0);
    switch (p.kind) {
      case Prim::kConv: {
        int bn = bn_of(i);
        if (p.searchable) {
          int e = p.edge_id;
          const auto& cs = cands_[static_cast<size_t>(e)];
          auto candidate_node = [&](const EdgeCandidate& c, bool train_bn) {
            if (c.is_zero())
              return tape.constant(Tensor::zeros({batch, p.out_c, p.h_out, p.w_out}));
            ConvGeom g = ConvGeom::same_pad(c.k, p.in_c, p.out_c, p.stride, p.h_in, p.w_in);
            if (arch_mode && edge_nonideal(e)) {
              ProgrammedLayer& pl = programmed_conv(c.name + ".w", c.name + ".bn", p, c.k, c.n,
                                                    *hw);
              Tensor y = pl.forward(tape.value(x), &stats);
              FoldedConv f = fold_batchnorm(
                  store_.param(c.name + ".w"), store_.param(c.name + ".bn.g"),
                  store_.param(c.name + ".bn.b"), store_.buffer(c.name + ".bn.rm"),
                  store_.buffer(c.name + ".bn.rv"), bn_eps);
              return tape.external(std::move(y), x, conv_ste(std::move(f.w), g));
            }
            int y = tape.conv2d(x, leaf_of(c.name + ".w"), g);
            return tape.batchnorm(y, leaf_of(c.name + ".bn.g"), leaf_of(c.name + ".bn.b"),
                                  &store_.buffer(c.name + ".bn.rm"),
                                  &store_.buffer(c.name + ".bn.rv"), train_bn, bn_momentum,
                                  bn_eps);
          };
          if (!arch_mode) {
            node[i] = candidate_node(cs[static_cast<size_t>(active[static_cast<size_t>(e)])],
                                     true);
          } else {
            const std::vector<int>* paths =
                arch_paths ? &(*arch_paths)[static_cast<size_t>(e)] : nullptr;
            std::vector<int> xs;
            xs.reserve(cs.size());
            for (size_t ci = 0; ci < cs.size(); ++ci) {
              bool run = !paths || std::find(paths->begin(), paths->end(),
                                             static_cast<int>(ci)) != paths->end();
              if (!run) {
                // Masked path: contributes nothing; its gate gradient is 0.
                xs.push_back(tape.constant(Tensor::zeros({batch, p.out_c, p.h_out, p.w_out})));
                continue;
              }
              xs.push_back(candidate_node(cs[ci], false));
            }
            Tensor gates({static_cast<int64_t>(cs.size())});
            gates.requires_grad = true;
            gates.data[static_cast<size_t>(active[static_cast<size_t>(e)])] = 1.0;
            int gid = tape.leaf(std::move(gates));
            fr.gate_nodes[static_cast<size_t>(e)] = gid;
            node[i] = tape.gated_sum(xs, gid);
          }
          if (bn >= 0) folded[static_cast<size_t>(bn)] = 1;
        } else if (arch_mode && static_cast<int>(i) == first_conv_) {
          // Always simulated with non-idealities during arch steps.
          std::string bnbase = bn >= 0 ? net_.prims[static_cast<size_t>(bn)].name : "";
          ProgrammedLayer& pl = programmed_conv(p.name + ".w", bnbase, p, p.k, p.n, *hw);
          Tensor y = pl.forward(tape.value(x), &stats);
          FoldedConv f;
          if (bn >= 0) {
            f = fold_batchnorm(store_.param(p.name + ".w"), store_.param(bnbase + ".g"),
                               store_.param(bnbase + ".b"), store_.buffer(bnbase + ".rm"),
                               store_.buffer(bnbase + ".rv"), bn_eps);
            folded[static_cast<size_t>(bn)] = 1;
          } else {
            f.w = store_.param(p.name + ".w");
          }
          ConvGeom g = ConvGeom::same_pad(p.k, p.in_c, p.out_c, p.stride, p.h_in, p.w_in);
          node[i] = tape.external(std::move(y), x, conv_ste(std::move(f.w), g));
        } else {
          ConvGeom g = ConvGeom::same_pad(p.k, p.in_c, p.out_c, p.stride, p.h_in, p.w_in);
          node[i] = tape.conv2d(x, leaf_of(p.name + ".w"), g);
        }
        break;
      }
      case Prim::kBatchNorm:
        if (folded[i]) {
          node[i] = x;
        } else {
          node[i] = tape.batchnorm(x, leaf_of(p.name + ".g"), leaf_of(p.name + ".b"),
                                   &store_.buffer(p.name + ".rm"), &store_.buffer(p.name + ".rv"),
                                   !arch_mode, bn_momentum, bn_eps);
        }
        break;
      case Prim::kRelu:
        node[i] = tape.relu(x);
        break;
      case Prim::kAvgPool:
        node[i] = tape.avgpool(x);
        break;
      case Prim::kAdd:
        node[i] = tape.add(x, slot(p.in1));
        break;
      case Prim::kLinear:
        if (arch_mode && static_cast<int>(i) == last_linear_) {
          ProgrammedLayer& pl = programmed_linear(p, *hw);
          Tensor y = pl.forward(tape.value(x), &stats);
          node[i] = tape.external(std::move(y), x, linear_ste(store_.param(p.name + ".w")));
        } else {
          node[i] = tape.linear(x, leaf_of(p.name + ".w"), leaf_of(p.name + ".b"));
        }
        break;
    }
  }
  fr.logits = node.back();
  return fr;
}

double SuperNet::expected_total(const CostLut& lut, bool energy) const {
  double total = 0.0;
  for (int e = 0; e < net_.num_edges; ++e)
    total += expected_hwe(cands_[static_cast<size_t>(e)], alpha_[static_cast<size_t>(e)], lut, e,
                          energy)
                 .value;
  return total;
}

std::vector<int> SuperNet::chosen() const {
  std::vector<int> out(static_cast<size_t>(net_.num_edges), 0);
  for (int e = 0; e < net_.num_edges; ++e) {
    const std::vector<double>& a = alpha_[static_cast<size_t>(e)];
    int best = 0;
    for (size_t i = 1; i < a.size(); ++i)
      if (a[i] > a[static_cast<size_t>(best)]) best = static_cast<int>(i);
    out[static_cast<size_t>(e)] = best;
  }
  return out;
}

NetworkSpec extract_compact(const SuperNet& sn, const NetworkSpec& spec) {
  std::vector<int> choice = sn.chosen();
  const Elaborated& net = sn.net_;
  // Searchable conv prims per originating spec line, in prim order
  // (block lines list c1 before c2).
  std::vector<std::vector<const Prim*>> by_line(spec.lines.size());
  for (const Prim& p : net.prims)
    if (p.kind == Prim::kConv && p.searchable)
      by_line[static_cast<size_t>(p.line)].push_back(&p);

  auto pick = [&](const Prim* p) -> const EdgeCandidate& {
    return sn.cands_[static_cast<size_t>(p->edge_id)]
                    [static_cast<size_t>(choice[static_cast<size_t>(p->edge_id)])];
  };

  NetworkSpec out;
  out.in_channels = spec.in_channels;
  out.in_height = spec.in_height;
  out.in_width = spec.in_width;
  for (size_t li = 0; li < spec.lines.size(); ++li) {
    const NetLine& line = spec.lines[li];
    if (!line.searchable) {
      out.lines.push_back(line);
      continue;
    }
    NetLine nl = line;
    nl.searchable = false;
    if (line.kind == NetLine::kConv) {
      const EdgeCandidate& c = pick(by_line[li][0]);
      if (c.is_zero()) continue;  // shape-preserving edge removed entirely
      nl.k = c.k;
      nl.n = c.n;
      out.lines.push_back(nl);
      continue;
    }
    // Block line: first listed prim is c1 unless the input spec already
    // dropped it (k1=0 supernets are unusual but legal).
    const EdgeCandidate* c1 = nullptr;
    const EdgeCandidate* c2 = nullptr;
    size_t idx = 0;
    if (line.k1 != 0 && idx < by_line[li].size()) c1 = &pick(by_line[li][idx++]);
    if (line.k2 != 0 && idx < by_line[li].size()) c2 = &pick(by_line[li][idx++]);
    nl.k1 = 0;
    nl.n1 = 0;
    nl.k2 = 0;
    nl.n2 = 0;
    if (c1 && !c1->is_zero()) {
      nl.k1 = c1->k;
      nl.n1 = c1->n;
    }
    if (c2 && !c2->is_zero()) {
      nl.k2 = c2->k;
      nl.n2 = c2->n;
    }
    if (nl.k1 == 0 && nl.k2 == 0 && line.in == line.out && line.stride == 1)
      continue;  // dead branch over an identity skip: block disappears
    out.lines.push_back(nl);
  }
  elaborate(out);  // re-validate shapes; throws ConfigError on a broken graph
  return out;
}

namespace {

std::vector<int> sample_ni_edges(int num_edges, int count, Rng& rng) {
  std::vector<int> pool(static_cast<size_t>(num_edges));
  std::iota(pool.begin(), pool.end(), 0);
  for (int t = 0; t < count; ++t) {
    size_t j = static_cast<size_t>(t) +
               static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(num_edges - t)));
    std::swap(pool[static_cast<size_t>(t)], pool[j]);
  }
  pool.resize(static_cast<size_t>(count));
  return pool;
}

}  // namespace

SearchResult run_search(const NetworkSpec& spec, const Dataset& train, const Dataset& val,
                        const CostLut& lut, const CrossbarConfig& hw, const SearchOptions& opt,
                        std::ostream* log, std::vector<TraceRow>* live_trace) {
  opt.validate(elaborate(spec).num_edges);
  Rng rng(opt.seed);
  SuperNet sn(spec, opt, rng);
  if (sn.num_edges() == 0) throw ConfigError("search: the network has no searchable layers");
  for (int e = 0; e < sn.num_edges(); ++e)
    for (const EdgeCandidate& c : sn.candidates(e))
      lut.at(e, c.k, c.n);  // fail early on missing cost entries

  SearchResult res;
  std::vector<TraceRow> local_trace;
  std::vector<TraceRow>& trace = live_trace ? *live_trace : local_trace;
  ParamStore& store = sn.store();
  int edges = sn.num_edges();

  std::vector<int64_t> train_idx(static_cast<size_t>(train.count));
  std::iota(train_idx.begin(), train_idx.end(), 0);
  std::vector<int64_t> val_idx(static_cast<size_t>(val.count));
  std::iota(val_idx.begin(), val_idx.end(), 0);

  auto batch_of = [](const Dataset& ds, const std::vector<int64_t>& idx, int64_t first,
                     int64_t n, Tensor& images, std::vector<uint16_t>& labels) {
    images = ds.batch(idx, first, n);
    labels.resize(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b)
      labels[static_cast<size_t>(b)] =
          ds.labels[static_cast<size_t>(idx[static_cast<size_t>(first + b)])];
  };

  std::vector<int> active(static_cast<size_t>(edges), 0);
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    // ---- weight epoch: single sampled path per edge, ideal arithmetic ----
    rng.shuffle(train_idx);
    double ce_sum = 0.0;
    int64_t seen = 0;
    for (int64_t first = 0; first < train.count; first += opt.batch) {
      int64_t n = std::min<int64_t>(opt.batch, train.count - first);
      for (int e = 0; e < edges; ++e) active[static_cast<size_t>(e)] = sample_gate(sn.alpha(e), rng);
      Tensor images;
      std::vector<uint16_t> labels;
      batch_of(train, train_idx, first, n, images, labels);
      Tape tape;
      SuperNet::ForwardResult fr = sn.forward(tape, images, active, false, nullptr, {});
      int ce = tape.softmax_ce(fr.logits, labels);
      tape.backward(ce);  // non-finite loss -> NumericError (divergence)
      ce_sum += tape.value(ce)[0] * static_cast<double>(n);
      seen += n;
      for (const std::string& name : fr.used_params) {
        SgdOptions po;
        po.lr = opt.lr_w;
        po.momentum = opt.momentum;
        bool is_weight = name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0;
        po.weight_decay = is_weight ? opt.lambda1 : 0.0;
        sgd_step(store.param(name), po, &store.velocity[name], name);
      }
    }
    TraceRow wr;
    wr.epoch = epoch;
    wr.phase = 'w';
    wr.ce_loss = ce_sum / static_cast<double>(seen);
    wr.e_energy = sn.expected_total(lut, true);
    wr.e_latency = sn.expected_total(lut, false);
    wr.loss = wr.ce_loss + opt.lambda1 * store.weight_sq_norm() + opt.lambda2 * wr.e_latency +
              opt.lambda3 * wr.e_energy;
    trace.push_back(wr);
    if (log)
      *log << "epoch " << epoch << " w loss " << wr.loss << " ce " << wr.ce_loss << " E[energy] "
           << wr.e_energy << " E[lat] " << wr.e_latency << "\n";

    // Warmup epochs train weights only, so every candidate is functional
    // before the gates start competing.
    if (epoch < opt.warmup_epochs) continue;

    // Weights changed; programmed layers are stale for the coming arch epoch.
    sn.invalidate_programming();

    // ---- arch epoch: gated sums, non-ideal subset, analytic alpha update --
    double a_ce_sum = 0.0, a_loss_sum = 0.0;
    int64_t a_seen = 0;
    double wnorm = store.weight_sq_norm();
    for (int64_t first = 0; first < val.count; first += opt.batch) {
      int64_t n = std::min<int64_t>(opt.batch, val.count - first);
      // rng order per step: gates, then the non-ideal edge subset, then
      // two-path rivals (when enabled).
      for (int e = 0; e < edges; ++e) active[static_cast<size_t>(e)] = sample_gate(sn.alpha(e), rng);
      std::vector<int> ni = sample_ni_edges(edges, opt.nonideal_layers_per_step, rng);
      std::vector<std::vector<int>> paths;
      if (!opt.all_paths) {
        paths.resize(static_cast<size_t>(edges));
        for (int e = 0; e < edges; ++e) {
          int cands = static_cast<int>(sn.candidates(e).size());
          int a = active[static_cast<size_t>(e)];
          paths[static_cast<size_t>(e)] = {a};
          if (cands > 1) {
            int r = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cands - 1)));
            if (r >= a) ++r;
            paths[static_cast<size_t>(e)].push_back(r);
          }
        }
      }
      Tensor images;
      std::vector<uint16_t> labels;
      batch_of(val, val_idx, first, n, images, labels);
      Tape tape;
      SuperNet::ForwardResult fr;
      try {
        fr = sn.forward(tape, images, active, true, &hw, ni, opt.all_paths ? nullptr : &paths);
      } catch (const NumericError& ex) {
        ++res.aborted_arch_steps;
        if (log) *log << "arch step aborted: " << ex.what() << "\n";
        continue;
      }
      int ce = tape.softmax_ce(fr.logits, labels);
      double ce_val = tape.value(ce)[0];
      if (!std::isfinite(ce_val)) throw NumericError("search diverged: loss is not finite");
      tape.backward(ce);

      double e_en = 0.0, e_la = 0.0;
      for (int e = 0; e < edges; ++e) {
        const std::vector<double>& a = sn.alpha(e);
        std::vector<double> p = edge_probs(a);
        const Tensor& gg = tape.grad(fr.gate_nodes[static_cast<size_t>(e)]);
        EdgeHwe en = expected_hwe(sn.candidates(e), a, lut, e, true);
        EdgeHwe la = expected_hwe(sn.candidates(e), a, lut, e, false);
        e_en += en.value;
        e_la += la.value;
        std::vector<double> da(a.size(), 0.0);
        if (opt.all_paths) {
          double s = 0.0;
          for (size_t j = 0; j < a.size(); ++j) s += gg[static_cast<int64_t>(j)] * p[j];
          for (size_t j = 0; j < a.size(); ++j)
            da[j] = p[j] * (gg[static_cast<int64_t>(j)] - s);
        } else {
          // Two-path estimate: softmax restricted to the sampled pair.
          const std::vector<int>& pair = paths[static_cast<size_t>(e)];
          double z = 0.0;
          for (int j : pair) z += p[static_cast<size_t>(j)];
          double s = 0.0;
          for (int j : pair) s += gg[j] * p[static_cast<size_t>(j)] / z;
          for (int j : pair)
            da[static_cast<size_t>(j)] = p[static_cast<size_t>(j)] / z * (gg[j] - s);
        }
        std::vector<double>& alpha = sn.alpha(e);
        for (size_t j = 0; j < a.size(); ++j) {
          da[j] += opt.lambda2 * la.dalpha[j] + opt.lambda3 * en.dalpha[j];
          alpha[j] -= opt.lr_arch * da[j];
        }
      }
      a_ce_sum += ce_val * static_cast<double>(n);
      a_loss_sum += (ce_val + opt.lambda1 * wnorm + opt.lambda2 * e_la + opt.lambda3 * e_en) *
                    static_cast<double>(n);
      a_seen += n;
    }
    TraceRow ar;
    ar.epoch = epoch;
    ar.phase = 'a';
    if (a_seen > 0) {
      ar.ce_loss = a_ce_sum / static_cast<double>(a_seen);
      ar.loss = a_loss_sum / static_cast<double>(a_seen);
    }
    ar.e_energy = sn.expected_total(lut, true);
    ar.e_latency = sn.expected_total(lut, false);
    trace.push_back(ar);
    if (log)
      *log << "epoch " << epoch << " a loss " << ar.loss << " ce " << ar.ce_loss << " E[energy] "
           << ar.e_energy << " E[lat] " << ar.e_latency << "\n";
  }

  res.chosen_candidate = sn.chosen();
  res.compact = extract_compact(sn, spec);
  res.e_energy = sn.expected_total(lut, true);
  res.e_latency = sn.expected_total(lut, false);
  if (live_trace) res.trace = *live_trace;
  else res.trace = std::move(local_trace);
  return res;
}

}  // namespace xbarnas
