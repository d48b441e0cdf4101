#include "xbarnas/xbar.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include "xbarnas/errors.hpp"
#include "xbarnas/parallel.hpp"

namespace xbarnas {

CrossbarConfig CrossbarConfig::from_config(const KeyValueConfig& cfg) {
  CrossbarConfig hw;
  hw.n = cfg.get_int("n", hw.n);
  hw.r_on = cfg.get_double("r_on", hw.r_on);
  hw.r_off = cfg.get_double("r_off", hw.r_off);
  hw.v_supply = cfg.get_double("v_supply", hw.v_supply);
  hw.r_wire = cfg.get_double("r_wire", hw.r_wire);
  hw.r_source = cfg.get_double("r_source", hw.r_source);
  hw.r_sink = cfg.get_double("r_sink", hw.r_sink);
  hw.beta = cfg.get_double("beta", hw.beta);
  hw.fmt.weight_bits = static_cast<int>(cfg.get_int("weight_bits", hw.fmt.weight_bits));
  hw.fmt.activation_bits =
      static_cast<int>(cfg.get_int("activation_bits", hw.fmt.activation_bits));
  hw.fmt.slice_bits = static_cast<int>(cfg.get_int("slice_bits", hw.fmt.slice_bits));
  hw.fmt.stream_bits = static_cast<int>(cfg.get_int("stream_bits", hw.fmt.stream_bits));
  hw.solver_tol = cfg.get_double("solver_tol", hw.solver_tol);
  hw.solver_max_iters = static_cast<int>(cfg.get_int("solver_max_iters", hw.solver_max_iters));
  hw.tile_size = cfg.get_int("tile_size", hw.tile_size);
  hw.validate();
  return hw;
}

CrossbarConfig CrossbarConfig::from_file(const std::string& path) {
  return from_config(KeyValueConfig::from_file(path));
}

CrossbarConfig CrossbarConfig::with_n(int64_t n_new) const {
  CrossbarConfig hw = *this;
  hw.n = n_new;
  hw.validate();
  return hw;
}

void CrossbarConfig::validate() const {
  if (n < 2 || n > 1024) throw ConfigError("crossbar n must be in [2, 1024]");
  if (r_on <= 0.0 || r_off <= r_on)
    throw ConfigError("device resistances need 0 < r_on < r_off");
  if (v_supply <= 0.0) throw ConfigError("v_supply must be positive");
  if (r_wire < 0.0 || r_source < 0.0 || r_sink < 0.0)
    throw ConfigError("parasitic resistances must be non-negative");
  if (beta < 0.0 || beta * v_supply / 2.0 >= 1.0)
    throw ConfigError("beta must be in [0, 2/v_supply)");
  if (solver_tol <= 0.0) throw ConfigError("solver_tol must be positive");
  if (solver_max_iters < 1) throw ConfigError("solver_max_iters must be at least 1");
  if (tile_size < 1) throw ConfigError("tile_size must be at least 1");
  fmt.validate();
}

AdcSpec AdcSpec::for_hw(const CrossbarConfig& hw) {
  AdcSpec adc;
  const int64_t full_scale = static_cast<int64_t>(hw.fmt.slice_max()) * hw.n;
  while ((int64_t{1} << adc.bits) < full_scale + 1) ++adc.bits;
  adc.max_code = (int64_t{1} << adc.bits) - 1;
  adc.lsb = hw.v_supply * (hw.g_max() - hw.g_min()) / static_cast<double>(hw.fmt.slice_max());
  return adc;
}

int64_t AdcSpec::quantize(double current, int64_t popcount, const CrossbarConfig& hw) const {
  double v = (current - hw.v_supply * hw.g_min() * static_cast<double>(popcount)) / lsb;
  int64_t code = std::llround(v);
  return std::clamp(code, int64_t{0}, max_code);
}

namespace {

// Thomas factorization for a symmetric tridiagonal line with constant
// off-diagonal -g_w: m[j] = 1 / (d_j - g_w^2 * m[j-1]) equivalent form via
// cp[j] = -g_w * m[j].
inline void thomas_factor(const double* diag, double g_w, int64_t n, int64_t stride, double* m,
                          double* cp) {
  double prev_cp = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    double denom = diag[j * stride] + g_w * prev_cp;  // a_j = -g_w
    double mj = 1.0 / denom;
    m[j * stride] = mj;
    prev_cp = -g_w * mj;
    cp[j * stride] = prev_cp;
  }
}

inline void thomas_solve(const double* rhs, double g_w, int64_t n, int64_t stride, const double* m,
                         const double* cp, double* v) {
  double prev = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    prev = (rhs[j * stride] + g_w * prev) * m[j * stride];
    v[j * stride] = prev;
  }
  for (int64_t j = n - 2; j >= 0; --j) v[j * stride] -= cp[j * stride] * v[(j + 1) * stride];
}

}  // namespace

CrossbarSolver::CrossbarSolver(const CrossbarConfig& hw, std::vector<double> g0)
    : hw_(hw), g0_(std::move(g0)) {
  if (static_cast<int64_t>(g0_.size()) != hw_.n * hw_.n)
    throw ConfigError("crossbar conductance matrix size does not match n");
  if (!hw_.fully_ideal()) {
    // Partially ideal configurations get a 1 mOhm floor on zero parasitics so
    // the nodal system stays well posed.
    const double floor_r = 1e-3;
    double rw = std::max(hw_.r_wire, floor_r);
    double rs = std::max(hw_.r_source, floor_r);
    double rk = std::max(hw_.r_sink, floor_r);
    g_wire_ = 1.0 / rw;
    g_src_ = 1.0 / (rs + rw);
    g_sink_ = 1.0 / (rk + rw);
  }
}

void CrossbarSolver::factor_lines(const std::vector<double>& g, SolveWorkspace& ws,
                                  bool parallel) const {
  const int64_t n = hw_.n;
  // Row-line diagonals live in ws.rhs transiently; factor along j (stride 1)
  // and along i (stride n) for column lines.
  par::for_range(
      n,
      [&](int64_t i) {
        double* diag = ws.rhs.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
          double d = g[static_cast<size_t>(i * n + j)] + g_wire_;
          if (j == 0)
            d += g_src_ - (n > 1 ? 0.0 : g_wire_);
          else if (j < n - 1)
            d += g_wire_;
          diag[j] = d;
        }
        thomas_factor(diag, g_wire_, n, 1, ws.row_m.data() + i * n, ws.row_cp.data() + i * n);
      },
      parallel);
  par::for_range(
      n,
      [&](int64_t j) {
        for (int64_t i = 0; i < n; ++i) {
          double d = g[static_cast<size_t>(i * n + j)] + g_wire_;
          if (i == n - 1)
            d += g_sink_ - (n > 1 ? 0.0 : g_wire_);
          else if (i > 0)
            d += g_wire_;
          ws.rhs[static_cast<size_t>(i * n + j)] = d;
        }
        thomas_factor(ws.rhs.data() + j, g_wire_, n, n, ws.col_m.data() + j, ws.col_cp.data() + j);
      },
      parallel);
}

double CrossbarSolver::kcl_residual(const uint8_t* x, const std::vector<double>& g,
                                    const SolveWorkspace& ws) const {
  const int64_t n = hw_.n;
  const double vs = hw_.v_supply;
  double worst = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      const size_t idx = static_cast<size_t>(i * n + j);
      const double rij = ws.r[idx], cij = ws.c[idx];
      const double dev = g[idx] * (rij - cij);
      double res_r = -dev;
      if (j == 0)
        res_r += g_src_ * ((x[i] ? vs : 0.0) - rij);
      else
        res_r += g_wire_ * (ws.r[idx - 1] - rij);
      if (j < n - 1) res_r += g_wire_ * (ws.r[idx + 1] - rij);
      double res_c = dev;
      if (i > 0) res_c += g_wire_ * (ws.c[idx - static_cast<size_t>(n)] - cij);
      if (i < n - 1)
        res_c += g_wire_ * (ws.c[idx + static_cast<size_t>(n)] - cij);
      else
        res_c -= g_sink_ * cij;
      worst = std::max(worst, std::max(std::fabs(res_r), std::fabs(res_c)));
    }
  }
  return worst;
}

void CrossbarSolver::solve(const uint8_t* x, double* i_out, SolveWorkspace& ws, SolverReport* rep,
                           std::vector<double>* voltages, bool parallel_lines) const {
  const int64_t n = hw_.n;
  const size_t nn = static_cast<size_t>(n * n);
  const double vs = hw_.v_supply;
  SolverReport local;
  int64_t ones = 0;
  for (int64_t i = 0; i < n; ++i) ones += x[i] ? 1 : 0;

  if (ones == 0) {  // grounded everywhere: the zero state is exact
    for (int64_t j = 0; j < n; ++j) i_out[j] = 0.0;
    if (voltages) voltages->assign(2 * nn, 0.0);
    local.converged = true;
    if (rep) *rep = local;
    return;
  }

  if (hw_.fully_ideal()) {
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t i = 0; i < n; ++i)
        if (x[i]) s += g0_[static_cast<size_t>(i * n + j)];
      i_out[j] = vs * s;
    }
    if (voltages) {
      voltages->assign(2 * nn, 0.0);
      for (int64_t i = 0; i < n; ++i)
        if (x[i])
          for (int64_t j = 0; j < n; ++j) (*voltages)[static_cast<size_t>(i * n + j)] = vs;
    }
    local.converged = true;
    if (rep) *rep = local;
    return;
  }

  ws.r.assign(nn, 0.0);
  ws.c.assign(nn, 0.0);
  ws.g = g0_;
  ws.row_m.resize(nn);
  ws.row_cp.resize(nn);
  ws.col_m.resize(nn);
  ws.col_cp.resize(nn);
  ws.rhs.resize(nn);
  for (int64_t i = 0; i < n; ++i)  // flat-line initial guess
    if (x[i])
      for (int64_t j = 0; j < n; ++j) ws.r[static_cast<size_t>(i * n + j)] = vs;

  const bool nonlinear = hw_.beta != 0.0;
  const double g_lo = hw_.g_min(), g_hi = hw_.g_max();
  auto bias_g = [&](size_t idx) {
    double dv = std::fabs(ws.r[idx] - ws.c[idx]);
    double g = g0_[idx] * (1.0 + hw_.beta * (dv - vs / 2.0));
    return std::clamp(g, g_lo, g_hi);
  };
  if (nonlinear)
    for (size_t idx = 0; idx < nn; ++idx) ws.g[idx] = bias_g(idx);

  const int max_outer = nonlinear ? 100 : 1;
  const double lin_tol = nonlinear ? 0.25 * hw_.solver_tol : hw_.solver_tol;
  const double relax = 0.7;
  bool done = false;

  for (int outer = 0; outer < max_outer && !done; ++outer) {
    ++local.outer_iters;
    factor_lines(ws.g, ws, parallel_lines);
    double res = 0.0;
    while (local.sweeps < hw_.solver_max_iters) {
      // rows given columns, then columns given rows; each line is exact
      par::for_range(
          n,
          [&](int64_t i) {
            double* rhs = ws.rhs.data() + i * n;
            for (int64_t j = 0; j < n; ++j) {
              rhs[j] = ws.g[static_cast<size_t>(i * n + j)] * ws.c[static_cast<size_t>(i * n + j)];
            }
            rhs[0] += g_src_ * (x[i] ? vs : 0.0);
            thomas_solve(rhs, g_wire_, n, 1, ws.row_m.data() + i * n, ws.row_cp.data() + i * n,
                         ws.r.data() + i * n);
          },
          parallel_lines);
      par::for_range(
          n,
          [&](int64_t j) {
            for (int64_t i = 0; i < n; ++i) {
              const size_t idx = static_cast<size_t>(i * n + j);
              ws.rhs[idx] = ws.g[idx] * ws.r[idx];
            }
            thomas_solve(ws.rhs.data() + j, g_wire_, n, n, ws.col_m.data() + j,
                         ws.col_cp.data() + j, ws.c.data() + j);
          },
          parallel_lines);
      ++local.sweeps;
      res = kcl_residual(x, ws.g, ws);
      if (res < lin_tol) break;
    }
    if (!nonlinear) {
      local.residual = res;
      done = res < hw_.solver_tol;
    } else {
      // Evaluate the bias-corrected conductances at the solved voltages; if
      // the solved state already satisfies KCL under them, we are converged.
      double worst_dg = 0.0;
      for (size_t idx = 0; idx < nn; ++idx) {
        double gt = bias_g(idx);
        worst_dg = std::max(worst_dg, std::fabs(gt - ws.g[idx]));
        ws.rhs[idx] = gt;  // stash targets
      }
      std::swap(ws.g, ws.rhs);  // ws.g = targets, ws.rhs = previous
      double res_nl = kcl_residual(x, ws.g, ws);
      local.residual = res_nl;
      if (res_nl < hw_.solver_tol) {
        done = true;
      } else {
        for (size_t idx = 0; idx < nn; ++idx)
          ws.g[idx] = ws.rhs[idx] + relax * (ws.g[idx] - ws.rhs[idx]);
        (void)worst_dg;
      }
    }
    if (local.sweeps >= hw_.solver_max_iters && !done) break;
  }

  local.converged = done;
  if (rep) *rep = local;
  if (!done)
    throw NumericError("crossbar solver did not converge: residual " +
                       std::to_string(local.residual) + " A after " +
                       std::to_string(local.sweeps) + " sweeps");
  for (int64_t j = 0; j < n; ++j) i_out[j] = g_sink_ * ws.c[static_cast<size_t>((n - 1) * n + j)];
  if (voltages) {
    voltages->resize(2 * nn);
    std::copy(ws.r.begin(), ws.r.end(), voltages->begin());
    std::copy(ws.c.begin(), ws.c.end(), voltages->begin() + static_cast<int64_t>(nn));
  }
}

CrossbarBlock::CrossbarBlock(const CrossbarConfig& hw, const int32_t* wq, int64_t rows,
                             int64_t cols)
    : hw_(hw), adc_(AdcSpec::for_hw(hw)), rows_(rows), cols_(cols) {
  if (rows < 1 || rows > hw.n || cols < 1 || cols > hw.n)
    throw ConfigError("crossbar block shape exceeds array size");
  const int64_t n = hw.n;
  const int offset = hw.fmt.weight_offset();
  const int smax = hw.fmt.slice_max();
  const double g_lo = hw.g_min(), g_hi = hw.g_max();
  const int32_t code_max = (1 << hw.fmt.weight_bits) - 1;
  for (int64_t i = 0; i < rows * cols; ++i) {
    int32_t code = wq[i] + offset;
    if (code < 0 || code > code_max)
      throw ConfigError("weight code " + std::to_string(wq[i]) +
                        " outside the offset-binary range for " +
                        std::to_string(hw.fmt.weight_bits) + " bits");
  }
  slices_.reserve(static_cast<size_t>(hw.fmt.num_slices()));
  for (int s = 0; s < hw.fmt.num_slices(); ++s) {
    std::vector<double> g0(static_cast<size_t>(n * n), g_lo);
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t c = 0; c < cols; ++c) {
        int32_t code = wq[r * cols + c] + offset;
        int level = static_cast<int>((code >> (s * hw.fmt.slice_bits)) & smax);
        g0[static_cast<size_t>(r * n + c)] =
            g_lo + static_cast<double>(level) / smax * (g_hi - g_lo);
      }
    }
    slices_.emplace_back(hw, std::move(g0));
  }
}

void CrossbarBlock::codes_for_pattern(const uint8_t* x, int64_t* codes, SolveWorkspace& ws,
                                      bool parallel_lines) const {
  const int64_t n = hw_.n;
  int64_t ones = 0;
  for (int64_t i = 0; i < n; ++i) ones += x[i] ? 1 : 0;
  const int ns = num_slices();
  if (ones == 0) {
    std::fill(codes, codes + static_cast<int64_t>(ns) * n, int64_t{0});
    return;
  }
  std::vector<double> currents(static_cast<size_t>(n));
  for (int s = 0; s < ns; ++s) {
    slices_[static_cast<size_t>(s)].solve(x, currents.data(), ws, nullptr, nullptr,
                                          parallel_lines);
    for (int64_t c = 0; c < n; ++c)
      codes[static_cast<int64_t>(s) * n + c] = adc_.quantize(currents[static_cast<size_t>(c)],
                                                             ones, hw_);
  }
}

std::string CrossbarBlock::pack_pattern(const uint8_t* x, int64_t n) {
  std::string key(static_cast<size_t>((n + 7) / 8), '\0');
  for (int64_t i = 0; i < n; ++i)
    if (x[i]) key[static_cast<size_t>(i / 8)] |= static_cast<char>(1 << (i % 8));
  return key;
}

const int64_t* CrossbarBlock::cached_codes(const std::string& key) const {
  auto it = cache_.find(key);
  return it == cache_.end() ? nullptr : it->second.data();
}

void CrossbarBlock::ensure_patterns(const std::vector<std::vector<uint8_t>>& pats) {
  const int64_t n = hw_.n;
  std::vector<const std::vector<uint8_t>*> fresh;
  std::vector<std::string> keys;
  fresh.reserve(pats.size());
  for (const auto& p : pats) {
    std::string key = pack_pattern(p.data(), n);
    if (cache_.count(key)) continue;
    // reserve the slot now so duplicates within `pats` are solved once
    auto [it, inserted] = cache_.emplace(std::move(key), std::vector<int64_t>());
    if (!inserted) continue;
    fresh.push_back(&p);
    keys.push_back(it->first);
  }
  if (fresh.empty()) return;
  const int64_t per = static_cast<int64_t>(num_slices()) * n;
  std::vector<int64_t> results(static_cast<size_t>(per) * fresh.size());
  std::vector<SolveWorkspace> ws(static_cast<size_t>(par::max_threads()));
  std::vector<std::exception_ptr> errs(fresh.size());
  par::for_range(static_cast<int64_t>(fresh.size()), [&](int64_t k) {
    try {
      codes_for_pattern(fresh[static_cast<size_t>(k)]->data(), results.data() + k * per,
                        ws[static_cast<size_t>(par::thread_id())],
                        /*parallel_lines=*/false);
    } catch (...) {  // exceptions must not escape the parallel region
      errs[static_cast<size_t>(k)] = std::current_exception();
    }
  });
  for (const auto& e : errs) {
    if (e) {
      for (const auto& key : keys) cache_.erase(key);  // drop placeholders
      std::rethrow_exception(e);
    }
  }
  for (size_t k = 0; k < fresh.size(); ++k) {
    auto& slot = cache_[keys[k]];
    slot.assign(results.begin() + static_cast<int64_t>(k) * per,
                results.begin() + static_cast<int64_t>(k + 1) * per);
  }
  solves_ += static_cast<int64_t>(fresh.size());
}

void CrossbarBlock::mvm(const uint32_t* xq, int64_t* acc) {
  const int64_t n = hw_.n;
  const int cycles = hw_.fmt.num_cycles();
  const int ns = num_slices();
  const int sb = hw_.fmt.slice_bits;
  int64_t sum_x = 0;
  for (int64_t r = 0; r < rows_; ++r) sum_x += xq[r];
  std::vector<int64_t> out(static_cast<size_t>(cols_), 0);
  std::vector<uint8_t> pat(static_cast<size_t>(n), 0);
  std::vector<int64_t> scratch(static_cast<size_t>(ns) * n);
  for (int t = 0; t < cycles; ++t) {
    int64_t ones = 0;
    for (int64_t r = 0; r < rows_; ++r) {
      pat[static_cast<size_t>(r)] = static_cast<uint8_t>((xq[r] >> t) & 1u);
      ones += pat[static_cast<size_t>(r)];
    }
    if (ones == 0) continue;
    std::string key = pack_pattern(pat.data(), n);
    const int64_t* codes = cached_codes(key);
    if (!codes) {
      codes_for_pattern(pat.data(), scratch.data(), ws_, /*parallel_lines=*/true);
      auto& slot = cache_[key];
      slot.assign(scratch.begin(), scratch.end());
      codes = slot.data();
      ++solves_;
    }
    for (int s = 0; s < ns; ++s) {
      const int64_t w = int64_t{1} << (t + s * sb);
      const int64_t* row = codes + static_cast<int64_t>(s) * n;
      for (int64_t c = 0; c < cols_; ++c) out[static_cast<size_t>(c)] += w * row[c];
    }
  }
  const int64_t offset = hw_.fmt.weight_offset();
  for (int64_t c = 0; c < cols_; ++c) acc[c] = out[static_cast<size_t>(c)] - offset * sum_x;
}

}  // namespace xbarnas
