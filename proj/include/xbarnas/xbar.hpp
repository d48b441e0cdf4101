#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "xbarnas/config.hpp"
#include "xbarnas/quantize.hpp"

namespace xbarnas {

// Electrical and format description of one crossbar design point. The zero
// defaults describe an ideal array; shipped config files carry the calibrated
// parasitics.
struct CrossbarConfig {
  int64_t n = 64;          // array is n x n
  double r_on = 100e3;     // device on-resistance, ohms
  double r_off = 600e3;    // device off-resistance, ohms
  double v_supply = 0.25;  // row drive voltage, volts
  double r_wire = 0.0;     // per-segment wire resistance, ohms
  double r_source = 0.0;   // row driver output resistance, ohms
  double r_sink = 0.0;     // column sink resistance, ohms
  double beta = 0.0;       // conductance bias sensitivity, 1/volt
  FixedPointFormat fmt;
  double solver_tol = 1e-9;     // max KCL residual, amperes
  int solver_max_iters = 2000;  // Gauss-Seidel sweep budget
  int64_t tile_size = 64;       // output positions evaluated per batch of work

  double g_min() const { return 1.0 / r_off; }
  double g_max() const { return 1.0 / r_on; }
  // True when the analytic shortcut applies (no parasitics, no bias effect).
  bool fully_ideal() const {
    return r_wire == 0.0 && r_source == 0.0 && r_sink == 0.0 && beta == 0.0;
  }

  static CrossbarConfig from_config(const KeyValueConfig& cfg);
  static CrossbarConfig from_file(const std::string& path);
  CrossbarConfig with_n(int64_t n_new) const;
  void validate() const;
};

// Column ADC derived from the array size: full scale covers the largest
// single-cycle column sum slice_max * n.
struct AdcSpec {
  int bits = 0;
  int64_t max_code = 0;
  double lsb = 0.0;  // amperes per code

  static AdcSpec for_hw(const CrossbarConfig& hw);
  // Digitizes a column current after analog removal of the popcount * g_min
  // baseline shared by every programmed cell.
  int64_t quantize(double current, int64_t popcount, const CrossbarConfig& hw) const;
};

struct SolverReport {
  int outer_iters = 0;  // conductance linearizations (1 when beta == 0)
  int sweeps = 0;       // total Gauss-Seidel sweeps across all linearizations
  double residual = 0.0;
  bool converged = false;
};

// Scratch buffers reused across solves; one per thread when solving patterns
// in parallel.
struct SolveWorkspace {
  std::vector<double> r, c;            // node voltages, n x n each
  std::vector<double> g;               // effective conductances
  std::vector<double> row_m, row_cp;   // Thomas factors, row lines
  std::vector<double> col_m, col_cp;   // Thomas factors, column lines
  std::vector<double> rhs;
};

// Nodal solver for one programmed n x n conductance pattern. The circuit per
// cell (i, j): the row driver (x_i ? v_supply : 0) reaches row node (i, 0)
// through r_source + r_wire; row nodes chain through r_wire; the device
// bridges row node (i, j) to column node (i, j); column nodes chain through
// r_wire and column node (n-1, j) drains through r_wire + r_sink. Device
// conductance follows g0 * (1 + beta * (|dv| - v_supply / 2)) clamped to
// [g_min, g_max]. Solved by alternating exact tridiagonal row-line and
// column-line solves; with beta != 0 an outer fixed point relaxes the
// conductances. Deterministic for any thread count: lines write disjoint
// node ranges.
class CrossbarSolver {
 public:
  // g0: n x n zero-bias conductances, row-major, already inside
  // [g_min, g_max]. Zero parasitics are floored to 1e-3 ohms unless the
  // configuration is fully ideal.
  CrossbarSolver(const CrossbarConfig& hw, std::vector<double> g0);

  // x: n drive bits. i_out: n column sink currents (amperes). Thread safe;
  // pass a per-thread workspace. voltages, when requested, holds the n x n
  // row-node grid followed by the n x n column-node grid.
  void solve(const uint8_t* x, double* i_out, SolveWorkspace& ws, SolverReport* rep = nullptr,
             std::vector<double>* voltages = nullptr, bool parallel_lines = false) const;

  const CrossbarConfig& hw() const { return hw_; }
  const std::vector<double>& g0() const { return g0_; }

 private:
  void factor_lines(const std::vector<double>& g, SolveWorkspace& ws, bool parallel) const;
  double kcl_residual(const uint8_t* x, const std::vector<double>& g,
                      const SolveWorkspace& ws) const;

  CrossbarConfig hw_;
  std::vector<double> g0_;
  double g_src_ = 0.0;   // 1 / (r_source + r_wire)
  double g_wire_ = 0.0;  // 1 / r_wire
  double g_sink_ = 0.0;  // 1 / (r_sink + r_wire)
};

// One weight block programmed onto a stack of slice arrays: slice s of cell
// (r, c) stores bits [s * slice_bits, (s+1) * slice_bits) of the offset-binary
// code wq[r * cols + c] + 2^(wb-1) as a conductance level
// g_min + level / slice_max * (g_max - g_min). Unused cells rest at g_min.
class CrossbarBlock {
 public:
  CrossbarBlock(const CrossbarConfig& hw, const int32_t* wq, int64_t rows, int64_t cols);

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }
  int num_slices() const { return hw_.fmt.num_slices(); }
  const CrossbarConfig& hw() const { return hw_; }
  const AdcSpec& adc() const { return adc_; }
  const CrossbarSolver& slice(int s) const { return slices_[static_cast<size_t>(s)]; }

  // ADC codes for one drive pattern, every slice: codes[s * n + c]. Not
  // memoized; thread safe.
  void codes_for_pattern(const uint8_t* x, int64_t* codes, SolveWorkspace& ws,
                         bool parallel_lines = false) const;

  // Bit-serial MVM through the analog path: acc[c] = recovered
  // sum_r wq[r, c] * xq[r]. Exact in the fully ideal case. Memoizes ADC codes
  // per drive pattern for the lifetime of the block (weights are fixed).
  void mvm(const uint32_t* xq, int64_t* acc);

  // Batched cache fill: solves every pattern in `pats` (each n bytes) that is
  // not yet cached, in parallel across patterns. Serves mvm() lookups.
  void ensure_patterns(const std::vector<std::vector<uint8_t>>& pats);

  // Cached codes for a packed pattern key, or nullptr. Keys come from
  // pack_pattern.
  const int64_t* cached_codes(const std::string& key) const;

  static std::string pack_pattern(const uint8_t* x, int64_t n);

  size_t cache_size() const { return cache_.size(); }
  int64_t solves() const { return solves_; }  // patterns actually solved

 private:
  CrossbarConfig hw_;
  AdcSpec adc_;
  int64_t rows_ = 0, cols_ = 0;
  std::vector<CrossbarSolver> slices_;
  std::unordered_map<std::string, std::vector<int64_t>> cache_;
  SolveWorkspace ws_;  // for the serial mvm path
  int64_t solves_ = 0;
};

}  // namespace xbarnas
