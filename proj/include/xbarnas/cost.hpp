#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "xbarnas/config.hpp"
#include "xbarnas/mapper.hpp"
#include "xbarnas/net.hpp"
#include "xbarnas/xbar.hpp"

namespace xbarnas {

// Component-level energy/latency/area constants. ADC cost scales like a
// successive-approximation converter (energy 2^b, time b); crossbar cost has
// a fixed peripheral part plus a per-cell part.
struct ComponentCosts {
  double e_xbar_fix = 1.75e-8;  // J per crossbar read, peripheral share
  double e_xbar_cell = 2e-13;   // J per cell per read
  double e_adc0 = 3e-12;        // J per conversion at 1 bit of range
  double e_dac = 5e-13;         // J per row drive
  double e_sna = 1e-11;         // J per shift-and-add
  double e_mem_bit = 5e-13;     // J per shared-memory bit moved
  double t_xbar = 5e-6;         // s per crossbar read
  double t_adc0 = 1e-10;        // s per conversion per bit
  double t_sna = 1e-8;          // s per shift-and-add
  double a_xbar_fix = 2e-4;     // mm2 per crossbar, peripheral share
  double a_xbar_cell = 1e-9;    // mm2 per cell
  double a_adc0 = 3e-5;         // mm2 per ADC per bit
  double a_dac = 1e-6;          // mm2 per row DAC
  double a_sna = 1e-4;          // mm2 per shift-and-add
  double a_core = 5e-2;         // mm2 per core overhead
  double a_tile = 5e-2;         // mm2 per tile overhead
  int64_t n_adc = 1;            // ADCs per crossbar
  HierarchyConfig hier;

  double e_xbar(int64_t n) const { return e_xbar_fix + e_xbar_cell * static_cast<double>(n * n); }
  double e_adc(int bits) const { return e_adc0 * static_cast<double>(int64_t{1} << bits); }
  double t_adc(int bits) const { return t_adc0 * bits; }
  double a_xbar(int64_t n) const { return a_xbar_fix + a_xbar_cell * static_cast<double>(n * n); }
  double a_adc(int bits) const { return a_adc0 * bits; }

  static ComponentCosts from_config(const KeyValueConfig& cfg);
  static ComponentCosts from_file(const std::string& path);
  void validate() const;
};

// Per-layer cost of running one inference through the mapped layer.
struct CostEntry {
  double energy_j = 0.0;
  double delay_s = 0.0;
  double area_mm2 = 0.0;
  double latency_area = 0.0;  // delay * area, s*mm2
};

// Crossbar sizes the cost model is calibrated for.
bool cost_size_supported(int64_t n);

CostEntry op_cost(const MappedLayer& m, const CrossbarConfig& hw, const ComponentCosts& costs);

struct NetworkTotals {
  double energy_mj = 0.0;
  double latency_smm2 = 0.0;
  double area_mm2 = 0.0;
  double edap = 0.0;  // mJ*ms*mm^2: energy_mj * latency_smm2 * 1e3
};

NetworkTotals network_totals(const std::vector<CostEntry>& entries);

// Candidate operations per searchable edge; the zero op joins automatically
// on shape-preserving edges.
struct CandidateSpace {
  std::vector<int64_t> kernels = {3, 5, 7};
  std::vector<int64_t> sizes = {16, 32, 64, 128};
};

// Hardware-efficiency lookup: (edge_id, kernel, crossbar size) -> CostEntry,
// with (edge, 0, 0) the zero op.
class CostLut {
 public:
  using Key = std::tuple<int, int64_t, int64_t>;

  void put(int edge, int64_t k, int64_t n, const CostEntry& e);
  const CostEntry& at(int edge, int64_t k, int64_t n) const;  // throws when missing
  bool has(int edge, int64_t k, int64_t n) const;
  size_t size() const { return entries_.size(); }
  const std::map<Key, CostEntry>& entries() const { return entries_; }

  void save(const std::string& path) const;
  static CostLut load(const std::string& path);

  static CostLut build(const Elaborated& net, const CandidateSpace& space,
                       const CrossbarConfig& hw, const ComponentCosts& costs);

 private:
  std::map<Key, CostEntry> entries_;
};

// Cost entries for every mapped prim of a fixed network, in network order.
// Prims with n == 0 fall back to hw.n.
std::vector<CostEntry> network_entries(const Elaborated& net, const CrossbarConfig& hw,
                                       const ComponentCosts& costs);

}  // namespace xbarnas
