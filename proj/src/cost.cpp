#include "xbarnas/cost.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "xbarnas/errors.hpp"

namespace xbarnas {

ComponentCosts ComponentCosts::from_config(const KeyValueConfig& cfg) {
  ComponentCosts c;
  c.e_xbar_fix = cfg.get_double("e_xbar_fix", c.e_xbar_fix);
  c.e_xbar_cell = cfg.get_double("e_xbar_cell", c.e_xbar_cell);
  c.e_adc0 = cfg.get_double("e_adc0", c.e_adc0);
  c.e_dac = cfg.get_double("e_dac", c.e_dac);
  c.e_sna = cfg.get_double("e_sna", c.e_sna);
  c.e_mem_bit = cfg.get_double("e_mem_bit", c.e_mem_bit);
  c.t_xbar = cfg.get_double("t_xbar", c.t_xbar);
  c.t_adc0 = cfg.get_double("t_adc0", c.t_adc0);
  c.t_sna = cfg.get_double("t_sna", c.t_sna);
  c.a_xbar_fix = cfg.get_double("a_xbar_fix", c.a_xbar_fix);
  c.a_xbar_cell = cfg.get_double("a_xbar_cell", c.a_xbar_cell);
  c.a_adc0 = cfg.get_double("a_adc0", c.a_adc0);
  c.a_dac = cfg.get_double("a_dac", c.a_dac);
  c.a_sna = cfg.get_double("a_sna", c.a_sna);
  c.a_core = cfg.get_double("a_core", c.a_core);
  c.a_tile = cfg.get_double("a_tile", c.a_tile);
  c.n_adc = cfg.get_int("n_adc", c.n_adc);
  c.hier.mvmus_per_core = cfg.get_int("mvmus_per_core", c.hier.mvmus_per_core);
  c.hier.cores_per_tile = cfg.get_int("cores_per_tile", c.hier.cores_per_tile);
  c.validate();
  return c;
}

ComponentCosts ComponentCosts::from_file(const std::string& path) {
  return from_config(KeyValueConfig::from_file(path));
}

void ComponentCosts::validate() const {
  const double vals[] = {e_xbar_fix, e_dac, e_sna, e_mem_bit, t_xbar, t_adc0, t_sna,
                         a_xbar_fix, a_dac, a_sna, a_core, a_tile};
  for (double v : vals)
    if (v < 0.0) throw ConfigError("component costs must be non-negative");
  if (e_xbar_cell <= 0.0 || e_adc0 <= 0.0 || a_xbar_cell <= 0.0 || a_adc0 <= 0.0)
    throw ConfigError("per-cell and per-bit cost slopes must be positive");
  if (n_adc < 1) throw ConfigError("n_adc must be at least 1");
  if (hier.mvmus_per_core < 1 || hier.cores_per_tile < 1)
    throw ConfigError("hierarchy sizes must be at least 1");
}

bool cost_size_supported(int64_t n) { return n == 16 || n == 32 || n == 64 || n == 128; }

CostEntry op_cost(const MappedLayer& m, const CrossbarConfig& hw, const ComponentCosts& costs) {
  if (!cost_size_supported(m.n))
    throw ConfigError("cost model supports crossbar sizes {16, 32, 64, 128}, got " +
                      std::to_string(m.n));
  const CrossbarConfig sized = hw.with_n(m.n);
  const AdcSpec adc = AdcSpec::for_hw(sized);
  const int slices = hw.fmt.num_slices();
  const int cycles = hw.fmt.num_cycles();
  const double n = static_cast<double>(m.n);
  const double vectors = static_cast<double>(m.vectors_per_inference);
  const double mvmus = static_cast<double>(m.mvmu_count);

  const double e_vec =
      slices * (costs.e_xbar(m.n) + n * costs.e_dac + n * costs.e_adc(adc.bits)) + costs.e_sna;
  const int64_t conversions = (m.n + costs.n_adc - 1) / costs.n_adc;
  const double t_vec =
      costs.t_xbar + static_cast<double>(conversions) * costs.t_adc(adc.bits) + costs.t_sna;

  CostEntry e;
  e.energy_j = vectors * cycles * mvmus * e_vec +
               static_cast<double>(m.rows_needed + m.cols_needed) * hw.fmt.activation_bits *
                   costs.e_mem_bit * vectors;
  e.delay_s = vectors * cycles * t_vec;
  const double a_mvmu = slices * (costs.a_xbar(m.n) + costs.n_adc * costs.a_adc(adc.bits)) +
                        n * costs.a_dac + costs.a_sna;
  const double tile_area = static_cast<double>(costs.hier.capacity()) * a_mvmu +
                           static_cast<double>(costs.hier.cores_per_tile) * costs.a_core +
                           costs.a_tile;
  const TileAllocation alloc = allocate_tiles({m}, costs.hier);
  e.area_mm2 = static_cast<double>(alloc.total_tiles) * tile_area;
  e.latency_area = e.delay_s * e.area_mm2;
  return e;
}

NetworkTotals network_totals(const std::vector<CostEntry>& entries) {
  NetworkTotals t;
  for (const CostEntry& e : entries) {
    t.energy_mj += e.energy_j * 1e3;
    t.latency_smm2 += e.latency_area;
    t.area_mm2 += e.area_mm2;
  }
  t.edap = t.energy_mj * t.latency_smm2 * 1e3;  // mJ * (s -> ms) * mm^2
  return t;
}

void CostLut::put(int edge, int64_t k, int64_t n, const CostEntry& e) {
  entries_[Key{edge, k, n}] = e;
}

bool CostLut::has(int edge, int64_t k, int64_t n) const {
  return entries_.count(Key{edge, k, n}) > 0;
}

const CostEntry& CostLut::at(int edge, int64_t k, int64_t n) const {
  auto it = entries_.find(Key{edge, k, n});
  if (it == entries_.end())
    throw MissingArtifactError("no cost entry for edge " + std::to_string(edge) + ", kernel " +
                               std::to_string(k) + ", size " + std::to_string(n));
  return it->second;
}

void CostLut::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw MissingArtifactError("cannot write " + tmp);
    f << "edge_id,K,N,energy_J,delay_s,area_mm2,latency_area\n";
    char buf[512];
    for (const auto& [key, e] : entries_) {
      std::snprintf(buf, sizeof(buf), "%d,%" PRId64 ",%" PRId64 ",%.17g,%.17g,%.17g,%.17g\n",
                    std::get<0>(key), std::get<1>(key), std::get<2>(key), e.energy_j, e.delay_s,
                    e.area_mm2, e.latency_area);
      f << buf;
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw MissingArtifactError("cannot rename " + tmp + " to " + path);
}

CostLut CostLut::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("cannot open cost table " + path);
  CostLut lut;
  std::string line;
  if (!std::getline(f, line) || line.rfind("edge_id,", 0) != 0)
    throw ConfigError(path + ": not a cost table (bad header)");
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    int edge = 0;
    long long k = 0, n = 0;
    CostEntry e;
    if (std::sscanf(line.c_str(), "%d,%lld,%lld,%lg,%lg,%lg,%lg", &edge, &k, &n, &e.energy_j,
                    &e.delay_s, &e.area_mm2, &e.latency_area) != 7)
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": malformed cost row");
    lut.put(edge, k, n, e);
  }
  return lut;
}

CostLut CostLut::build(const Elaborated& net, const CandidateSpace& space,
                       const CrossbarConfig& hw, const ComponentCosts& costs) {
  CostLut lut;
  for (int pi : net.searchable_prims()) {
    const Prim& p = net.prims[static_cast<size_t>(pi)];
    for (int64_t k : space.kernels) {
      for (int64_t n : space.sizes) {
        MappedLayer m = map_matrix(k * k * p.in_c, p.out_c, n, p.h_out * p.w_out);
        lut.put(p.edge_id, k, n, op_cost(m, hw, costs));
      }
    }
    if (p.zero_eligible()) lut.put(p.edge_id, 0, 0, CostEntry{});
  }
  return lut;
}

std::vector<CostEntry> network_entries(const Elaborated& net, const CrossbarConfig& hw,
                                       const ComponentCosts& costs) {
  std::vector<CostEntry> out;
  for (int pi : net.mapped_prims()) {
    const Prim& p = net.prims[static_cast<size_t>(pi)];
    int64_t n = p.n > 0 ? p.n : hw.n;
    out.push_back(op_cost(map_layer(p, n), hw, costs));
  }
  return out;
}

}  // namespace xbarnas
