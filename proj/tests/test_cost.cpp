// Component cost model: per-layer energy/delay/area against hand-computed
// values, scaling laws, the published orderings, network totals, and the
// cost lookup table lifecycle.

#include <cstdint>
#include <string>
#include <vector>

#include "testing.hpp"
#include "xbarnas/cost.hpp"
#include "xbarnas/errors.hpp"
#include "xbarnas/mapper.hpp"
#include "xbarnas/net.hpp"
#include "xbarnas/xbar.hpp"

using namespace xbarnas;

namespace {

CrossbarConfig hw_with_fmt(int wb, int ab) {
  CrossbarConfig hw;
  hw.fmt.weight_bits = wb;
  hw.fmt.activation_bits = ab;
  return hw;
}

}  // namespace

TEST_CASE(op_cost_hand_computed_values) {
  ComponentCosts costs;
  // 3x3 conv 16 -> 16 on 32-arrays, 256 output positions, 16/16 format:
  // 5 MVMUs, 7-bit ADC, 8 slices, 16 stream cycles.
  CostEntry a = op_cost(map_matrix(144, 16, 32, 256), hw_with_fmt(16, 16), costs);
  CHECK_MSG(testing::rel_err(a.energy_j, 0.0049171742720000014) < 1e-12,
            "energy " + testing::show(a.energy_j));
  CHECK_MSG(testing::rel_err(a.delay_s, 0.020612710400000001) < 1e-12,
            "delay " + testing::show(a.delay_s));
  CHECK_MSG(testing::rel_err(a.area_mm2, 0.50472307199999999) < 1e-12,
            "area " + testing::show(a.area_mm2));
  CHECK_MSG(testing::rel_err(a.latency_area, 0.01040371051533435) < 1e-12,
            "latency_area " + testing::show(a.latency_area));

  // Classifier 64 -> 10 on one 64-array, 6-bit weights / 4-bit activations:
  // 3 slices, 4 cycles, 8-bit ADC.
  CostEntry b = op_cost(map_matrix(64, 10, 64, 1), hw_with_fmt(6, 4), costs);
  CHECK_MSG(testing::rel_err(b.energy_j, 8.1022640000000004e-07) < 1e-12,
            "energy " + testing::show(b.energy_j));
  CHECK_MSG(testing::rel_err(b.delay_s, 2.02448e-05) < 1e-12, "delay " + testing::show(b.delay_s));
  CHECK_MSG(testing::rel_err(b.area_mm2, 0.47394060799999999) < 1e-12,
            "area " + testing::show(b.area_mm2));
  CHECK_MSG(testing::rel_err(b.latency_area, 9.5948328208384001e-06) < 1e-12,
            "latency_area " + testing::show(b.latency_area));
}

TEST_CASE(op_cost_scaling_laws) {
  ComponentCosts costs;
  CrossbarConfig hw = hw_with_fmt(16, 16);

  // Twice the output positions: energy and delay double, area is static.
  CostEntry v1 = op_cost(map_matrix(144, 16, 32, 256), hw, costs);
  CostEntry v2 = op_cost(map_matrix(144, 16, 32, 512), hw, costs);
  CHECK_MSG(testing::rel_err(v2.energy_j, 2.0 * v1.energy_j) < 1e-15, "energy not linear");
  CHECK_MSG(testing::rel_err(v2.delay_s, 2.0 * v1.delay_s) < 1e-15, "delay not linear");
  CHECK(v2.area_mm2 == v1.area_mm2);

  // Scaling every energy constant by c scales energy by c and nothing else.
  ComponentCosts ec = costs;
  const double c = 3.0;
  ec.e_xbar_fix *= c;
  ec.e_xbar_cell *= c;
  ec.e_adc0 *= c;
  ec.e_dac *= c;
  ec.e_sna *= c;
  ec.e_mem_bit *= c;
  CostEntry se = op_cost(map_matrix(144, 16, 32, 256), hw, ec);
  CHECK_MSG(testing::rel_err(se.energy_j, c * v1.energy_j) < 1e-15, "energy scale");
  CHECK(se.delay_s == v1.delay_s);
  CHECK(se.area_mm2 == v1.area_mm2);

  // Same for time and area constants.
  ComponentCosts tc = costs;
  tc.t_xbar *= c;
  tc.t_adc0 *= c;
  tc.t_sna *= c;
  CostEntry st = op_cost(map_matrix(144, 16, 32, 256), hw, tc);
  CHECK_MSG(testing::rel_err(st.delay_s, c * v1.delay_s) < 1e-15, "delay scale");
  CHECK(st.energy_j == v1.energy_j);

  ComponentCosts ac = costs;
  ac.a_xbar_fix *= c;
  ac.a_xbar_cell *= c;
  ac.a_adc0 *= c;
  ac.a_dac *= c;
  ac.a_sna *= c;
  ac.a_core *= c;
  ac.a_tile *= c;
  CostEntry sa = op_cost(map_matrix(144, 16, 32, 256), hw, ac);
  CHECK_MSG(testing::rel_err(sa.area_mm2, c * v1.area_mm2) < 1e-15, "area scale");
  CHECK(sa.energy_j == v1.energy_j);
  CHECK(sa.delay_s == v1.delay_s);
}

TEST_CASE(op_cost_supported_sizes_only) {
  CHECK(cost_size_supported(16));
  CHECK(cost_size_supported(32));
  CHECK(cost_size_supported(64));
  CHECK(cost_size_supported(128));
  CHECK(!cost_size_supported(48));
  CHECK(!cost_size_supported(8));
  CHECK(!cost_size_supported(256));
  ComponentCosts costs;
  CHECK_THROWS_WITH(ConfigError, op_cost(map_matrix(144, 16, 48, 1), hw_with_fmt(16, 16), costs),
                    "supports crossbar sizes");
}

TEST_CASE(component_costs_config_and_validation) {
  ComponentCosts shipped = ComponentCosts::from_file(std::string(XBARNAS_CONFIG_DIR) +
                                                     "/cost_default.cfg");
  CHECK(shipped.n_adc >= 1);
  CHECK(shipped.hier.capacity() == 16);
  shipped.validate();

  ComponentCosts bad;
  bad.e_adc0 = 0.0;
  CHECK_THROWS_WITH(ConfigError, bad.validate(), "slopes must be positive");
  ComponentCosts bad2;
  bad2.t_xbar = -1.0;
  CHECK_THROWS_WITH(ConfigError, bad2.validate(), "non-negative");
  ComponentCosts bad3;
  bad3.n_adc = 0;
  CHECK_THROWS_WITH(ConfigError, bad3.validate(), "n_adc");
}

TEST_CASE(single_op_energy_orderings) {
  ComponentCosts costs;
  CrossbarConfig hw = hw_with_fmt(16, 16);
  // 3x3, 16 -> 16 channels: the 32-array needs 5 small reads per vector, the
  // 128-array 2 much more expensive ones; small wins.
  double e32 = op_cost(map_matrix(144, 16, 32, 1024), hw, costs).energy_j;
  double e128 = op_cost(map_matrix(144, 16, 128, 1024), hw, costs).energy_j;
  CHECK_MSG(e32 < e128, testing::show(e32) + " !< " + testing::show(e128));

  // 3x3, 64 -> 64 channels: 16-arrays shatter the matrix into 144 pieces and
  // lose to 9 reads on 64-arrays despite the cheaper ADC.
  double e16 = op_cost(map_matrix(576, 64, 16, 1024), hw, costs).energy_j;
  double e64 = op_cost(map_matrix(576, 64, 64, 1024), hw, costs).energy_j;
  CHECK_MSG(e16 > e64, testing::show(e16) + " !> " + testing::show(e64));
}

TEST_CASE(resnet20_homogeneous_edap_ordering) {
  NetworkSpec spec = NetworkSpec::parse_file(std::string(XBARNAS_CONFIG_DIR) + "/resnet20.net");
  Elaborated net = elaborate(spec);
  ComponentCosts costs = ComponentCosts::from_file(std::string(XBARNAS_CONFIG_DIR) +
                                                   "/cost_default.cfg");
  CrossbarConfig hw = CrossbarConfig::from_file(std::string(XBARNAS_CONFIG_DIR) +
                                                "/hw_default.cfg");
  auto edap_at = [&](int64_t n) {
    CrossbarConfig sized = hw.with_n(n);
    return network_totals(network_entries(net, sized, costs)).edap;
  };
  double e16 = edap_at(16), e32 = edap_at(32), e64 = edap_at(64), e128 = edap_at(128);
  CHECK_MSG(e32 < e64, "32 vs 64: " + testing::show(e32) + " vs " + testing::show(e64));
  CHECK_MSG(e64 < e128, "64 vs 128: " + testing::show(e64) + " vs " + testing::show(e128));
  CHECK_MSG(e128 < e16, "128 vs 16: " + testing::show(e128) + " vs " + testing::show(e16));
}

TEST_CASE(network_totals_additivity) {
  CostEntry a;
  a.energy_j = 1e-3;
  a.latency_area = 0.1;
  a.area_mm2 = 2.0;
  // Two 1 mJ / 0.1 s*mm2 layers: 2 mJ, 0.2 s*mm2, EDAP 2 * 0.2 * 1e3 = 400.
  NetworkTotals t = network_totals({a, a});
  CHECK_NEAR(t.energy_mj, 2.0, 1e-15);
  CHECK_NEAR(t.latency_smm2, 0.2, 1e-16);
  CHECK_NEAR(t.area_mm2, 4.0, 1e-15);
  CHECK_NEAR(t.edap, 400.0, 1e-12);

  NetworkTotals zero = network_totals({});
  CHECK(zero.energy_mj == 0.0);
  CHECK(zero.latency_smm2 == 0.0);
  CHECK(zero.edap == 0.0);

  // Totals are plain sums over entries (EDAP itself is not additive).
  CostEntry b;
  b.energy_j = 2.5e-4;
  b.latency_area = 0.03;
  b.area_mm2 = 0.7;
  NetworkTotals ab = network_totals({a, b});
  NetworkTotals ta = network_totals({a});
  NetworkTotals tb = network_totals({b});
  CHECK(ab.energy_mj == ta.energy_mj + tb.energy_mj);
  CHECK(ab.latency_smm2 == ta.latency_smm2 + tb.latency_smm2);
  CHECK(ab.area_mm2 == ta.area_mm2 + tb.area_mm2);
}

TEST_CASE(cost_lut_build_counts_candidates) {
  // One zero-eligible edge (16 -> 16, stride 1) and one that must keep a conv
  // (16 -> 32, stride 2).
  NetworkSpec spec = NetworkSpec::parse_string(
      "input 3 32 32\n"
      "conv k=3 in=3 out=16 s=1 searchable=false\n"
      "block in=16 out=16 s=1 searchable=true\n"
      "block in=16 out=32 s=2 searchable=true\n"
      "linear in=32 out=10\n",
      "inline");
  Elaborated net = elaborate(spec);
  REQUIRE(net.num_edges == 4);  // two convs per block

  ComponentCosts costs;
  CrossbarConfig hw = hw_with_fmt(16, 16);
  CandidateSpace full;  // {3,5,7} x {16,32,64,128}
  CostLut lut = CostLut::build(net, full, hw, costs);
  // Block 1 edges are zero-eligible (13 = 12 + zero), block 2's first conv
  // changes shape (12), its second is shape-preserving (13).
  CHECK(lut.size() == 13 + 13 + 12 + 13);
  CHECK(lut.has(0, 0, 0));
  CHECK(lut.has(1, 0, 0));
  CHECK(!lut.has(2, 0, 0));
  CHECK(lut.has(3, 0, 0));
  CHECK(lut.has(0, 7, 128));

  CandidateSpace small;
  small.kernels = {3, 5};
  small.sizes = {64, 128};
  CostLut lut2 = CostLut::build(net, small, hw, costs);
  CHECK(lut2.size() == 5 + 5 + 4 + 5);

  // The zero op costs exactly nothing.
  const CostEntry& z = lut.at(0, 0, 0);
  CHECK(z.energy_j == 0.0);
  CHECK(z.delay_s == 0.0);
  CHECK(z.area_mm2 == 0.0);
  CHECK(z.latency_area == 0.0);

  // A real entry matches a direct op_cost call for the same geometry.
  const Prim& p = net.prims[static_cast<size_t>(net.searchable_prims()[0])];
  CostEntry direct = op_cost(map_matrix(5 * 5 * p.in_c, p.out_c, 64, p.h_out * p.w_out), hw, costs);
  const CostEntry& viaLut = lut.at(p.edge_id, 5, 64);
  CHECK(viaLut.energy_j == direct.energy_j);
  CHECK(viaLut.latency_area == direct.latency_area);
}

TEST_CASE(cost_lut_save_load_roundtrip) {
  CostLut lut;
  CostEntry e;
  e.energy_j = 1.2345678901234567e-5;
  e.delay_s = 3.3333333333333333e-7;
  e.area_mm2 = 0.1;
  e.latency_area = e.delay_s * e.area_mm2;
  lut.put(0, 3, 32, e);
  lut.put(0, 0, 0, CostEntry{});
  lut.put(2, 7, 128, e);

  std::string path = testing::temp_path("cost_lut.csv");
  lut.save(path);
  CostLut back = CostLut::load(path);
  REQUIRE(back.size() == lut.size());
  for (const auto& [key, want] : lut.entries()) {
    const CostEntry& got = back.at(std::get<0>(key), std::get<1>(key), std::get<2>(key));
    CHECK(got.energy_j == want.energy_j);  // %.17g rows reload bit-identically
    CHECK(got.delay_s == want.delay_s);
    CHECK(got.area_mm2 == want.area_mm2);
    CHECK(got.latency_area == want.latency_area);
  }

  CHECK_THROWS_WITH(MissingArtifactError, back.at(1, 3, 32), "no cost entry");
  CHECK_THROWS_WITH(MissingArtifactError, CostLut::load(testing::temp_path("absent_lut.csv")),
                    "cannot open");

  std::string junk = testing::temp_path("junk_lut.csv");
  testing::write_file(junk, "kernel,N\n");
  CHECK_THROWS_WITH(ConfigError, CostLut::load(junk), "bad header");
  testing::write_file(junk, "edge_id,K,N,energy_J,delay_s,area_mm2,latency_area\n0,3,oops\n");
  CHECK_THROWS_WITH(ConfigError, CostLut::load(junk), "line 2");
}

int main(int argc, char** argv) { return testing::run_all(argc, argv); }
