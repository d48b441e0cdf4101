#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "xbarnas/gemm.hpp"
#include "xbarnas/parallel.hpp"
#include "xbarnas/rng.hpp"
#include "xbarnas/tensor.hpp"
#include "xbarnas/xbar.hpp"
#include "xbarnas/xbar_layer.hpp"

using namespace xbarnas;

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

bool bytes_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void bench_gemm() {
  const int64_t m = 384, k = 384, n = 384;
  Rng rng(7);
  std::vector<double> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(k * n));
  for (double& v : a) v = rng.uniform(-1.0, 1.0);
  for (double& v : b) v = rng.uniform(-1.0, 1.0);
  std::vector<double> c_serial(static_cast<size_t>(m * n)), c_par(c_serial.size());

  double t0 = now_s();
  gemm(a.data(), b.data(), c_serial.data(), m, k, n, false);
  double t1 = now_s();
  gemm(a.data(), b.data(), c_par.data(), m, k, n, true);
  double t2 = now_s();

  double flops = 2.0 * static_cast<double>(m) * static_cast<double>(k) * static_cast<double>(n);
  std::printf("gemm %lldx%lldx%lld: serial %.1f ms (%.2f GF/s), parallel %.1f ms (%.2f GF/s), "
              "bit-equal %s\n",
              static_cast<long long>(m), static_cast<long long>(k), static_cast<long long>(n),
              (t1 - t0) * 1e3, flops / (t1 - t0) * 1e-9, (t2 - t1) * 1e3,
              flops / (t2 - t1) * 1e-9, bytes_equal(c_serial, c_par) ? "yes" : "NO");
}

void bench_solver() {
  CrossbarConfig hw;
  hw.n = 128;
  hw.r_wire = 20.0;
  hw.r_source = 10.0;
  hw.r_sink = 10.0;
  hw.beta = 0.6;
  hw.validate();

  const int64_t n = hw.n;
  Rng rng(11);
  std::vector<double> g0(static_cast<size_t>(n * n));
  for (double& g : g0) g = hw.g_min() + (hw.g_max() - hw.g_min()) * rng.uniform();
  const int patterns = 96;
  std::vector<std::vector<uint8_t>> pats(patterns, std::vector<uint8_t>(static_cast<size_t>(n)));
  for (auto& p : pats)
    for (uint8_t& bit : p) bit = rng.uniform() < 0.5 ? 1 : 0;

  CrossbarSolver solver(hw, g0);
  std::vector<std::vector<double>> serial_out(patterns,
                                              std::vector<double>(static_cast<size_t>(n)));
  SolveWorkspace ws;
  double t0 = now_s();
  for (int p = 0; p < patterns; ++p) solver.solve(pats[static_cast<size_t>(p)].data(),
                                                  serial_out[static_cast<size_t>(p)].data(), ws);
  double t1 = now_s();

  std::vector<std::vector<double>> par_out(patterns, std::vector<double>(static_cast<size_t>(n)));
  std::vector<SolveWorkspace> wss(static_cast<size_t>(par::max_threads()));
  double t2 = now_s();
  par::for_range(patterns, [&](int64_t p) {
    solver.solve(pats[static_cast<size_t>(p)].data(), par_out[static_cast<size_t>(p)].data(),
                 wss[static_cast<size_t>(par::thread_id())]);
  });
  double t3 = now_s();

  bool equal = true;
  for (int p = 0; p < patterns; ++p)
    equal = equal && bytes_equal(serial_out[static_cast<size_t>(p)],
                                 par_out[static_cast<size_t>(p)]);
  std::printf("solver N=%lld beta=%.2g, %d patterns: serial %.1f ms (%.0f/s), parallel %.1f ms "
              "(%.0f/s), bit-equal %s\n",
              static_cast<long long>(n), hw.beta, patterns, (t1 - t0) * 1e3,
              patterns / (t1 - t0), (t3 - t2) * 1e3, patterns / (t3 - t2),
              equal ? "yes" : "NO");
}

void bench_layer() {
  CrossbarConfig hw;
  hw.n = 32;
  hw.r_wire = 20.0;
  hw.r_source = 10.0;
  hw.r_sink = 10.0;
  hw.beta = 0.6;
  hw.fmt.weight_bits = 6;
  hw.fmt.activation_bits = 6;
  hw.validate();

  ConvGeom g = ConvGeom::same_pad(3, 8, 8, 1, 16, 16);
  Rng rng(3);
  Tensor w({8, 8, 3, 3});
  for (double& v : w.data) v = rng.uniform(-0.5, 0.5);
  ProgrammedLayer pl = ProgrammedLayer::conv(hw, g, w, std::vector<double>(8, 0.0));
  Tensor x({4, 8, 16, 16});
  for (double& v : x.data) v = rng.uniform() < 0.4 ? 0.0 : rng.uniform();

  LayerStats stats;
  double t0 = now_s();
  Tensor y = pl.forward(x, &stats);
  double t1 = now_s();
  Tensor yr = pl.forward_reference(x);
  double t2 = now_s();
  (void)y;
  (void)yr;
  std::printf("programmed conv 8->8 k3 16x16 batch 4 at N=%lld: non-ideal %.1f ms "
              "(%lld solves, %lld cached), integer reference %.1f ms\n",
              static_cast<long long>(hw.n), (t1 - t0) * 1e3,
              static_cast<long long>(stats.solves), static_cast<long long>(stats.cached),
              (t2 - t1) * 1e3);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", par::max_threads());
  bench_gemm();
  bench_solver();
  bench_layer();
  return 0;
}
