// Core numerics: rng, config parsing, tensors, gemm, im2col, the autodiff
// tape (worked examples + finite differences over every primitive), SGD,
// fixed-point quantization, and network spec parsing/elaboration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "testing.hpp"
#include "xbarnas/autodiff.hpp"
#include "xbarnas/config.hpp"
#include "xbarnas/dataio.hpp"
#include "xbarnas/errors.hpp"
#include "xbarnas/gemm.hpp"
#include "xbarnas/model.hpp"
#include "xbarnas/net.hpp"
#include "xbarnas/optim.hpp"
#include "xbarnas/quantize.hpp"
#include "xbarnas/rng.hpp"
#include "xbarnas/tensor.hpp"

using namespace xbarnas;

// ---------------------------------------------------------------- rng -----

TEST_CASE(rng_is_deterministic_per_seed) {
  Rng a(7), b(7), c(8);
  bool equal = true, differs = false;
  for (int i = 0; i < 1000; ++i) {
    double ua = a.uniform(), ub = b.uniform(), uc = c.uniform();
    if (ua != ub) equal = false;
    if (ua != uc) differs = true;
  }
  CHECK(equal);
  CHECK(differs);
}

TEST_CASE(rng_uniform_bounds_and_mean) {
  Rng rng(3);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    double u = rng.uniform();
    if (u < 0.0 || u >= 1.0) {
      CHECK_MSG(false, "uniform out of [0,1): " + testing::show(u));
      return;
    }
    sum += u;
  }
  CHECK_NEAR(sum / 20000.0, 0.5, 0.01);  // sigma ~ 0.002
}

TEST_CASE(rng_uniform_int_covers_range_evenly) {
  Rng rng(11);
  const uint64_t n = 7;
  std::vector<int> hits(n, 0);
  const int draws = 70000;
  for (int i = 0; i < draws; ++i) {
    uint64_t v = rng.uniform_int(n);
    REQUIRE(v < n);
    ++hits[static_cast<size_t>(v)];
  }
  for (uint64_t k = 0; k < n; ++k) {
    // Binomial sigma ~ sqrt(draws * p * (1-p)) ~ 92; allow 5 sigma.
    CHECK_NEAR(static_cast<double>(hits[static_cast<size_t>(k)]), draws / 7.0, 5 * 95.0);
  }
}

TEST_CASE(rng_normal_moments) {
  Rng rng(5);
  double s1 = 0.0, s2 = 0.0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    s1 += x;
    s2 += x * x;
  }
  CHECK_NEAR(s1 / n, 0.0, 0.03);
  CHECK_NEAR(s2 / n, 1.0, 0.05);
}

TEST_CASE(rng_shuffle_is_a_permutation) {
  Rng rng(9);
  std::vector<int64_t> v(100);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(v);
  std::vector<int64_t> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int64_t i = 0; i < 100; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
  // Same seed shuffles identically.
  std::vector<int64_t> w(100);
  std::iota(w.begin(), w.end(), 0);
  Rng rng2(9);
  rng2.shuffle(w);
  CHECK(v == w);
}

// ------------------------------------------------------------- config -----

TEST_CASE(config_parses_keys_comments_and_types) {
  KeyValueConfig cfg = KeyValueConfig::from_string(
      "# comment\n"
      "alpha = 1.5\n"
      "count = 42   # trailing comment\n"
      "\n"
      "flag = true\n"
      "name = hello\n"
      "list = 3,5, 7\n",
      "mem");
  CHECK_NEAR(cfg.get_double("alpha", 0.0), 1.5, 0.0);
  CHECK(cfg.get_int("count", 0) == 42);
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_string("name", "") == "hello");
  std::vector<int> lst = cfg.get_int_list("list", {});
  CHECK(lst == (std::vector<int>{3, 5, 7}));
  CHECK(cfg.get_double("absent", 2.5) == 2.5);
  CHECK(cfg.has("alpha"));
  CHECK(!cfg.has("absent"));
}

TEST_CASE(config_errors_carry_line_numbers) {
  CHECK_THROWS_WITH(ConfigError,
                    KeyValueConfig::from_string("a = 1\nb = 2\nbroken line\n", "mem"), "line 3");
  KeyValueConfig cfg = KeyValueConfig::from_string("a = 1\nb = oops\n", "mem");
  CHECK_THROWS_WITH(ConfigError, cfg.get_double("b", 0.0), "line 2");
  CHECK_THROWS_WITH(ConfigError, cfg.require_double("missing"), "missing");
}

// ------------------------------------------------------------- tensor -----

TEST_CASE(tensor_shapes_and_accessors) {
  Tensor t = Tensor::zeros({2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.ndim() == 4);
  t.at4(1, 2, 3, 4) = 7.0;
  CHECK(t[119] == 7.0);
  Tensor f = Tensor::full({3}, 2.5);
  CHECK(f[0] == 2.5 && f[2] == 2.5);
  Rng rng(1);
  Tensor r = Tensor::randn({4, 4}, rng, 0.5);
  CHECK(r.all_finite());
  CHECK(r.max_abs() > 0.0);
  CHECK(shape_numel({6, 7}) == 42);
}

// --------------------------------------------------------------- gemm -----

namespace {

std::vector<double> random_vec(int64_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal() * scale;
  return v;
}

void naive_gemm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
}

}  // namespace

TEST_CASE(gemm_matches_naive_and_serial_equals_parallel) {
  Rng rng(21);
  for (auto [m, k, n] : {std::tuple<int64_t, int64_t, int64_t>{7, 5, 9},
                         {1, 1, 1},
                         {16, 32, 8},
                         {3, 17, 2}}) {
    std::vector<double> a = random_vec(m * k, rng), b = random_vec(k * n, rng);
    std::vector<double> want(static_cast<size_t>(m * n)), par(want.size()), ser(want.size());
    naive_gemm(a.data(), b.data(), want.data(), m, k, n);
    gemm(a.data(), b.data(), par.data(), m, k, n, true);
    gemm(a.data(), b.data(), ser.data(), m, k, n, false);
    CHECK(par == ser);  // bit-identical by contract
    double worst = 0.0;
    for (size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::fabs(par[i] - want[i]));
    CHECK_MSG(worst == 0.0, "gemm deviates from the naive oracle by " + testing::show(worst));
  }
}

TEST_CASE(gemm_variants_match_naive) {
  Rng rng(22);
  const int64_t m = 6, k = 11, n = 4;
  std::vector<double> a = random_vec(m * k, rng), b = random_vec(k * n, rng);
  std::vector<double> want(static_cast<size_t>(m * n));
  naive_gemm(a.data(), b.data(), want.data(), m, k, n);

  // gemm_acc: C += alpha * A * B
  std::vector<double> c0 = random_vec(m * n, rng);
  std::vector<double> acc = c0;
  gemm_acc(a.data(), b.data(), acc.data(), m, k, n, 0.5);
  std::vector<double> scaled(static_cast<size_t>(m * n));
  std::vector<double> ah(a);
  for (double& x : ah) x *= 0.5;
  naive_gemm(ah.data(), b.data(), scaled.data(), m, k, n);
  for (size_t i = 0; i < acc.size(); ++i) CHECK_NEAR(acc[i], c0[i] + scaled[i], 1e-12);

  // gemm_at: A stored [k x m]
  std::vector<double> at(static_cast<size_t>(k * m));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) at[static_cast<size_t>(p * m + i)] = a[static_cast<size_t>(i * k + p)];
  std::vector<double> cat(static_cast<size_t>(m * n));
  gemm_at(at.data(), b.data(), cat.data(), m, k, n);
  for (size_t i = 0; i < cat.size(); ++i) CHECK_NEAR(cat[i], want[i], 1e-12);

  // gemm_bt / gemm_bt_acc: B stored [n x k]
  std::vector<double> bt(static_cast<size_t>(n * k));
  for (int64_t p = 0; p < k; ++p)
    for (int64_t j = 0; j < n; ++j) bt[static_cast<size_t>(j * k + p)] = b[static_cast<size_t>(p * n + j)];
  std::vector<double> cbt(static_cast<size_t>(m * n));
  gemm_bt(a.data(), bt.data(), cbt.data(), m, k, n);
  for (size_t i = 0; i < cbt.size(); ++i) CHECK_NEAR(cbt[i], want[i], 1e-12);
  std::vector<double> cbta = c0;
  gemm_bt_acc(a.data(), bt.data(), cbta.data(), m, k, n);
  for (size_t i = 0; i < cbta.size(); ++i) CHECK_NEAR(cbta[i], c0[i] + want[i], 1e-12);
}

// ------------------------------------------------------------- im2col -----

TEST_CASE(im2col_col2im_are_adjoint) {
  Rng rng(31);
  ConvGeom g = ConvGeom::same_pad(3, 2, 4, 2, 7, 5);
  std::vector<double> x = random_vec(g.in_c * g.h_in * g.w_in, rng);
  std::vector<double> cols(static_cast<size_t>(g.rows() * g.patches()));
  im2col(x.data(), g, cols.data());

  std::vector<double> cvec = random_vec(g.rows() * g.patches(), rng);
  std::vector<double> back(x.size());
  col2im(cvec.data(), g, back.data());

  // <cvec, im2col(x)> == <col2im(cvec), x> for the adjoint pair.
  double lhs = 0.0, rhs = 0.0;
  for (size_t i = 0; i < cvec.size(); ++i) lhs += cvec[i] * cols[i];
  for (size_t i = 0; i < x.size(); ++i) rhs += back[i] * x[i];
  CHECK_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::fabs(lhs)));
}

TEST_CASE(im2col_k1_is_reshape) {
  Rng rng(32);
  ConvGeom g = ConvGeom::same_pad(1, 3, 5, 1, 4, 4);
  std::vector<double> x = random_vec(g.in_c * g.h_in * g.w_in, rng);
  std::vector<double> cols(static_cast<size_t>(g.rows() * g.patches()));
  im2col(x.data(), g, cols.data());
  CHECK(cols == x);  // rows = channels, one column per pixel, same layout
}

// ----------------------------------------------- autodiff: examples -------

namespace {

Tensor randn_t(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev);
}

// Direct (non-im2col) convolution oracle: same padding, [B,I,H,W] x
// [O,I,K,K] -> [B,O,Ho,Wo].
Tensor naive_conv(const Tensor& x, const Tensor& w, int64_t stride) {
  int64_t bsz = x.dim(0), in_c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t out_c = w.dim(0), k = w.dim(2);
  int64_t pad = (k - 1) / 2;
  int64_t ho = (h + 2 * pad - k) / stride + 1;
  int64_t wo = (wd + 2 * pad - k) / stride + 1;
  Tensor y = Tensor::zeros({bsz, out_c, ho, wo});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t o = 0; o < out_c; ++o)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double s = 0.0;
          for (int64_t c = 0; c < in_c; ++c)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                int64_t iy = oy * stride + ky - pad;
                int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                s += x.at4(b, c, iy, ix) * w.at4(o, c, ky, kx);
              }
          y.at4(b, o, oy, ox) = s;
        }
  return y;
}

}  // namespace

TEST_CASE(conv_identity_kernel_passes_input_through) {
  Rng rng(41);
  Tensor x = randn_t({2, 2, 5, 5}, rng);
  Tensor w = Tensor::zeros({2, 2, 1, 1});
  w.at4(0, 0, 0, 0) = 1.0;
  w.at4(1, 1, 0, 0) = 1.0;
  Tape tape;
  int xi = tape.leaf(x);
  int wi = tape.constant(w);
  int y = tape.conv2d(xi, wi, ConvGeom::same_pad(1, 2, 2, 1, 5, 5));
  const Tensor& out = tape.value(y);
  REQUIRE(out.numel() == x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(out[i] == x[i]);
}

TEST_CASE(all_zero_weights_give_uniform_softmax_ce) {
  Rng rng(42);
  Tensor x = randn_t({3, 2, 4, 4}, rng);
  Tensor w = Tensor::zeros({5, 2, 3, 3});
  Tensor wl = Tensor::zeros({7, 5});
  Tape tape;
  int xi = tape.constant(x);
  int c = tape.conv2d(xi, tape.constant(w), ConvGeom::same_pad(3, 2, 5, 1, 4, 4));
  int p = tape.avgpool(c);
  int logits = tape.linear(p, tape.constant(wl), -1);
  const Tensor& lv = tape.value(logits);
  for (int64_t i = 0; i < lv.numel(); ++i) CHECK(lv[i] == 0.0);
  int ce = tape.softmax_ce(logits, {0, 3, 6});
  CHECK_NEAR(tape.value(ce)[0], std::log(7.0), 1e-12);
}

TEST_CASE(two_layer_net_matches_direct_convolution_oracle) {
  Rng rng(43);
  Tensor x = randn_t({4, 3, 8, 8}, rng);
  Tensor w1 = randn_t({6, 3, 3, 3}, rng, 0.4);
  Tensor w2 = randn_t({5, 6, 5, 5}, rng, 0.2);

  Tape tape;
  int xi = tape.constant(x);
  int c1 = tape.conv2d(xi, tape.constant(w1), ConvGeom::same_pad(3, 3, 6, 1, 8, 8));
  int r1 = tape.relu(c1);
  int c2 = tape.conv2d(r1, tape.constant(w2), ConvGeom::same_pad(5, 6, 5, 2, 8, 8));
  const Tensor& got = tape.value(c2);

  Tensor h = naive_conv(x, w1, 1);
  for (int64_t i = 0; i < h.numel(); ++i) h[i] = std::max(0.0, h[i]);
  Tensor want = naive_conv(h, w2, 2);
  REQUIRE(got.numel() == want.numel());
  double worst = 0.0;
  for (int64_t i = 0; i < want.numel(); ++i) worst = std::max(worst, std::fabs(got[i] - want[i]));
  CHECK_MSG(worst < 1e-10, "max deviation " + testing::show(worst));
}

TEST_CASE(backward_of_sum_is_ones_and_constants_get_no_grad) {
  Rng rng(44);
  Tensor x = randn_t({3, 4}, rng);
  x.requires_grad = true;
  Tensor w = randn_t({2, 4}, rng);
  w.requires_grad = true;

  Tape tape;
  int xi = tape.leaf(x);
  int s = tape.sum(xi);
  tape.backward(s);
  const Tensor& g = tape.grad(xi);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);

  // A loss that never touches w leaves w's gradient zero.
  Tape t2;
  int xj = t2.leaf(x);
  int wj = t2.leaf(w);
  int s2 = t2.sum(xj);
  t2.backward(s2);
  CHECK(!t2.has_grad(wj));
  const Tensor& gw = t2.grad(wj);
  for (int64_t i = 0; i < gw.numel(); ++i) CHECK(gw[i] == 0.0);
}

TEST_CASE(backward_is_deterministic) {
  Rng rng(45);
  Tensor x = randn_t({2, 3, 6, 6}, rng);
  x.requires_grad = true;
  Tensor w = randn_t({4, 3, 3, 3}, rng, 0.3);
  w.requires_grad = true;
  auto run = [&](std::vector<double>& gx, std::vector<double>& gw) {
    Tape t;
    int xi = t.leaf(x);
    int wi = t.leaf(w);
    int c = t.conv2d(xi, wi, ConvGeom::same_pad(3, 3, 4, 1, 6, 6));
    int r = t.relu(c);
    int p = t.avgpool(r);
    int s = t.sum(p);
    t.backward(s);
    gx = t.grad(xi).data;
    gw = t.grad(wi).data;
  };
  std::vector<double> gx1, gw1, gx2, gw2;
  run(gx1, gw1);
  run(gx2, gw2);
  CHECK(gx1 == gx2);
  CHECK(gw1 == gw2);
}

// ----------------------------------------- autodiff: finite differences ---

namespace {

// Analytic gradients vs central differences for a scalar-valued build
// function over a list of leaf tensors. Relative error is measured against
// max(|fd|, |analytic|) floored relative to the largest gradient magnitude,
// so near-zero entries do not dominate.
double max_fd_rel_err(std::vector<Tensor*> params,
                      const std::function<int(Tape&, const std::vector<int>&)>& build,
                      double h = 1e-5) {
  for (Tensor* p : params) p->requires_grad = true;
  Tape tape;
  std::vector<int> ids;
  ids.reserve(params.size());
  for (Tensor* p : params) ids.push_back(tape.leaf(*p));
  int loss = build(tape, ids);
  tape.backward(loss);
  std::vector<std::vector<double>> grads;
  double gmax = 0.0;
  for (int id : ids) {
    grads.push_back(tape.grad(id).data);
    for (double gv : grads.back()) gmax = std::max(gmax, std::fabs(gv));
  }
  double floor_ = std::max(1e-3 * gmax, 1e-9);

  auto eval = [&]() {
    Tape t;
    std::vector<int> ids2;
    ids2.reserve(params.size());
    for (Tensor* p : params) ids2.push_back(t.leaf(*p));
    int l = build(t, ids2);
    return t.value(l)[0];
  };

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (int64_t i = 0; i < p.numel(); ++i) {
      double keep = p[i];
      p[i] = keep + h;
      double up = eval();
      p[i] = keep - h;
      double dn = eval();
      p[i] = keep;
      double fd = (up - dn) / (2.0 * h);
      double an = grads[pi][static_cast<size_t>(i)];
      double denom = std::max({std::fabs(fd), std::fabs(an), floor_});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE(fd_conv2d_stride1_and_stride2) {
  Rng rng(51);
  for (int64_t stride : {int64_t{1}, int64_t{2}}) {
    Tensor x = randn_t({2, 2, 5, 5}, rng);
    Tensor w = randn_t({3, 2, 3, 3}, rng, 0.5);
    ConvGeom g = ConvGeom::same_pad(3, 2, 3, stride, 5, 5);
    Tensor mix = randn_t({2 * 3 * g.h_out * g.w_out}, rng);
    double err = max_fd_rel_err({&x, &w}, [&](Tape& t, const std::vector<int>& ids) {
      int c = t.conv2d(ids[0], ids[1], g);
      return t.weighted_sum(c, mix);
    });
    CHECK_MSG(err < 1e-4, "stride " + std::to_string(stride) + " err " + testing::show(err));
  }
}

TEST_CASE(fd_linear_with_and_without_bias) {
  Rng rng(52);
  Tensor x = randn_t({3, 5}, rng);
  Tensor w = randn_t({4, 5}, rng, 0.6);
  Tensor b = randn_t({4}, rng);
  Tensor mix = randn_t({12}, rng);
  double err = max_fd_rel_err({&x, &w, &b}, [&](Tape& t, const std::vector<int>& ids) {
    int y = t.linear(ids[0], ids[1], ids[2]);
    return t.weighted_sum(y, mix);
  });
  CHECK_MSG(err < 1e-4, "bias err " + testing::show(err));
  double err2 = max_fd_rel_err({&x, &w}, [&](Tape& t, const std::vector<int>& ids) {
    int y = t.linear(ids[0], ids[1], -1);
    return t.weighted_sum(y, mix);
  });
  CHECK_MSG(err2 < 1e-4, "no-bias err " + testing::show(err2));
}

TEST_CASE(fd_relu_avgpool_add) {
  Rng rng(53);
  Tensor x = randn_t({2, 3, 4, 4}, rng);
  // Keep entries away from the relu kink so finite differences are smooth.
  for (int64_t i = 0; i < x.numel(); ++i)
    x[i] = (x[i] >= 0 ? 1.0 : -1.0) * (std::fabs(x[i]) + 0.05);
  Tensor y = randn_t({2, 3, 4, 4}, rng);
  Tensor mix = randn_t({2 * 3}, rng);
  double err = max_fd_rel_err({&x, &y}, [&](Tape& t, const std::vector<int>& ids) {
    int a = t.add(ids[0], ids[1]);
    int r = t.relu(a);
    int p = t.avgpool(r);
    return t.weighted_sum(p, mix);
  });
  CHECK_MSG(err < 1e-4, "err " + testing::show(err));
}

TEST_CASE(fd_batchnorm_training_and_eval) {
  Rng rng(54);
  Tensor x = randn_t({4, 3, 3, 3}, rng);
  Tensor gamma = randn_t({3}, rng, 0.2);
  for (int64_t i = 0; i < 3; ++i) gamma[i] += 1.0;
  Tensor beta = randn_t({3}, rng, 0.3);
  Tensor mix = randn_t({4 * 3 * 3 * 3}, rng);
  Tensor rm0 = Tensor::zeros({3});
  Tensor rv0 = Tensor::full({3}, 1.0);
  for (int64_t i = 0; i < 3; ++i) {
    rm0[i] = 0.3 * rng.normal();
    rv0[i] = 1.0 + 0.5 * rng.uniform();
  }

  // Training mode recomputes batch statistics per forward; running stats are
  // cloned per call so the repeated finite-difference evaluations see
  // identical state.
  std::vector<std::unique_ptr<std::pair<Tensor, Tensor>>> stash;
  double err = max_fd_rel_err({&x, &gamma, &beta}, [&](Tape& t, const std::vector<int>& ids) {
    stash.push_back(std::make_unique<std::pair<Tensor, Tensor>>(rm0, rv0));
    int bn = t.batchnorm(ids[0], ids[1], ids[2], &stash.back()->first, &stash.back()->second,
                         true, 0.1, 1e-5);
    return t.weighted_sum(bn, mix);
  });
  CHECK_MSG(err < 1e-4, "training err " + testing::show(err));

  double err2 = max_fd_rel_err({&x, &gamma, &beta}, [&](Tape& t, const std::vector<int>& ids) {
    stash.push_back(std::make_unique<std::pair<Tensor, Tensor>>(rm0, rv0));
    int bn = t.batchnorm(ids[0], ids[1], ids[2], &stash.back()->first, &stash.back()->second,
                         false, 0.1, 1e-5);
    return t.weighted_sum(bn, mix);
  });
  CHECK_MSG(err2 < 1e-4, "eval err " + testing::show(err2));
}

TEST_CASE(fd_gated_sum_including_zero_gates) {
  Rng rng(55);
  Tensor a = randn_t({2, 4}, rng), b = randn_t({2, 4}, rng), c = randn_t({2, 4}, rng);
  Tensor gates = Tensor::zeros({3});
  gates[0] = 0.3;
  gates[1] = 0.7;
  gates[2] = 0.0;  // zero gate still needs d(gate) = <dy, branch>
  Tensor mix = randn_t({8}, rng);
  double err =
      max_fd_rel_err({&a, &b, &c, &gates}, [&](Tape& t, const std::vector<int>& ids) {
        int gs = t.gated_sum({ids[0], ids[1], ids[2]}, ids[3]);
        return t.weighted_sum(gs, mix);
      });
  CHECK_MSG(err < 1e-4, "err " + testing::show(err));
}

TEST_CASE(fd_softmax_ce_and_external) {
  Rng rng(56);
  Tensor logits = randn_t({4, 5}, rng);
  std::vector<uint16_t> labels{0, 2, 4, 1};
  double err = max_fd_rel_err({&logits}, [&](Tape& t, const std::vector<int>& ids) {
    return t.softmax_ce(ids[0], labels);
  });
  CHECK_MSG(err < 1e-4, "softmax_ce err " + testing::show(err));

  // external: y = x^2 elementwise with a hand-written Jacobian.
  Tensor x = randn_t({3, 3}, rng);
  double err2 = max_fd_rel_err({&x}, [&](Tape& t, const std::vector<int>& ids) {
    const Tensor& xv = t.value(ids[0]);
    Tensor sq = xv;
    for (int64_t i = 0; i < sq.numel(); ++i) sq[i] = xv[i] * xv[i];
    int e = t.external(sq, ids[0], [](const Tensor& dy, const Tensor& xval, Tensor& dx) {
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += 2.0 * xval[i] * dy[i];
    });
    return t.sum(e);
  });
  CHECK_MSG(err2 < 1e-4, "external err " + testing::show(err2));
}

TEST_CASE(fd_random_three_layer_cnn) {
  Rng rng(57);
  Tensor x = randn_t({2, 1, 8, 8}, rng);
  Tensor w1 = randn_t({4, 1, 3, 3}, rng, 0.5);
  Tensor w2 = randn_t({4, 4, 3, 3}, rng, 0.3);
  Tensor wl = randn_t({3, 4}, rng, 0.5);
  Tensor bl = randn_t({3}, rng, 0.2);
  std::vector<uint16_t> labels{0, 2};
  ConvGeom g1 = ConvGeom::same_pad(3, 1, 4, 1, 8, 8);
  ConvGeom g2 = ConvGeom::same_pad(3, 4, 4, 2, 8, 8);
  double err = max_fd_rel_err(
      {&x, &w1, &w2, &wl, &bl}, [&](Tape& t, const std::vector<int>& ids) {
        int c1 = t.conv2d(ids[0], ids[1], g1);
        int r1 = t.relu(c1);
        int c2 = t.conv2d(r1, ids[2], g2);
        int r2 = t.relu(c2);
        int p = t.avgpool(r2);
        int logits = t.linear(p, ids[3], ids[4]);
        return t.softmax_ce(logits, labels);
      });
  CHECK_MSG(err < 1e-4, "cnn err " + testing::show(err));
}

// ---------------------------------------------------------------- sgd -----

TEST_CASE(sgd_worked_examples) {
  // grad = 0, no decay: unchanged.
  Tensor w = Tensor::full({3}, 2.0);
  w.grad = std::make_shared<std::vector<double>>(3, 0.0);
  SgdOptions opt;
  opt.lr = 0.5;
  sgd_step(w, opt, nullptr, "w");
  for (int64_t i = 0; i < 3; ++i) CHECK(w[i] == 2.0);

  // w=1, grad=0, lambda1=0.5, lr=1: w - 1*(0 + 2*0.5*1) = 0.
  Tensor w2 = Tensor::full({1}, 1.0);
  w2.grad = std::make_shared<std::vector<double>>(1, 0.0);
  SgdOptions opt2;
  opt2.lr = 1.0;
  opt2.weight_decay = 0.5;
  sgd_step(w2, opt2, nullptr, "w2");
  CHECK(w2[0] == 0.0);

  // Quadratic (w-3)^2 converges under plain SGD.
  Tensor w3 = Tensor::full({1}, 0.0);
  w3.grad = std::make_shared<std::vector<double>>(1, 0.0);
  SgdOptions opt3;
  opt3.lr = 0.1;
  for (int step = 0; step < 200; ++step) {
    (*w3.grad)[0] = 2.0 * (w3[0] - 3.0);
    sgd_step(w3, opt3, nullptr, "w3");
  }
  CHECK_MSG(std::fabs(w3[0] - 3.0) < 1e-3, "w = " + testing::show(w3[0]));

  // Non-finite gradient aborts the step.
  Tensor w4 = Tensor::full({1}, 1.0);
  w4.grad = std::make_shared<std::vector<double>>(1, std::nan(""));
  CHECK_THROWS(NumericError, sgd_step(w4, opt3, nullptr, "w4"));
  Tensor w5 = Tensor::full({1}, 1.0);  // missing gradient entirely
  CHECK_THROWS(NumericError, sgd_step(w5, opt3, nullptr, "w5"));
}

TEST_CASE(sgd_momentum_matches_hand_rolled_update) {
  Tensor w = Tensor::full({1}, 1.0);
  w.grad = std::make_shared<std::vector<double>>(1, 0.0);
  SgdOptions opt;
  opt.lr = 0.1;
  opt.momentum = 0.9;
  std::vector<double> vel(1, 0.0);
  double wm = 1.0, vm = 0.0;
  for (int step = 0; step < 5; ++step) {
    double g = 2.0 * (wm - 3.0);  // same quadratic, reference first
    vm = 0.9 * vm + g;
    wm -= 0.1 * vm;
    (*w.grad)[0] = 2.0 * (w[0] - 3.0);
    sgd_step(w, opt, &vel, "w");
    CHECK_NEAR(w[0], wm, 1e-12);
  }
}

// ----------------------------------------------------------- quantize -----

TEST_CASE(quantize_weight_encoding_and_roundtrip) {
  FixedPointFormat fmt;  // 16/16/2/1
  fmt.validate();
  CHECK(fmt.num_slices() == 8);
  CHECK(fmt.num_cycles() == 16);
  CHECK(fmt.weight_offset() == 32768);

  // Zero weight sits exactly at the offset code.
  std::vector<double> zeros(4, 0.0);
  double s0 = weight_scale(zeros.data(), 4, fmt.weight_bits);
  CHECK(s0 == 1.0);  // all-zero tensor defines scale 1
  CHECK(quantize_weight(0.0, s0, fmt.weight_bits) == 0);
  CHECK(quantize_weight(0.0, s0, fmt.weight_bits) + fmt.weight_offset() == 32768);

  // Max-abs maps to the top code.
  std::vector<double> w{0.25, -0.5, 0.75};
  double s = weight_scale(w.data(), 3, fmt.weight_bits);
  CHECK_NEAR(s, 0.75 / 32767.0, 1e-18);
  CHECK(quantize_weight(0.75, s, fmt.weight_bits) == 32767);
  CHECK(quantize_weight(0.75, s, fmt.weight_bits) + fmt.weight_offset() == 65535);
  CHECK(quantize_weight(-0.75, s, fmt.weight_bits) == -32767);

  // Round-trip bound: |dequant(quant(x)) - x| <= scale / 2.
  Rng rng(61);
  std::vector<double> t(64);
  for (double& v : t) v = rng.normal();
  double st = weight_scale(t.data(), 64, fmt.weight_bits);
  for (double v : t) {
    double back = st * quantize_weight(v, st, fmt.weight_bits);
    CHECK_MSG(std::fabs(back - v) <= st / 2 + 1e-15, "roundtrip " + testing::show(back - v));
  }
}

TEST_CASE(quantize_activation_clamps_and_scales) {
  FixedPointFormat fmt;
  std::vector<double> x{0.0, 0.5, 1.0, 2.0};
  double s = activation_scale(x.data(), 4, fmt.activation_bits);
  CHECK_NEAR(s, 2.0 / fmt.activation_levels(), 1e-18);
  CHECK(quantize_activation(2.0, s, fmt.activation_bits) ==
        static_cast<uint32_t>(fmt.activation_levels()));
  CHECK(quantize_activation(0.0, s, fmt.activation_bits) == 0u);
  CHECK(quantize_activation(-1.0, s, fmt.activation_bits) == 0u);  // negatives clamp
  std::vector<double> none(3, -0.5);
  CHECK(activation_scale(none.data(), 3, fmt.activation_bits) == 1.0);
}

TEST_CASE(quantized_matvec_matches_naive) {
  Rng rng(62);
  const int64_t rows = 9, cols = 6;
  std::vector<int32_t> wq(static_cast<size_t>(rows * cols));
  std::vector<uint32_t> xq(static_cast<size_t>(rows));
  for (auto& v : wq) v = static_cast<int32_t>(rng.uniform_int(65535)) - 32767;
  for (auto& v : xq) v = static_cast<uint32_t>(rng.uniform_int(65536));
  std::vector<int64_t> acc(static_cast<size_t>(cols));
  quantized_matvec(wq.data(), xq.data(), rows, cols, acc.data());
  for (int64_t c = 0; c < cols; ++c) {
    int64_t want = 0;
    for (int64_t r = 0; r < rows; ++r)
      want += static_cast<int64_t>(wq[static_cast<size_t>(r * cols + c)]) *
              static_cast<int64_t>(xq[static_cast<size_t>(r)]);
    CHECK(acc[static_cast<size_t>(c)] == want);
  }
}

// ----------------------------------------------------------- net spec -----

namespace {

const char* kToyNet =
    "input 1 16 16\n"
    "conv k=3 in=1 out=8 s=2 searchable=false\n"
    "block in=8 out=16 s=2 searchable=true\n"
    "block in=16 out=16 s=1 searchable=true\n"
    "linear in=16 out=10\n";

}  // namespace

TEST_CASE(net_parse_elaborate_and_roundtrip) {
  NetworkSpec spec = NetworkSpec::parse_string(kToyNet, "toy");
  CHECK(spec.in_channels == 1 && spec.in_height == 16 && spec.in_width == 16);
  REQUIRE(spec.lines.size() == 4);
  CHECK(spec.lines[1].kind == NetLine::kBlock && spec.lines[1].stride == 2);

  Elaborated net = elaborate(spec);
  CHECK(net.classes == 10);
  CHECK(net.num_edges == 4);  // two searchable blocks, two convs each
  // stem + (c1,c2,proj) + (c1,c2) + linear = 7 mapped prims
  CHECK(net.mapped_prims().size() == 7);
  CHECK(net.searchable_prims().size() == 4);

  // Zero-op eligibility: shape-preserving searchable convs only.
  int eligible = 0;
  for (int idx : net.searchable_prims())
    if (net.prims[static_cast<size_t>(idx)].zero_eligible()) ++eligible;
  CHECK(eligible == 3);  // b1c2, b2c1, b2c2 (b1c1 changes channels/stride)

  // to_string -> parse -> to_string is a fixed point.
  std::string once = spec.to_string();
  NetworkSpec again = NetworkSpec::parse_string(once, "toy2");
  CHECK(again.to_string() == once);
}

TEST_CASE(net_compact_zero_block_grammar) {
  // k2=0: the surviving conv carries the block's stride.
  NetworkSpec spec = NetworkSpec::parse_string(
      "input 4 8 8\n"
      "block in=4 out=8 s=2 searchable=false k1=3 k2=0 n1=64\n",
      "compact");
  Elaborated net = elaborate(spec);
  std::vector<int> mapped = net.mapped_prims();
  REQUIRE(mapped.size() == 2);  // surviving conv + projection
  const Prim& c1 = net.prims[static_cast<size_t>(mapped[0])];
  CHECK(c1.k == 3 && c1.stride == 2 && c1.n == 64);
  const Prim& proj = net.prims[static_cast<size_t>(mapped[1])];
  CHECK(proj.k == 1 && proj.stride == 2);

  // k1=0 k2=0 on an identity block: the block vanishes entirely.
  NetworkSpec spec2 = NetworkSpec::parse_string(
      "input 1 8 8\n"
      "conv k=3 in=1 out=4 s=1 searchable=false\n"
      "block in=4 out=4 s=1 searchable=false k1=0 k2=0\n"
      "linear in=4 out=3\n",
      "collapsed");
  Elaborated net2 = elaborate(spec2);
  CHECK(net2.mapped_prims().size() == 2);  // stem conv + linear only

  // A round-trip preserves the compact grammar.
  NetworkSpec back = NetworkSpec::parse_string(spec.to_string(), "rt");
  CHECK(back.to_string() == spec.to_string());
}

TEST_CASE(net_parse_errors_name_lines) {
  CHECK_THROWS_WITH(ConfigError, NetworkSpec::parse_string("conv k=3 in=1 out=2 s=1\n", "bad"),
                    "first line must be");
  CHECK_THROWS_WITH(ConfigError,
                    NetworkSpec::parse_string("input 1 8 8\nconv k=4 in=1 out=2 s=1\n", "bad"),
                    "line 2");
  CHECK_THROWS_WITH(ConfigError,
                    NetworkSpec::parse_string(
                        "input 1 8 8\nlinear in=64 out=10\nconv k=3 in=1 out=2 s=1\n", "bad"),
                    "line 3");
  // k1=0 with k2 != 0 demands a shape-preserving block.
  CHECK_THROWS_WITH(ConfigError,
                    NetworkSpec::parse_string(
                        "input 1 8 8\nblock in=4 out=8 s=2 searchable=false k1=0 k2=3\n", "bad"),
                    "shape-preserving");
}

// --------------------------------------------------- batchnorm folding ----

TEST_CASE(fold_batchnorm_matches_eval_bn_exactly) {
  Rng rng(71);
  const int64_t out_c = 4, in_c = 3, k = 3, h = 6, w = 6;
  Tensor cw = randn_t({out_c, in_c, k, k}, rng, 0.4);
  Tensor gamma = randn_t({out_c}, rng, 0.2);
  for (int64_t i = 0; i < out_c; ++i) gamma[i] += 1.0;
  Tensor beta = randn_t({out_c}, rng, 0.3);
  Tensor rm = randn_t({out_c}, rng, 0.2);
  Tensor rv = Tensor::zeros({out_c});
  for (int64_t i = 0; i < out_c; ++i) rv[i] = 0.5 + rng.uniform();
  Tensor x = randn_t({2, in_c, h, w}, rng);
  ConvGeom g = ConvGeom::same_pad(k, in_c, out_c, 1, h, w);

  Tape t1;
  int c = t1.conv2d(t1.constant(x), t1.constant(cw), g);
  Tensor rm1 = rm, rv1 = rv;
  int bn = t1.batchnorm(c, t1.constant(gamma), t1.constant(beta), &rm1, &rv1, false, 0.1, 1e-5);
  const Tensor& want = t1.value(bn);

  FoldedConv folded = fold_batchnorm(cw, gamma, beta, rm, rv, 1e-5);
  Tape t2;
  int c2 = t2.conv2d(t2.constant(x), t2.constant(folded.w), g);
  Tensor got = t2.value(c2);
  for (int64_t b = 0; b < got.dim(0); ++b)
    for (int64_t o = 0; o < got.dim(1); ++o)
      for (int64_t y = 0; y < got.dim(2); ++y)
        for (int64_t xx = 0; xx < got.dim(3); ++xx)
          got.at4(b, o, y, xx) += folded.bias[static_cast<size_t>(o)];

  double worst = 0.0;
  for (int64_t i = 0; i < want.numel(); ++i) worst = std::max(worst, std::fabs(got[i] - want[i]));
  CHECK_MSG(worst < 1e-10, "fold deviation " + testing::show(worst));
}

// ------------------------------------------------- training determinism ---

TEST_CASE(training_trajectory_is_bit_identical_per_seed) {
  SyntheticTaskSpec ts;
  ts.classes = 3;
  ts.size = 8;
  ts.channels = 1;
  ts.patterns_per_class = 1;
  ts.noise = 0.3;
  ts.count = 60;
  ts.seed = 5;
  Dataset ds = gen_synthetic(ts);

  NetworkSpec spec = NetworkSpec::parse_string(
      "input 1 8 8\n"
      "conv k=3 in=1 out=4 s=2 searchable=false\n"
      "linear in=4 out=3\n",
      "tiny");
  Elaborated net = elaborate(spec);

  auto run = [&]() {
    Rng rng(17);
    ParamStore store = init_params(net, rng);
    Model model(net, store);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch = 10;
    opt.sgd.lr = 0.05;
    opt.seed = 17;
    std::vector<EpochLog> log = train_model(model, ds, opt);
    std::vector<double> losses;
    for (const EpochLog& e : log) losses.push_back(e.loss);
    return losses;
  };
  std::vector<double> first = run(), second = run();
  REQUIRE(first.size() == second.size());
  for (size_t i = 0; i < first.size(); ++i) CHECK(first[i] == second[i]);
}

int main(int argc, char** argv) { return testing::run_all(argc, argv); }
