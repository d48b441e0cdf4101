#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace xbarnas {

class Rng;

// Dense row-major double tensor. Gradients live on the autodiff tape during
// backward; leaves additionally receive a copy in `grad` so optimizers can
// read them without holding the tape.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<std::vector<double>> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s);

  int64_t numel() const;
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // (b, c, y, x) accessor for 4-d activations.
  double& at4(int64_t b, int64_t c, int64_t y, int64_t x);
  double at4(int64_t b, int64_t c, int64_t y, int64_t x) const;

  static Tensor zeros(std::vector<int64_t> s);
  static Tensor full(std::vector<int64_t> s, double v);
  static Tensor randn(std::vector<int64_t> s, Rng& rng, double stddev = 1.0);

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  double max_abs() const;
  bool all_finite() const;
};

int64_t shape_numel(const std::vector<int64_t>& s);

}  // namespace xbarnas
