#include "xbarnas/tensor.hpp"

#include <cmath>
#include <sstream>

#include "xbarnas/errors.hpp"
#include "xbarnas/rng.hpp"

namespace xbarnas {

int64_t shape_numel(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
  data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data.size()); }

double& Tensor::at4(int64_t b, int64_t c, int64_t y, int64_t x) {
  return data[static_cast<size_t>(((b * shape[1] + c) * shape[2] + y) * shape[3] + x)];
}

double Tensor::at4(int64_t b, int64_t c, int64_t y, int64_t x) const {
  return data[static_cast<size_t>(((b * shape[1] + c) * shape[2] + y) * shape[3] + x)];
}

Tensor Tensor::zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<int64_t> s, double v) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = v;
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (double& x : t.data) x = rng.normal() * stddev;
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream ss;
  ss << "[";
  for (size_t i = 0; i < shape.size(); ++i) ss << (i ? "x" : "") << shape[i];
  ss << "]";
  return ss.str();
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data) m = std::max(m, std::fabs(x));
  return m;
}

bool Tensor::all_finite() const {
  for (double x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace xbarnas
