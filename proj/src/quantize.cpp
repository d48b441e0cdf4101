#include "xbarnas/quantize.hpp"

#include <cmath>
#include <string>

#include "xbarnas/errors.hpp"

namespace xbarnas {

void FixedPointFormat::validate() const {
  if (weight_bits < 2 || weight_bits > 16)
    throw ConfigError("weight_bits must be in [2, 16], got " + std::to_string(weight_bits));
  if (activation_bits < 1 || activation_bits > 16)
    throw ConfigError("activation_bits must be in [1, 16], got " +
                      std::to_string(activation_bits));
  if (slice_bits < 1 || slice_bits > 4)
    throw ConfigError("slice_bits must be in [1, 4], got " + std::to_string(slice_bits));
  if (weight_bits % slice_bits != 0)
    throw ConfigError("weight_bits (" + std::to_string(weight_bits) +
                      ") must be a multiple of slice_bits (" + std::to_string(slice_bits) + ")");
  if (stream_bits != 1)
    throw ConfigError("only 1-bit activation streaming is supported, got stream_bits=" +
                      std::to_string(stream_bits));
}

double weight_scale(const double* w, int64_t n, int weight_bits) {
  double mx = 0.0;
  for (int64_t i = 0; i < n; ++i) mx = std::max(mx, std::fabs(w[i]));
  if (mx == 0.0) return 1.0;
  return mx / static_cast<double>((1 << (weight_bits - 1)) - 1);
}

int32_t quantize_weight(double w, double scale, int weight_bits) {
  const int32_t limit = (1 << (weight_bits - 1)) - 1;
  double q = std::round(w / scale);
  if (q > limit) q = limit;
  if (q < -limit) q = -limit;
  return static_cast<int32_t>(q);
}

double activation_scale(const double* x, int64_t n, int activation_bits) {
  double mx = 0.0;
  for (int64_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  if (mx <= 0.0) return 1.0;
  return mx / static_cast<double>((1 << activation_bits) - 1);
}

uint32_t quantize_activation(double x, double scale, int activation_bits) {
  const int32_t levels = (1 << activation_bits) - 1;
  double q = std::round(x / scale);
  if (q < 0.0) q = 0.0;
  if (q > levels) q = levels;
  return static_cast<uint32_t>(q);
}

void quantized_matvec(const int32_t* wq, const uint32_t* xq, int64_t rows, int64_t cols,
                      int64_t* acc) {
  for (int64_t c = 0; c < cols; ++c) acc[c] = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t xv = xq[r];
    if (xv == 0) continue;
    const int32_t* wrow = wq + r * cols;
    for (int64_t c = 0; c < cols; ++c) acc[c] += static_cast<int64_t>(wrow[c]) * xv;
  }
}

}  // namespace xbarnas
