#pragma once

#include <cstdint>

namespace xbarnas {

// Fixed-point formats for the analog path. Weights are symmetric signed
// values stored on the array in offset binary (code = signed + 2^(wb-1),
// so the zero weight sits at mid-range and the offset is removed digitally).
// Activations are unsigned and streamed one bit per cycle.
struct FixedPointFormat {
  int weight_bits = 16;
  int activation_bits = 16;
  int slice_bits = 2;   // bits held by one conductance slice
  int stream_bits = 1;  // activation bits applied per cycle

  int weight_limit() const { return (1 << (weight_bits - 1)) - 1; }
  int weight_offset() const { return 1 << (weight_bits - 1); }
  int activation_levels() const { return (1 << activation_bits) - 1; }
  int num_slices() const { return weight_bits / slice_bits; }
  int num_cycles() const { return activation_bits / stream_bits; }
  int slice_max() const { return (1 << slice_bits) - 1; }
  void validate() const;  // throws ConfigError on an unusable format
};

// scale = max|w| / weight_limit, or 1.0 when every weight is zero.
double weight_scale(const double* w, int64_t n, int weight_bits);
// clamp(round(w / scale), -limit, +limit)
int32_t quantize_weight(double w, double scale, int weight_bits);

// scale = max(x) / activation_levels, or 1.0 when nothing is positive.
double activation_scale(const double* x, int64_t n, int activation_bits);
// clamp(round(x / scale), 0, levels); negative inputs clamp to zero.
uint32_t quantize_activation(double x, double scale, int activation_bits);

// Exact integer reference for the analog pipeline, crossbar orientation:
// inputs drive rows, outputs accumulate down columns.
//   acc[c] = sum_r wq[r * cols + c] * xq[r]
void quantized_matvec(const int32_t* wq, const uint32_t* xq, int64_t rows, int64_t cols,
                      int64_t* acc);

}  // namespace xbarnas
