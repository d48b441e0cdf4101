#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xbarnas/config.hpp"
#include "xbarnas/tensor.hpp"

namespace xbarnas {

struct Dataset {
  int64_t count = 0;
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t classes = 0;
  std::vector<double> images;  // count x channels x H x W, values in [0, 1]
  std::vector<uint16_t> labels;

  int64_t sample_size() const { return channels * height * width; }
  const double* image(int64_t i) const { return images.data() + i * sample_size(); }
  // Copies samples [first, first+n) into a (n, C, H, W) batch tensor.
  Tensor batch(const std::vector<int64_t>& idx, int64_t first, int64_t n) const;
};

// Class-conditional generator: even classes are oriented bars, odd classes are
// off-center blobs; variants jitter the pattern slightly and Gaussian pixel
// noise is added on top, then values are clamped to [0, 1]. Patterns are pure
// functions of (class, variant, geometry) so different seeds share the same
// class structure.
struct SyntheticTaskSpec {
  int64_t classes = 10;
  int64_t size = 16;
  int64_t channels = 1;
  int64_t patterns_per_class = 2;
  double noise = 0.35;
  int64_t count = 1000;
  uint64_t seed = 1;

  static SyntheticTaskSpec from_config(const KeyValueConfig& cfg);
};

Dataset gen_synthetic(const SyntheticTaskSpec& spec);

// Noiseless pattern for a (class, variant) pair; used by the generator and by
// nearest-centroid checks.
std::vector<double> synthetic_pattern(const SyntheticTaskSpec& spec, int64_t cls, int64_t variant);

// XBDS container: "XBDS" magic, u32 version/count/channels/height/width/classes
// (little endian), float32 image payload, u16 labels.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Deterministic shuffled split; second part holds round(fraction * count).
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double fraction, uint64_t seed);

// CIFAR-10 binary batches: 3073-byte records, 1 label byte + 3x32x32 pixels.
Dataset load_cifar10(const std::vector<std::string>& files);

}  // namespace xbarnas
