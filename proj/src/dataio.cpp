#include "xbarnas/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "xbarnas/errors.hpp"
#include "xbarnas/rng.hpp"

namespace xbarnas {

Tensor Dataset::batch(const std::vector<int64_t>& idx, int64_t first, int64_t n) const {
  Tensor t({n, channels, height, width});
  for (int64_t i = 0; i < n; ++i) {
    const double* src = image(idx[static_cast<size_t>(first + i)]);
    std::copy(src, src + sample_size(), t.data.begin() + i * sample_size());
  }
  return t;
}

SyntheticTaskSpec SyntheticTaskSpec::from_config(const KeyValueConfig& cfg) {
  SyntheticTaskSpec s;
  s.classes = cfg.get_int("classes", static_cast<int>(s.classes));
  s.size = cfg.get_int("size", static_cast<int>(s.size));
  s.channels = cfg.get_int("channels", static_cast<int>(s.channels));
  s.patterns_per_class = cfg.get_int("patterns", static_cast<int>(s.patterns_per_class));
  s.noise = cfg.get_double("noise", s.noise);
  s.count = cfg.get_int("count", static_cast<int>(s.count));
  s.seed = static_cast<uint64_t>(cfg.get_int("seed", static_cast<int>(s.seed)));
  if (s.classes < 2) throw ConfigError("synthetic task: classes must be >= 2");
  if (s.size < 4) throw ConfigError("synthetic task: size must be >= 4");
  if (s.channels < 1 || s.patterns_per_class < 1 || s.count < 1)
    throw ConfigError("synthetic task: channels, patterns and count must be >= 1");
  if (s.noise < 0.0) throw ConfigError("synthetic task: noise must be >= 0");
  return s;
}

std::vector<double> synthetic_pattern(const SyntheticTaskSpec& spec, int64_t cls,
                                      int64_t variant) {
  const int64_t s = spec.size;
  std::vector<double> img(static_cast<size_t>(spec.channels * s * s), 0.0);
  const double cx = (s - 1) / 2.0;
  const double cy = (s - 1) / 2.0;
  const double vshift =
      (spec.patterns_per_class > 1)
          ? (variant - (spec.patterns_per_class - 1) / 2.0) * (s / 16.0)
          : 0.0;
  for (int64_t y = 0; y < s; ++y) {
    for (int64_t x = 0; x < s; ++x) {
      double v = 0.0;
      if (cls % 2 == 0) {
        // Bar through the center at a class-specific angle, variant shifts it
        // perpendicular to its axis.
        double theta = M_PI * (cls + 0.5) / spec.classes;
        double nx = -std::sin(theta), ny = std::cos(theta);
        double d = (x - cx) * nx + (y - cy) * ny - vshift;
        double sigma = s / 10.0;
        v = 0.9 * std::exp(-0.5 * d * d / (sigma * sigma));
      } else {
        // Blob on a ring around the center at a class-specific angle, variant
        // nudges it tangentially.
        double phi = 2.0 * M_PI * cls / spec.classes + vshift * 0.35 / s * 2.0 * M_PI;
        double bx = cx + 0.28 * s * std::cos(phi);
        double by = cy + 0.28 * s * std::sin(phi);
        double sigma = s / 6.0;
        double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        v = 0.9 * std::exp(-0.5 * d2 / (sigma * sigma));
      }
      for (int64_t c = 0; c < spec.channels; ++c)
        img[static_cast<size_t>((c * s + y) * s + x)] = v;
    }
  }
  return img;
}

Dataset gen_synthetic(const SyntheticTaskSpec& spec) {
  Dataset ds;
  ds.count = spec.count;
  ds.channels = spec.channels;
  ds.height = spec.size;
  ds.width = spec.size;
  ds.classes = spec.classes;
  ds.images.resize(static_cast<size_t>(ds.count * ds.sample_size()));
  ds.labels.resize(static_cast<size_t>(ds.count));

  // Precompute the noiseless patterns once.
  std::vector<std::vector<double>> pats;
  for (int64_t c = 0; c < spec.classes; ++c)
    for (int64_t v = 0; v < spec.patterns_per_class; ++v)
      pats.push_back(synthetic_pattern(spec, c, v));

  Rng rng(spec.seed);
  for (int64_t i = 0; i < ds.count; ++i) {
    int64_t cls = i % spec.classes;  // balanced by construction
    int64_t variant = static_cast<int64_t>(
        rng.uniform_int(static_cast<uint64_t>(spec.patterns_per_class)));
    ds.labels[static_cast<size_t>(i)] = static_cast<uint16_t>(cls);
    const std::vector<double>& p =
        pats[static_cast<size_t>(cls * spec.patterns_per_class + variant)];
    double* dst = ds.images.data() + i * ds.sample_size();
    if (spec.noise > 0.0) {
      for (int64_t k = 0; k < ds.sample_size(); ++k)
        dst[k] = std::clamp(p[static_cast<size_t>(k)] + spec.noise * rng.normal(), 0.0, 1.0);
    } else {
      for (int64_t k = 0; k < ds.sample_size(); ++k) dst[k] = p[static_cast<size_t>(k)];
    }
  }
  return ds;
}

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::string buf;
  buf.reserve(28 + static_cast<size_t>(ds.count * ds.sample_size()) * 4 +
              static_cast<size_t>(ds.count) * 2);
  buf += "XBDS";
  put_u32(buf, 1);
  put_u32(buf, static_cast<uint32_t>(ds.count));
  put_u32(buf, static_cast<uint32_t>(ds.channels));
  put_u32(buf, static_cast<uint32_t>(ds.height));
  put_u32(buf, static_cast<uint32_t>(ds.width));
  put_u32(buf, static_cast<uint32_t>(ds.classes));
  for (double d : ds.images) {
    float f = static_cast<float>(d);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(buf, bits);
  }
  for (uint16_t l : ds.labels) {
    buf.push_back(static_cast<char>(l & 0xff));
    buf.push_back(static_cast<char>((l >> 8) & 0xff));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write dataset file: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open dataset file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 28 || buf.compare(0, 4, "XBDS") != 0)
    throw ConfigError(path + ": not an XBDS dataset (bad magic)");
  uint32_t version = get_u32(buf, 4);
  if (version != 1)
    throw ConfigError(path + ": unsupported XBDS version " + std::to_string(version));
  Dataset ds;
  ds.count = get_u32(buf, 8);
  ds.channels = get_u32(buf, 12);
  ds.height = get_u32(buf, 16);
  ds.width = get_u32(buf, 20);
  ds.classes = get_u32(buf, 24);
  size_t pixels = static_cast<size_t>(ds.count * ds.sample_size());
  size_t expect = 28 + pixels * 4 + static_cast<size_t>(ds.count) * 2;
  if (buf.size() != expect)
    throw ConfigError(path + ": truncated XBDS payload (expected " + std::to_string(expect) +
                      " bytes, found " + std::to_string(buf.size()) + ")");
  ds.images.resize(pixels);
  for (size_t i = 0; i < pixels; ++i) {
    uint32_t bits = get_u32(buf, 28 + i * 4);
    float f;
    std::memcpy(&f, &bits, 4);
    ds.images[i] = static_cast<double>(f);
  }
  ds.labels.resize(static_cast<size_t>(ds.count));
  size_t loff = 28 + pixels * 4;
  for (size_t i = 0; i < ds.labels.size(); ++i) {
    uint16_t l = static_cast<uint16_t>(static_cast<unsigned char>(buf[loff + i * 2]));
    l = static_cast<uint16_t>(
        l | (static_cast<uint16_t>(static_cast<unsigned char>(buf[loff + i * 2 + 1])) << 8));
    if (l >= ds.classes)
      throw ConfigError(path + ": label " + std::to_string(l) + " out of range at record " +
                        std::to_string(i));
    ds.labels[i] = l;
  }
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double fraction, uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw ConfigError("split fraction must be in [0, 1]");
  std::vector<int64_t> idx(static_cast<size_t>(ds.count));
  for (int64_t i = 0; i < ds.count; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  int64_t second = static_cast<int64_t>(std::llround(fraction * static_cast<double>(ds.count)));
  int64_t first = ds.count - second;
  auto take = [&](int64_t off, int64_t n) {
    Dataset out;
    out.count = n;
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.classes = ds.classes;
    out.images.resize(static_cast<size_t>(n * ds.sample_size()));
    out.labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      int64_t src = idx[static_cast<size_t>(off + i)];
      std::copy(ds.image(src), ds.image(src) + ds.sample_size(),
                out.images.begin() + i * ds.sample_size());
      out.labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
    }
    return out;
  };
  return {take(0, first), take(first, second)};
}

Dataset load_cifar10(const std::vector<std::string>& files) {
  constexpr int64_t kRecord = 3073;
  constexpr int64_t kPixels = 3072;
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.classes = 10;
  for (const std::string& path : files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open CIFAR-10 batch: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.empty() || buf.size() % kRecord != 0)
      throw ConfigError(path + ": size " + std::to_string(buf.size()) +
                        " is not a multiple of 3073-byte records");
    int64_t records = static_cast<int64_t>(buf.size()) / kRecord;
    for (int64_t r = 0; r < records; ++r) {
      const unsigned char* rec =
          reinterpret_cast<const unsigned char*>(buf.data()) + r * kRecord;
      if (rec[0] >= 10)
        throw ConfigError(path + ": label " + std::to_string(rec[0]) +
                          " out of range at record " + std::to_string(r));
      ds.labels.push_back(rec[0]);
      for (int64_t p = 0; p < kPixels; ++p)
        ds.images.push_back(static_cast<double>(rec[1 + p]) / 255.0);
    }
    ds.count += records;
  }
  return ds;
}

}  // namespace xbarnas
