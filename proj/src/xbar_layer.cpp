#include "xbarnas/xbar_layer.hpp"

#include <algorithm>
#include <cmath>

#include "xbarnas/errors.hpp"
#include "xbarnas/parallel.hpp"
#include "xbarnas/quantize.hpp"

namespace xbarnas {

ProgrammedLayer ProgrammedLayer::conv(const CrossbarConfig& hw, const ConvGeom& g,
                                      const Tensor& w, const std::vector<double>& bias) {
  if (w.numel() != g.out_c * g.rows())
    throw ConfigError("programmed conv: weight shape " + w.shape_str() +
                      " does not match geometry");
  ProgrammedLayer layer;
  layer.geom_ = g;
  layer.is_linear_ = false;
  layer.rows_ = g.rows();
  layer.cols_ = g.out_c;
  // transpose [O, I*K*K] into the crossbar's rows x cols orientation
  std::vector<double> matrix(static_cast<size_t>(layer.rows_ * layer.cols_));
  for (int64_t o = 0; o < layer.cols_; ++o)
    for (int64_t r = 0; r < layer.rows_; ++r)
      matrix[static_cast<size_t>(r * layer.cols_ + o)] = w.data[static_cast<size_t>(o * layer.rows_ + r)];
  layer.program(hw, matrix, bias, g.patches());
  return layer;
}

ProgrammedLayer ProgrammedLayer::linear(const CrossbarConfig& hw, const Tensor& w,
                                        const std::vector<double>& bias) {
  if (w.ndim() != 2) throw ConfigError("programmed linear: weight must be 2-d");
  ProgrammedLayer layer;
  layer.is_linear_ = true;
  layer.rows_ = w.dim(1);
  layer.cols_ = w.dim(0);
  std::vector<double> matrix(static_cast<size_t>(layer.rows_ * layer.cols_));
  for (int64_t o = 0; o < layer.cols_; ++o)
    for (int64_t r = 0; r < layer.rows_; ++r)
      matrix[static_cast<size_t>(r * layer.cols_ + o)] = w.data[static_cast<size_t>(o * layer.rows_ + r)];
  layer.program(hw, matrix, bias, 1);
  return layer;
}

void ProgrammedLayer::program(const CrossbarConfig& hw, const std::vector<double>& matrix,
                              const std::vector<double>& bias, int64_t vectors) {
  hw_ = hw;
  if (!bias.empty() && static_cast<int64_t>(bias.size()) != cols_)
    throw ConfigError("programmed layer: bias length does not match output count");
  bias_ = bias.empty() ? std::vector<double>(static_cast<size_t>(cols_), 0.0) : bias;
  w_scale_ = xbarnas::weight_scale(matrix.data(), rows_ * cols_, hw.fmt.weight_bits);
  wq_.resize(matrix.size());
  for (size_t i = 0; i < matrix.size(); ++i)
    wq_[i] = quantize_weight(matrix[i], w_scale_, hw.fmt.weight_bits);
  mapped_ = map_matrix(rows_, cols_, hw.n, vectors);
  chunks_ = chunk_layer(mapped_);
  blocks_.reserve(chunks_.size());
  std::vector<int32_t> sub;
  for (const Chunk& c : chunks_) {
    sub.assign(static_cast<size_t>(c.rows * c.cols), 0);
    for (int64_t r = 0; r < c.rows; ++r)
      for (int64_t cc = 0; cc < c.cols; ++cc)
        sub[static_cast<size_t>(r * c.cols + cc)] =
            wq_[static_cast<size_t>((c.row0 + r) * cols_ + c.col0 + cc)];
    blocks_.emplace_back(hw_, sub.data(), c.rows, c.cols);
  }
}

int64_t ProgrammedLayer::memo_size() const {
  int64_t total = 0;
  for (const CrossbarBlock& b : blocks_) total += static_cast<int64_t>(b.cache_size());
  return total;
}

void ProgrammedLayer::run_vectors(const std::vector<uint32_t>& xq, int64_t count, int64_t* acc,
                                  LayerStats* stats) {
  const int64_t n = hw_.n;
  const int cycles = hw_.fmt.num_cycles();
  const int ns = hw_.fmt.num_slices();
  const int sb = hw_.fmt.slice_bits;
  const int64_t offset = hw_.fmt.weight_offset();
  const int64_t tile = hw_.tile_size;
  int64_t solves_before = 0;
  for (const CrossbarBlock& b : blocks_) solves_before += b.solves();
  int64_t requested = 0;

  for (int64_t tile0 = 0; tile0 < count; tile0 += tile) {
    const int64_t tcount = std::min(tile, count - tile0);
    for (size_t ci = 0; ci < chunks_.size(); ++ci) {
      const Chunk& ch = chunks_[ci];
      std::vector<std::vector<uint8_t>> pats;
      pats.reserve(static_cast<size_t>(tcount) * cycles);
      for (int64_t pp = 0; pp < tcount; ++pp) {
        const int64_t p = tile0 + pp;
        for (int t = 0; t < cycles; ++t) {
          std::vector<uint8_t> pat(static_cast<size_t>(n), 0);
          int64_t ones = 0;
          for (int64_t r = 0; r < ch.rows; ++r) {
            uint8_t bit = static_cast<uint8_t>((xq[static_cast<size_t>((ch.row0 + r) * count + p)] >> t) & 1u);
            pat[static_cast<size_t>(r)] = bit;
            ones += bit;
          }
          if (ones > 0) pats.push_back(std::move(pat));
        }
      }
      requested += static_cast<int64_t>(pats.size());
      blocks_[ci].ensure_patterns(pats);
    }
    std::vector<uint8_t> missing(static_cast<size_t>(tcount), 0);
    par::for_range(tcount, [&](int64_t pp) {
      const int64_t p = tile0 + pp;
      std::vector<uint8_t> pat(static_cast<size_t>(n), 0);
      std::vector<int64_t> chunk_acc;
      for (size_t ci = 0; ci < chunks_.size(); ++ci) {
        const Chunk& ch = chunks_[ci];
        // rows beyond this chunk map to no device; clear bits a previous
        // (taller) chunk may have left behind
        std::fill(pat.begin() + static_cast<int64_t>(ch.rows), pat.end(), 0);
        chunk_acc.assign(static_cast<size_t>(ch.cols), 0);
        int64_t sum_x = 0;
        for (int64_t r = 0; r < ch.rows; ++r)
          sum_x += xq[static_cast<size_t>((ch.row0 + r) * count + p)];
        for (int t = 0; t < cycles; ++t) {
          int64_t ones = 0;
          for (int64_t r = 0; r < ch.rows; ++r) {
            uint8_t bit = static_cast<uint8_t>((xq[static_cast<size_t>((ch.row0 + r) * count + p)] >> t) & 1u);
            pat[static_cast<size_t>(r)] = bit;
            ones += bit;
          }
          if (ones == 0) continue;
          const int64_t* codes = blocks_[ci].cached_codes(CrossbarBlock::pack_pattern(pat.data(), n));
          if (!codes) {
            missing[static_cast<size_t>(pp)] = 1;
            return;
          }
          for (int s = 0; s < ns; ++s) {
            const int64_t w = int64_t{1} << (t + s * sb);
            const int64_t* row = codes + static_cast<int64_t>(s) * n;
            for (int64_t c = 0; c < ch.cols; ++c) chunk_acc[static_cast<size_t>(c)] += w * row[c];
          }
        }
        int64_t* dst = acc + p * cols_ + ch.col0;
        for (int64_t c = 0; c < ch.cols; ++c)
          dst[c] += chunk_acc[static_cast<size_t>(c)] - offset * sum_x;
      }
    });
    for (uint8_t m : missing)
      if (m) throw NumericError("programmed layer: pattern cache miss during accumulation");
  }
  if (stats) {
    int64_t solves_after = 0;
    for (const CrossbarBlock& b : blocks_) solves_after += b.solves();
    stats->solves += solves_after - solves_before;
    stats->cached += requested - (solves_after - solves_before);
    stats->positions += count;
  }
}

void ProgrammedLayer::run_vectors_reference(const std::vector<uint32_t>& xq, int64_t count,
                                            int64_t* acc) const {
  std::vector<uint32_t> col(static_cast<size_t>(rows_));
  std::vector<int64_t> res(static_cast<size_t>(cols_));
  for (int64_t p = 0; p < count; ++p) {
    for (int64_t r = 0; r < rows_; ++r) col[static_cast<size_t>(r)] = xq[static_cast<size_t>(r * count + p)];
    quantized_matvec(wq_.data(), col.data(), rows_, cols_, res.data());
    for (int64_t c = 0; c < cols_; ++c) acc[p * cols_ + c] = res[static_cast<size_t>(c)];
  }
}

namespace {

// Shared by the analog and reference paths: quantize one sample's unrolled
// activation matrix and dequantize the integer results.
struct SampleIo {
  std::vector<double> cols_f;   // rows x positions
  std::vector<uint32_t> xq;
  std::vector<int64_t> acc;     // positions x out
  double a_scale = 1.0;
};

}  // namespace

Tensor ProgrammedLayer::forward(const Tensor& x, LayerStats* stats) {
  const int64_t B = x.dim(0);
  const int64_t P = is_linear_ ? 1 : geom_.patches();
  Tensor out(is_linear_ ? std::vector<int64_t>{B, cols_}
                        : std::vector<int64_t>{B, cols_, geom_.h_out, geom_.w_out});
  SampleIo io;
  io.cols_f.resize(static_cast<size_t>(rows_ * P));
  io.xq.resize(io.cols_f.size());
  io.acc.resize(static_cast<size_t>(P * cols_));
  const int64_t sample_in = is_linear_ ? rows_ : geom_.in_c * geom_.h_in * geom_.w_in;
  for (int64_t b = 0; b < B; ++b) {
    const double* xs = x.data.data() + b * sample_in;
    if (is_linear_)
      std::copy(xs, xs + rows_, io.cols_f.begin());
    else
      im2col(xs, geom_, io.cols_f.data());
    io.a_scale = activation_scale(io.cols_f.data(), rows_ * P, hw_.fmt.activation_bits);
    for (size_t i = 0; i < io.cols_f.size(); ++i)
      io.xq[i] = quantize_activation(io.cols_f[i], io.a_scale, hw_.fmt.activation_bits);
    std::fill(io.acc.begin(), io.acc.end(), int64_t{0});
    run_vectors(io.xq, P, io.acc.data(), stats);
    const double scale = w_scale_ * io.a_scale;
    double* ob = out.data.data() + b * cols_ * P;
    for (int64_t o = 0; o < cols_; ++o)
      for (int64_t p = 0; p < P; ++p)
        ob[o * P + p] = static_cast<double>(io.acc[static_cast<size_t>(p * cols_ + o)]) * scale +
                        bias_[static_cast<size_t>(o)];
  }
  return out;
}

Tensor ProgrammedLayer::forward_reference(const Tensor& x) const {
  const int64_t B = x.dim(0);
  const int64_t P = is_linear_ ? 1 : geom_.patches();
  Tensor out(is_linear_ ? std::vector<int64_t>{B, cols_}
                        : std::vector<int64_t>{B, cols_, geom_.h_out, geom_.w_out});
  SampleIo io;
  io.cols_f.resize(static_cast<size_t>(rows_ * P));
  io.xq.resize(io.cols_f.size());
  io.acc.resize(static_cast<size_t>(P * cols_));
  const int64_t sample_in = is_linear_ ? rows_ : geom_.in_c * geom_.h_in * geom_.w_in;
  for (int64_t b = 0; b < B; ++b) {
    const double* xs = x.data.data() + b * sample_in;
    if (is_linear_)
      std::copy(xs, xs + rows_, io.cols_f.begin());
    else
      im2col(xs, geom_, io.cols_f.data());
    io.a_scale = activation_scale(io.cols_f.data(), rows_ * P, hw_.fmt.activation_bits);
    for (size_t i = 0; i < io.cols_f.size(); ++i)
      io.xq[i] = quantize_activation(io.cols_f[i], io.a_scale, hw_.fmt.activation_bits);
    run_vectors_reference(io.xq, P, io.acc.data());
    const double scale = w_scale_ * io.a_scale;
    double* ob = out.data.data() + b * cols_ * P;
    for (int64_t o = 0; o < cols_; ++o)
      for (int64_t p = 0; p < P; ++p)
        ob[o * P + p] = static_cast<double>(io.acc[static_cast<size_t>(p * cols_ + o)]) * scale +
                        bias_[static_cast<size_t>(o)];
  }
  return out;
}

MvmErrorResult mvm_error_stat(const CrossbarConfig& hw, int64_t rows, int64_t cols,
                              int64_t instances, Rng& rng) {
  if (rows < 1 || cols < 1 || instances < 1)
    throw ConfigError("mvm_error_stat: rows, cols and instances must be >= 1");
  const int64_t limit = hw.fmt.weight_limit();
  const int64_t levels = hw.fmt.activation_levels();

  // Integer-exact weights: one full-scale entry pins the per-tensor scale so
  // the drawn codes survive quantization unchanged.
  Tensor w({cols, rows});
  for (int64_t o = 0; o < cols; ++o)
    for (int64_t r = 0; r < rows; ++r)
      w.data[static_cast<size_t>(o * rows + r)] = static_cast<double>(
          static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(2 * limit + 1))) - limit);
  w.data[0] = static_cast<double>(limit);
  ProgrammedLayer pl =
      ProgrammedLayer::linear(hw, w, std::vector<double>(static_cast<size_t>(cols), 0.0));

  Tensor x({instances, rows});
  for (int64_t b = 0; b < instances; ++b) {
    for (int64_t r = 0; r < rows; ++r)
      x.data[static_cast<size_t>(b * rows + r)] =
          static_cast<double>(rng.uniform_int(static_cast<uint64_t>(levels + 1))) /
          static_cast<double>(levels);
    x.data[static_cast<size_t>(b * rows)] = 1.0;  // pin the per-sample scale
  }

  MvmErrorResult res;
  Tensor y = pl.forward(x, &res.stats);
  Tensor yr = pl.forward_reference(x);
  double sum = 0.0;
  int64_t used = 0;
  for (int64_t b = 0; b < instances; ++b) {
    double num = 0.0, den = 0.0;
    for (int64_t o = 0; o < cols; ++o) {
      double e = yr.data[static_cast<size_t>(b * cols + o)];
      num += std::abs(y.data[static_cast<size_t>(b * cols + o)] - e);
      den += std::abs(e);
    }
    if (den > 0.0) {
      sum += num / den;
      ++used;
    }
  }
  res.mean_rel_error = used > 0 ? sum / static_cast<double>(used) : 0.0;
  return res;
}

}  // namespace xbarnas
