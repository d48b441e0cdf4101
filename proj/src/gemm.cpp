#include "xbarnas/gemm.hpp"

#include "xbarnas/parallel.hpp"

namespace xbarnas {

// One output row per iteration; the accumulation order over k is fixed, so
// the serial and parallel paths agree exactly.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
          bool parallel) {
  par::for_range(
      m,
      [&](int64_t i) {
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] = 0.0;
        const double* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
          double av = arow[p];
          if (av == 0.0) continue;
          const double* brow = b + p * n;
          for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      },
      parallel);
}

void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
              double alpha, bool parallel) {
  par::for_range(
      m,
      [&](int64_t i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
          double av = alpha * arow[p];
          if (av == 0.0) continue;
          const double* brow = b + p * n;
          for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      },
      parallel);
}

void gemm_at(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
             bool parallel) {
  par::for_range(
      m,
      [&](int64_t i) {
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] = 0.0;
        for (int64_t p = 0; p < k; ++p) {
          double av = a[p * m + i];
          if (av == 0.0) continue;
          const double* brow = b + p * n;
          for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      },
      parallel);
}

void gemm_bt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
             bool parallel) {
  par::for_range(
      m,
      [&](int64_t i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int64_t j = 0; j < n; ++j) {
          const double* bcol = b + j * k;
          double s = 0.0;
          for (int64_t p = 0; p < k; ++p) s += arow[p] * bcol[p];
          crow[j] = s;
        }
      },
      parallel);
}

void gemm_bt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                 bool parallel) {
  par::for_range(
      m,
      [&](int64_t i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int64_t j = 0; j < n; ++j) {
          const double* bcol = b + j * k;
          double s = 0.0;
          for (int64_t p = 0; p < k; ++p) s += arow[p] * bcol[p];
          crow[j] += s;
        }
      },
      parallel);
}

}  // namespace xbarnas
