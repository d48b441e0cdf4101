#pragma once

#include <cstdint>

namespace xbarnas {

// C[m x n] = A[m x k] * B[k x n], row-major, C overwritten.
// The parallel flag selects the OpenMP path; both paths compute each output
// element with the same inner loop, so results are bit-identical.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
          bool parallel = true);

// C[m x n] += alpha * A[m x k] * B[k x n].
void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
              double alpha, bool parallel = true);

// C[m x n] = A^T[m x k] * B[k x n] where A is stored [k x m].
void gemm_at(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
             bool parallel = true);

// C[m x n] = A[m x k] * B^T[k x n] where B is stored [n x k].
void gemm_bt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
             bool parallel = true);

// C[m x n] += A[m x k] * B^T[k x n] where B is stored [n x k].
void gemm_bt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                 bool parallel = true);

}  // namespace xbarnas
