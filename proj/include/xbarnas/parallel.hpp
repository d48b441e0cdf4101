#pragma once

#include <omp.h>

#include <cstdint>
#include <cstdlib>
#include <string>

namespace xbarnas {
namespace par {

// XBAR_THREADS caps worker threads for every parallel kernel; unset or
// invalid values fall back to the OpenMP default.
inline int max_threads() {
  static int cached = [] {
    int n = omp_get_max_threads();
    if (const char* env = std::getenv("XBAR_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1 && cap < n) n = cap;
    }
    return n;
  }();
  return cached;
}

// Index of the calling thread inside a for_range body; 0 outside parallel
// regions. Used to pick per-thread scratch buffers.
inline int thread_id() { return omp_get_thread_num(); }

// Every parallel loop in the project funnels through here. Iterations must
// write disjoint outputs; with that discipline results are identical for any
// thread count, so the serial reference path (parallel=false) is bit-equal.
template <class F>
inline void for_range(int64_t n, const F& f, bool parallel = true) {
  if (parallel && max_threads() > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (int64_t i = 0; i < n; ++i) f(i);
  } else {
    for (int64_t i = 0; i < n; ++i) f(i);
  }
}

}  // namespace par
}  // namespace xbarnas
