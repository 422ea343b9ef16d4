#pragma once

#include <cstddef>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace anc {

/// Caps the worker count used by the kernels. Every kernel partitions work
/// by output element and reduces in a fixed order, so the value never
/// changes results.
inline void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n < 1 ? 1 : n);
#else
  (void)n;
#endif
}

inline int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Reads ANC_THREADS; returns 0 when unset or malformed.
inline int threads_from_env() {
  const char* v = std::getenv("ANC_THREADS");
  if (!v) return 0;
  try {
    return std::stoi(v);
  } catch (...) {
    return 0;
  }
}

template <typename Fn>
void parallel_for(std::ptrdiff_t n, Fn&& fn) {
#ifdef _OPENMP
  if (n > 1 && omp_get_max_threads() > 1 && !omp_in_parallel()) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  for (std::ptrdiff_t i = 0; i < n; ++i) fn(i);
}

}  // namespace anc
