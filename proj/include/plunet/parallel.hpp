#pragma once

#include <cstdint>

namespace plunet {

// Worker count for kernels. Read once from PLUNET_THREADS; 0 or unset means
// strictly single-threaded. Kernel results do not depend on this value: every
// output element is reduced in a fixed order by exactly one worker.
int num_threads();
void set_num_threads(int n);

// Runs body(i) for i in [0, count), possibly concurrently.
template <class F>
void parallel_for(std::int64_t count, F&& body) {
  const int threads = num_threads();
  if (threads <= 1 || count <= 1) {
    for (std::int64_t i = 0; i < count; ++i) body(i);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::int64_t i = 0; i < count; ++i) body(i);
}

}  // namespace plunet
