#include "plunet/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace plunet {

namespace {

int threads_from_env() {
  const char* env = std::getenv("PLUNET_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    const int n = std::stoi(env);
    return n <= 0 ? 1 : n;
  } catch (...) {
    return 1;
  }
}

std::atomic<int>& thread_setting() {
  static std::atomic<int> value{threads_from_env()};
  return value;
}

}  // namespace

int num_threads() { return thread_setting().load(std::memory_order_relaxed); }

void set_num_threads(int n) { thread_setting().store(n <= 0 ? 1 : n, std::memory_order_relaxed); }

}  // namespace plunet
