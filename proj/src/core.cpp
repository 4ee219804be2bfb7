// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tapmicro/core.hpp"

#include <cstdlib>
#include <thread>

namespace tapmicro {

int max_threads() {
  if (const char* env = std::getenv("TAPMICRO_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace tapmicro
