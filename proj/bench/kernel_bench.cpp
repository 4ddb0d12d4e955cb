// Copyright 2026 the capseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Timing comparison of the omp kernels against the serial reference.

#include <chrono>
#include <cstdio>
#include <vector>

#include "capseg/common.hpp"
#include "capseg/kernels.hpp"

using namespace capseg;

namespace {

template <typename F>
double time_loop(F&& f, int reps) {
  f();  // warm
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

std::vector<double> random_vec(size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

int main() {
  Rng rng(1);
  std::printf("%-28s %12s %12s %8s\n", "kernel", "serial (ms)", "omp (ms)", "speedup");

  {
    const int m = 256, k = 256, n = 256;
    auto a = random_vec(static_cast<size_t>(m) * k, rng);
    auto b = random_vec(static_cast<size_t>(k) * n, rng);
    std::vector<double> c(static_cast<size_t>(m) * n);
    const double ts = time_loop([&] { kern::ref::matmul(a.data(), b.data(), c.data(), m, k, n); }, 10);
    const double tp = time_loop([&] { kern::matmul(a.data(), b.data(), c.data(), m, k, n); }, 10);
    std::printf("%-28s %12.3f %12.3f %8.2fx\n", "matmul 256x256x256", ts * 1e3, tp * 1e3, ts / tp);
  }
  {
    const int rows = 4096, cols = 64;
    auto x = random_vec(static_cast<size_t>(rows) * cols, rng);
    std::vector<double> y(x.size());
    const double ts = time_loop([&] { kern::ref::softmax_rows(x.data(), y.data(), rows, cols); }, 20);
    const double tp = time_loop([&] { kern::softmax_rows(x.data(), y.data(), rows, cols); }, 20);
    std::printf("%-28s %12.3f %12.3f %8.2fx\n", "softmax 4096x64", ts * 1e3, tp * 1e3, ts / tp);
  }
  {
    const int nrows = 64, g = 8, h = 64, w = 64;
    auto x = random_vec(static_cast<size_t>(nrows) * g * g, rng);
    std::vector<double> y(static_cast<size_t>(nrows) * h * w);
    const double ts =
        time_loop([&] { kern::ref::upsample_rows(x.data(), y.data(), nrows, g, h, w); }, 20);
    const double tp = time_loop([&] { kern::upsample_rows(x.data(), y.data(), nrows, g, h, w); }, 20);
    std::printf("%-28s %12.3f %12.3f %8.2fx\n", "upsample 64x(8->64)", ts * 1e3, tp * 1e3, ts / tp);

    std::vector<double> gx(x.size());
    const double ds =
        time_loop([&] { kern::ref::downsample_rows(y.data(), gx.data(), nrows, g, h, w); }, 20);
    const double dp =
        time_loop([&] { kern::downsample_rows(y.data(), gx.data(), nrows, g, h, w); }, 20);
    std::printf("%-28s %12.3f %12.3f %8.2fx\n", "downsample 64x(64->8)", ds * 1e3, dp * 1e3,
                ds / dp);
  }
  return 0;
}
