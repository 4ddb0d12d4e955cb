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

#include <doctest.h>

#include <tuple>
#include <vector>

#include "capseg/common.hpp"
#include "capseg/kernels.hpp"

using namespace capseg;

namespace {
std::vector<double> random_vec(size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}
}  // namespace

TEST_CASE("omp matmul matches serial reference bitwise") {
  Rng rng(7);
  // sizes straddle the parallel threshold
  for (auto [m, k, n] : {std::tuple{3, 5, 4}, std::tuple{64, 192, 32}, std::tuple{128, 64, 96}}) {
    auto a = random_vec(static_cast<size_t>(m) * k, rng);
    auto b = random_vec(static_cast<size_t>(k) * n, rng);
    std::vector<double> c0(static_cast<size_t>(m) * n), c1(static_cast<size_t>(m) * n);
    kern::ref::matmul(a.data(), b.data(), c0.data(), m, k, n);
    kern::matmul(a.data(), b.data(), c1.data(), m, k, n);
    CHECK(c0 == c1);

    kern::ref::matmul_acc(a.data(), b.data(), c0.data(), m, k, n);
    kern::matmul_acc(a.data(), b.data(), c1.data(), m, k, n);
    CHECK(c0 == c1);
  }
}

TEST_CASE("omp softmax matches serial reference bitwise and rows sum to one") {
  Rng rng(11);
  const int rows = 200, cols = 64;
  auto x = random_vec(static_cast<size_t>(rows) * cols, rng);
  std::vector<double> y0(x.size()), y1(x.size());
  kern::ref::softmax_rows(x.data(), y0.data(), rows, cols);
  kern::softmax_rows(x.data(), y1.data(), rows, cols);
  CHECK(y0 == y1);
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += y0[static_cast<size_t>(i) * cols + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("omp upsample/downsample match serial reference bitwise") {
  Rng rng(13);
  const int nrows = 40, g = 8, h = 64, w = 64;
  auto x = random_vec(static_cast<size_t>(nrows) * g * g, rng);
  std::vector<double> y0(static_cast<size_t>(nrows) * h * w), y1(y0.size());
  kern::ref::upsample_rows(x.data(), y0.data(), nrows, g, h, w);
  kern::upsample_rows(x.data(), y1.data(), nrows, g, h, w);
  CHECK(y0 == y1);

  std::vector<double> gx0(x.size()), gx1(x.size());
  kern::ref::downsample_rows(y0.data(), gx0.data(), nrows, g, h, w);
  kern::downsample_rows(y0.data(), gx1.data(), nrows, g, h, w);
  CHECK(gx0 == gx1);
}

TEST_CASE("upsample preserves a constant grid") {
  const int g = 4, h = 32, w = 32;
  std::vector<double> x(static_cast<size_t>(g) * g, 3.25);
  std::vector<double> y(static_cast<size_t>(h) * w);
  kern::ref::upsample_rows(x.data(), y.data(), 1, g, h, w);
  for (double v : y) CHECK(v == doctest::Approx(3.25).epsilon(1e-15));
}

TEST_CASE("downsample is the adjoint of upsample") {
  // <U x, y> == <x, U^T y> for random x, y
  Rng rng(17);
  const int g = 6, h = 20, w = 24;
  auto x = random_vec(static_cast<size_t>(g) * g, rng);
  auto y = random_vec(static_cast<size_t>(h) * w, rng);
  std::vector<double> ux(static_cast<size_t>(h) * w), uty(static_cast<size_t>(g) * g);
  kern::ref::upsample_rows(x.data(), ux.data(), 1, g, h, w);
  kern::ref::downsample_rows(y.data(), uty.data(), 1, g, h, w);
  double lhs = 0.0, rhs = 0.0;
  for (size_t i = 0; i < ux.size(); ++i) lhs += ux[i] * y[i];
  for (size_t i = 0; i < uty.size(); ++i) rhs += x[i] * uty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}
