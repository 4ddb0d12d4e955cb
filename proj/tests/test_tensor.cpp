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

#include <cmath>
#include <functional>
#include <vector>

#include "capseg/common.hpp"
#include "capseg/tensor.hpp"

using namespace capseg;
using namespace capseg::ad;

namespace {

Tensor random_leaf(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

// max relative error between analytic gradient and central finite differences
double fd_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-6) {
  Tensor y = f(x);
  auto gs = grad(y, {x}, false);
  const auto& g = gs[0].value();
  double worst = 0.0;
  for (size_t i = 0; i < x.value().size(); ++i) {
    const double keep = x.value()[i];
    x.mutable_value()[i] = keep + eps;
    const double fp = f(x).item();
    x.mutable_value()[i] = keep - eps;
    const double fm = f(x).item();
    x.mutable_value()[i] = keep;
    const double fd = (fp - fm) / (2.0 * eps);
    const double rel = std::fabs(g[i] - fd) / std::max({std::fabs(fd), std::fabs(g[i]), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace

TEST_CASE("first-order gradients match finite differences") {
  Rng rng(3);

  SUBCASE("elementwise chain") {
    Tensor x = random_leaf({3, 4}, rng);
    auto f = [](const Tensor& t) {
      return mean_all(mul(sigmoid(t), add_scalar(vtanh(mul_scalar(t, 0.7)), 1.5)));
    };
    CHECK(fd_check(f, x) < 1e-6);
  }

  SUBCASE("matmul + softmax + reductions") {
    Tensor a = random_leaf({4, 6}, rng);
    Tensor b = random_leaf({6, 5}, rng, false);
    auto f = [&](const Tensor& t) {
      Tensor s = softmax_rows(matmul(t, b));
      return sum_all(mul(s, s));
    };
    CHECK(fd_check(f, a) < 1e-6);
  }

  SUBCASE("slices, concat, broadcast") {
    Tensor x = random_leaf({5, 8}, rng);
    auto f = [](const Tensor& t) {
      Tensor left = slice_cols(t, 0, 3);
      Tensor right = slice_cols(t, 3, 8);
      Tensor sr = sum_rows(right);
      Tensor y = mul(left, slice_cols(broadcast_col(sr, 5), 0, 3));
      return mean_all(concat_rows({y, mul_scalar(y, -0.5)}));
    };
    CHECK(fd_check(f, x) < 1e-6);
  }

  SUBCASE("softplus, sqrt, log, abs, square, reciprocal") {
    Tensor x = random_leaf({2, 7}, rng);
    for (auto& v : x.mutable_value()) v = 0.5 + std::fabs(v);  // keep positive domains happy
    auto f = [](const Tensor& t) {
      Tensor u = add(softplus(t), vsqrt(t));
      u = add(u, vlog(add_scalar(square(t), 1.0)));
      u = add(u, vabs(add_scalar(t, -1.0)));
      return mean_all(mul(u, reciprocal(add_scalar(t, 2.0))));
    };
    CHECK(fd_check(f, x) < 1e-6);
  }

  SUBCASE("upsample path") {
    Tensor x = random_leaf({3, 16}, rng);
    auto f = [](const Tensor& t) {
      Tensor up = upsample_bilinear(t, 4, 12, 12);
      return mean_all(square(up));
    };
    CHECK(fd_check(f, x) < 1e-6);
  }

  SUBCASE("min/max subgradients") {
    Tensor x = random_leaf({4, 4}, rng);
    auto f = [](const Tensor& t) {
      return add(vmax_all(mul(t, t)), mul_scalar(vmin_all(t), 2.0));
    };
    CHECK(fd_check(f, x) < 1e-6);
  }
}

TEST_CASE("grad of unreachable input is a zero tensor") {
  Tensor x = Tensor::leaf({2}, {1.0, 2.0}, true);
  Tensor z = Tensor::leaf({2}, {3.0, 4.0}, true);
  Tensor y = sum_all(mul(x, x));
  auto gs = grad(y, {x, z}, false);
  CHECK(gs[1].value() == std::vector<double>{0.0, 0.0});
  CHECK(gs[0].value()[0] == doctest::Approx(2.0));
}

TEST_CASE("create_graph gives differentiable gradients (double backward)") {
  SUBCASE("d2/dx2 of x^3 is 6x") {
    Tensor x = Tensor::leaf({1}, {1.7}, true);
    Tensor y = mul(x, mul(x, x));
    auto g1 = grad(y, {x}, true);
    CHECK(g1[0].item() == doctest::Approx(3.0 * 1.7 * 1.7).epsilon(1e-12));
    auto g2 = grad(g1[0], {x}, false);
    CHECK(g2[0].item() == doctest::Approx(6.0 * 1.7).epsilon(1e-12));
  }

  SUBCASE("hessian-vector product of quadratic form") {
    // f(x) = 0.5 x^T A x with symmetric A; grad = A x; d(grad . v)/dx = A v
    Rng rng(5);
    Tensor a_raw = random_leaf({4, 4}, rng, false);
    Tensor a = mul_scalar(add(a_raw, transpose(a_raw)), 0.5).detach();
    Tensor x = random_leaf({4, 1}, rng);
    Tensor v = random_leaf({4, 1}, rng, false);

    Tensor f = mul_scalar(sum_all(mul(x, matmul(a, x))), 0.5);
    auto g = grad(f, {x}, true);
    Tensor gv = sum_all(mul(g[0], v));
    auto hv = grad(gv, {x}, false);

    std::vector<double> want(4, 0.0);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) want[i] += a.value()[static_cast<size_t>(i) * 4 + j] * v.value()[j];
    for (int i = 0; i < 4; ++i) CHECK(hv[0].value()[i] == doctest::Approx(want[i]).epsilon(1e-10));
  }

  SUBCASE("second order through sigmoid") {
    // g(x) = d/dx sigmoid(x) = s(1-s); g'(x) = s(1-s)(1-2s)
    Tensor x = Tensor::leaf({1}, {0.3}, true);
    auto g1 = grad(mean_all(sigmoid(x)), {x}, true);
    auto g2 = grad(g1[0], {x}, false);
    const double s = 1.0 / (1.0 + std::exp(-0.3));
    CHECK(g1[0].item() == doctest::Approx(s * (1 - s)).epsilon(1e-12));
    CHECK(g2[0].item() == doctest::Approx(s * (1 - s) * (1 - 2 * s)).epsilon(1e-10));
  }

  SUBCASE("second order through softmax") {
    Rng rng(9);
    Tensor x = random_leaf({2, 3}, rng);
    Tensor w = random_leaf({2, 3}, rng, false);
    auto outer = [&](const Tensor& t) {
      auto g1 = grad(sum_all(mul(softmax_rows(t), w)), {t}, true);
      return sum_all(square(g1[0]));
    };
    // finite-difference the scalar |g1|^2 to validate its gradient
    Tensor val = outer(x);
    auto g = grad(val, {x}, false);
    double eps = 1e-6, worst = 0.0;
    for (size_t i = 0; i < x.value().size(); ++i) {
      double keep = x.value()[i];
      x.mutable_value()[i] = keep + eps;
      double fp = outer(x).item();
      x.mutable_value()[i] = keep - eps;
      double fm = outer(x).item();
      x.mutable_value()[i] = keep;
      double fd = (fp - fm) / (2 * eps);
      worst = std::max(worst, std::fabs(fd - g[0].value()[i]) /
                                  std::max({std::fabs(fd), std::fabs(g[0].value()[i]), 1e-8}));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("no_grad guard detaches results") {
  Tensor x = Tensor::leaf({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard ng;
    y = sum_all(mul(x, x));
  }
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("row-stochastic softmax output") {
  Rng rng(21);
  Tensor x = random_leaf({7, 9}, rng, false);
  Tensor s = softmax_rows(x);
  for (int i = 0; i < 7; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 9; ++j) sum += s.value()[static_cast<size_t>(i) * 9 + j];
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}
