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

#include "capseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace capseg::kern {

namespace {
// below this many flops the omp fork/join overhead dominates
constexpr long long kParallelFlops = 1 << 15;

struct Taps {
  int i0, i1;
  double w0, w1;
};

// align_corners-style bilinear taps from a g-length axis to an n-length axis
inline Taps axis_taps(int out, int n_out, int g) {
  Taps t;
  if (n_out == 1 || g == 1) {
    t.i0 = 0;
    t.i1 = 0;
    t.w0 = 1.0;
    t.w1 = 0.0;
    return t;
  }
  const double pos = static_cast<double>(out) * (g - 1) / (n_out - 1);
  t.i0 = static_cast<int>(pos);
  if (t.i0 >= g - 1) t.i0 = g - 2;
  t.i1 = t.i0 + 1;
  t.w1 = pos - t.i0;
  t.w0 = 1.0 - t.w1;
  return t;
}
}  // namespace

namespace ref {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) c[static_cast<size_t>(i) * n + j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double aip = a[static_cast<size_t>(i) * k + p];
      const double* brow = b + static_cast<size_t>(p) * n;
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = a[static_cast<size_t>(i) * k + p];
      const double* brow = b + static_cast<size_t>(p) * n;
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double* xr = x + static_cast<size_t>(i) * cols;
    double* yr = y + static_cast<size_t>(i) * cols;
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

void upsample_rows(const double* x, double* y, int nrows, int g, int h, int w) {
  for (int r = 0; r < nrows; ++r) {
    const double* xr = x + static_cast<size_t>(r) * g * g;
    double* yr = y + static_cast<size_t>(r) * h * w;
    for (int i = 0; i < h; ++i) {
      const Taps ti = axis_taps(i, h, g);
      for (int j = 0; j < w; ++j) {
        const Taps tj = axis_taps(j, w, g);
        yr[static_cast<size_t>(i) * w + j] =
            ti.w0 * (tj.w0 * xr[ti.i0 * g + tj.i0] + tj.w1 * xr[ti.i0 * g + tj.i1]) +
            ti.w1 * (tj.w0 * xr[ti.i1 * g + tj.i0] + tj.w1 * xr[ti.i1 * g + tj.i1]);
      }
    }
  }
}

void downsample_rows(const double* gy, double* gx, int nrows, int g, int h, int w) {
  std::memset(gx, 0, sizeof(double) * static_cast<size_t>(nrows) * g * g);
  for (int r = 0; r < nrows; ++r) {
    const double* gyr = gy + static_cast<size_t>(r) * h * w;
    double* gxr = gx + static_cast<size_t>(r) * g * g;
    for (int i = 0; i < h; ++i) {
      const Taps ti = axis_taps(i, h, g);
      for (int j = 0; j < w; ++j) {
        const Taps tj = axis_taps(j, w, g);
        const double v = gyr[static_cast<size_t>(i) * w + j];
        gxr[ti.i0 * g + tj.i0] += ti.w0 * tj.w0 * v;
        gxr[ti.i0 * g + tj.i1] += ti.w0 * tj.w1 * v;
        gxr[ti.i1 * g + tj.i0] += ti.w1 * tj.w0 * v;
        gxr[ti.i1 * g + tj.i1] += ti.w1 * tj.w1 * v;
      }
    }
  }
}

}  // namespace ref

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  const long long flops = 2ll * m * k * n;
  if (flops < kParallelFlops) {
    ref::matmul(a, b, c, m, k, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double aip = a[static_cast<size_t>(i) * k + p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  const long long flops = 2ll * m * k * n;
  if (flops < kParallelFlops) {
    ref::matmul_acc(a, b, c, m, k, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double aip = a[static_cast<size_t>(i) * k + p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
  if (static_cast<long long>(rows) * cols < kParallelFlops / 8) {
    ref::softmax_rows(x, y, rows, cols);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < rows; ++i) {
    ref::softmax_rows(x + static_cast<size_t>(i) * cols, y + static_cast<size_t>(i) * cols, 1,
                      cols);
  }
}

void upsample_rows(const double* x, double* y, int nrows, int g, int h, int w) {
  if (static_cast<long long>(nrows) * h * w < kParallelFlops / 4) {
    ref::upsample_rows(x, y, nrows, g, h, w);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int r = 0; r < nrows; ++r) {
    ref::upsample_rows(x + static_cast<size_t>(r) * g * g, y + static_cast<size_t>(r) * h * w, 1,
                       g, h, w);
  }
}

void downsample_rows(const double* gy, double* gx, int nrows, int g, int h, int w) {
  if (static_cast<long long>(nrows) * h * w < kParallelFlops / 4) {
    ref::downsample_rows(gy, gx, nrows, g, h, w);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int r = 0; r < nrows; ++r) {
    ref::downsample_rows(gy + static_cast<size_t>(r) * h * w, gx + static_cast<size_t>(r) * g * g,
                         1, g, h, w);
  }
}

}  // namespace capseg::kern
