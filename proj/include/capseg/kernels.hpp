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

#ifndef CAPSEG_KERNELS_HPP
#define CAPSEG_KERNELS_HPP

#include <cstddef>

namespace capseg::kern {

// Dense numeric kernels. The omp variants partition disjoint output
// elements across threads; each element is accumulated in a fixed serial
// order, so results are bitwise identical to the serial reference for any
// thread count. The serial reference lives in kern::ref and is kept for
// tests and the kernel benchmark.

namespace ref {
void matmul(const double* a, const double* b, double* c, int m, int k, int n);
// c += a * b
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);
void softmax_rows(const double* x, double* y, int rows, int cols);
// bilinear resize of each row, interpreted as a g x g grid, to h x w
void upsample_rows(const double* x, double* y, int nrows, int g, int h, int w);
// adjoint of upsample_rows
void downsample_rows(const double* gy, double* gx, int nrows, int g, int h, int w);
}  // namespace ref

void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);
void softmax_rows(const double* x, double* y, int rows, int cols);
void upsample_rows(const double* x, double* y, int nrows, int g, int h, int w);
void downsample_rows(const double* gy, double* gx, int nrows, int g, int h, int w);

}  // namespace capseg::kern

#endif  // CAPSEG_KERNELS_HPP
