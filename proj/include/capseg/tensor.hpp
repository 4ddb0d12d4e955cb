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

#ifndef CAPSEG_TENSOR_HPP
#define CAPSEG_TENSOR_HPP

#include <functional>
#include <memory>
#include <vector>

#include "capseg/common.hpp"

namespace capseg::ad {

// Reverse-mode autodiff over dense double tensors, define-by-run.
//
// Backward functions are themselves written in terms of recorded ops, so
// gradients returned by grad(..., /*create_graph=*/true) are ordinary graph
// nodes and can be differentiated again. That is what lets the bi-level
// outer objective differentiate through unrolled inner gradient steps.

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

class Tensor;
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& upstream)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;  // empty for leaves and detached results
  const char* op = "leaf";
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  long long size() const { return numel(n_->shape); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  const std::vector<double>& value() const { return n_->value; }
  // mutable access for optimizer updates on leaves; never call on graph
  // interior nodes that something else may still read
  std::vector<double>& mutable_value() { return n_->value; }

  double item() const {
    contract_require(size() == 1, "item() on non-scalar tensor");
    return n_->value[0];
  }

  Tensor detach() const;

  std::shared_ptr<Node> node() const { return n_; }
  Node* raw() const { return n_.get(); }

  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

// Whether newly built ops record parents/backward. grad() flips this to the
// create_graph flag while running backward functions.
bool grad_mode();
void set_grad_mode(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { set_grad_mode(false); }
  ~NoGradGuard() { set_grad_mode(prev_); }
  bool prev_;
};

// --- elementwise ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor vexp(const Tensor& a);
Tensor vlog(const Tensor& a);  // caller keeps inputs positive
Tensor vsqrt(const Tensor& a);
Tensor vabs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor vtanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);  // log(1 + e^x), stable

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]

// --- shape ---
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, int r0, int r1);  // rows [r0, r1)
Tensor slice_cols(const Tensor& a, int c0, int c1);  // cols [c0, c1)
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// --- reductions / broadcasts ---
Tensor sum_all(const Tensor& a);   // -> [1]
Tensor mean_all(const Tensor& a);  // -> [1]
Tensor sum_rows(const Tensor& a);  // [m,n] -> [m]
Tensor vmin_all(const Tensor& a);  // -> [1], subgradient to first argmin
Tensor vmax_all(const Tensor& a);  // -> [1], subgradient to first argmax
Tensor broadcast_col(const Tensor& v, int n);        // [m] -> [m,n]
Tensor broadcast_row(const Tensor& v, int m);        // [n] -> [m,n]
Tensor broadcast_full(const Tensor& s, Shape shape); // [1] -> shape

// --- fused ---
Tensor softmax_rows(const Tensor& a);  // row-stochastic over last dim of [m,n]
// each row of a is a g*g grid; bilinear resize to h*w per row: [m,g*g] -> [m,h*w]
Tensor upsample_bilinear(const Tensor& a, int g, int h, int w);
Tensor downsample_bilinear(const Tensor& a, int g, int h, int w);  // adjoint

// d(out)/d(inputs). out must be scalar. With create_graph the returned
// gradients are differentiable graph nodes. Inputs that out does not reach
// get zero tensors.
std::vector<Tensor> grad(const Tensor& out, const std::vector<Tensor>& inputs, bool create_graph);

}  // namespace capseg::ad

#endif  // CAPSEG_TENSOR_HPP
