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

#include "capseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include "capseg/kernels.hpp"

namespace capseg::ad {

namespace {

thread_local bool g_grad_mode = true;

Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool track = false;
  if (g_grad_mode) {
    for (const auto& p : parents)
      if (p.requires_grad()) track = true;
  }
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(n));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  contract_require(a.shape() == b.shape(), std::string(op) + ": shape mismatch");
}

// value-sharing handle to an op's own output, used inside backward closures.
// Holding a weak_ptr avoids a node owning itself through its closure.
Tensor self_tensor(const std::weak_ptr<Node>& w) {
  auto sp = w.lock();
  contract_require(static_cast<bool>(sp), "backward ran on a dead node");
  return Tensor::wrap(std::move(sp));
}

Tensor embed_rows(const Tensor& a, int r0, int m_total);
Tensor embed_cols(const Tensor& a, int c0, int n_total);

}  // namespace

bool grad_mode() { return g_grad_mode; }
void set_grad_mode(bool on) { g_grad_mode = on; }

Tensor Tensor::leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  contract_require(static_cast<long long>(value.size()) == numel(shape),
                   "leaf: value size does not match shape");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Tensor::wrap(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(numel(shape)), 0.0);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(numel(shape)), fill);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double v) { return leaf({1}, {v}); }

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = n_->shape;
  n->value = n_->value;
  n->requires_grad = false;
  return Tensor::wrap(std::move(n));
}

// --- elementwise ---

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> v(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  return make_op("add", a.shape(), std::move(v), {a, b},
                 [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> v(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  return make_op("sub", a.shape(), std::move(v), {a, b},
                 [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> v(a.value());
  const auto& bv = b.value();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  return make_op("mul", a.shape(), std::move(v), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{mul(g, b), mul(g, a)};
  });
}

Tensor neg(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = -x;
  return make_op("neg", a.shape(), std::move(v), {a},
                 [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.value());
  for (auto& x : v) x += c;
  return make_op("add_scalar", a.shape(), std::move(v), {a},
                 [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.value());
  for (auto& x : v) x *= c;
  return make_op("mul_scalar", a.shape(), std::move(v), {a},
                 [c](const Tensor& g) { return std::vector<Tensor>{mul_scalar(g, c)}; });
}

Tensor vexp(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = std::exp(x);
  auto n = make_op("exp", a.shape(), std::move(v), {a}, nullptr);
  if (n.requires_grad()) {
    std::weak_ptr<Node> self = n.node();
    n.raw()->backward = [self](const Tensor& g) {
      return std::vector<Tensor>{mul(g, self_tensor(self))};
    };
  }
  return n;
}

Tensor vlog(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = std::log(x);
  return make_op("log", a.shape(), std::move(v), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul(g, reciprocal(a))};
  });
}

Tensor vsqrt(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = std::sqrt(x);
  auto n = make_op("sqrt", a.shape(), std::move(v), {a}, nullptr);
  if (n.requires_grad()) {
    std::weak_ptr<Node> self = n.node();
    n.raw()->backward = [self](const Tensor& g) {
      Tensor y = self_tensor(self);
      return std::vector<Tensor>{mul(g, mul_scalar(reciprocal(y), 0.5))};
    };
  }
  return n;
}

Tensor vabs(const Tensor& a) {
  std::vector<double> v(a.value());
  std::vector<double> sgn(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    sgn[i] = (v[i] > 0.0) ? 1.0 : (v[i] < 0.0 ? -1.0 : 0.0);
    v[i] = std::fabs(v[i]);
  }
  Tensor sign_const = Tensor::leaf(a.shape(), std::move(sgn));
  return make_op("abs", a.shape(), std::move(v), {a}, [sign_const](const Tensor& g) {
    return std::vector<Tensor>{mul(g, sign_const)};
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x *= x;
  return make_op("square", a.shape(), std::move(v), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul_scalar(mul(g, a), 2.0)};
  });
}

Tensor reciprocal(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = 1.0 / x;
  auto n = make_op("reciprocal", a.shape(), std::move(v), {a}, nullptr);
  if (n.requires_grad()) {
    std::weak_ptr<Node> self = n.node();
    n.raw()->backward = [self](const Tensor& g) {
      Tensor y = self_tensor(self);
      return std::vector<Tensor>{neg(mul(g, square(y)))};
    };
  }
  return n;
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = (x >= 0.0) ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  auto n = make_op("sigmoid", a.shape(), std::move(v), {a}, nullptr);
  if (n.requires_grad()) {
    std::weak_ptr<Node> self = n.node();
    n.raw()->backward = [self](const Tensor& g) {
      Tensor y = self_tensor(self);
      return std::vector<Tensor>{mul(g, mul(y, add_scalar(neg(y), 1.0)))};
    };
  }
  return n;
}

Tensor vtanh(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = std::tanh(x);
  auto n = make_op("tanh", a.shape(), std::move(v), {a}, nullptr);
  if (n.requires_grad()) {
    std::weak_ptr<Node> self = n.node();
    n.raw()->backward = [self](const Tensor& g) {
      Tensor y = self_tensor(self);
      return std::vector<Tensor>{mul(g, add_scalar(neg(square(y)), 1.0))};
    };
  }
  return n;
}

Tensor relu(const Tensor& a) {
  std::vector<double> v(a.value());
  std::vector<double> mask(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    mask[i] = v[i] > 0.0 ? 1.0 : 0.0;
    if (v[i] < 0.0) v[i] = 0.0;
  }
  Tensor mask_const = Tensor::leaf(a.shape(), std::move(mask));
  return make_op("relu", a.shape(), std::move(v), {a}, [mask_const](const Tensor& g) {
    return std::vector<Tensor>{mul(g, mask_const)};
  });
}

Tensor softplus(const Tensor& a) {
  std::vector<double> v(a.value());
  for (auto& x : v) x = std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
  return make_op("softplus", a.shape(), std::move(v), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul(g, sigmoid(a))};
  });
}

// --- linear algebra ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  contract_require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                   "matmul: incompatible shapes");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<size_t>(m) * n);
  kern::matmul(a.value().data(), b.value().data(), v.data(), m, k, n);
  return make_op("matmul", {m, n}, std::move(v), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

Tensor transpose(const Tensor& a) {
  contract_require(a.ndim() == 2, "transpose: needs 2-d tensor");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(static_cast<size_t>(m) * n);
  const auto& av = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      v[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
  return make_op("transpose", {n, m}, std::move(v), {a},
                 [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

// --- shape ---

Tensor reshape(const Tensor& a, Shape shape) {
  contract_require(numel(shape) == a.size(), "reshape: size mismatch");
  Shape old = a.shape();
  return make_op("reshape", std::move(shape), a.value(), {a}, [old](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, old)};
  });
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  contract_require(a.ndim() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.dim(0), "slice_rows: bad range");
  const int n = a.dim(1), m = a.dim(0);
  std::vector<double> v(a.value().begin() + static_cast<size_t>(r0) * n,
                        a.value().begin() + static_cast<size_t>(r1) * n);
  return make_op("slice_rows", {r1 - r0, n}, std::move(v), {a}, [r0, m](const Tensor& g) {
    return std::vector<Tensor>{embed_rows(g, r0, m)};
  });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  contract_require(a.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.dim(1), "slice_cols: bad range");
  const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  std::vector<double> v(static_cast<size_t>(m) * w);
  const auto& av = a.value();
  for (int i = 0; i < m; ++i)
    std::memcpy(&v[static_cast<size_t>(i) * w], &av[static_cast<size_t>(i) * n + c0],
                sizeof(double) * static_cast<size_t>(w));
  return make_op("slice_cols", {m, w}, std::move(v), {a}, [c0, n](const Tensor& g) {
    return std::vector<Tensor>{embed_cols(g, c0, n)};
  });
}

namespace {

Tensor embed_rows(const Tensor& a, int r0, int m_total) {
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(static_cast<size_t>(m_total) * n, 0.0);
  std::memcpy(&v[static_cast<size_t>(r0) * n], a.value().data(),
              sizeof(double) * static_cast<size_t>(m) * n);
  return make_op("embed_rows", {m_total, n}, std::move(v), {a}, [r0, m](const Tensor& g) {
    return std::vector<Tensor>{slice_rows(g, r0, r0 + m)};
  });
}

Tensor embed_cols(const Tensor& a, int c0, int n_total) {
  const int m = a.dim(0), w = a.dim(1);
  std::vector<double> v(static_cast<size_t>(m) * n_total, 0.0);
  const auto& av = a.value();
  for (int i = 0; i < m; ++i)
    std::memcpy(&v[static_cast<size_t>(i) * n_total + c0], &av[static_cast<size_t>(i) * w],
                sizeof(double) * static_cast<size_t>(w));
  return make_op("embed_cols", {m, n_total}, std::move(v), {a}, [c0, w](const Tensor& g) {
    return std::vector<Tensor>{slice_cols(g, c0, c0 + w)};
  });
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) {
  contract_require(!parts.empty(), "concat_rows: empty");
  const int n = parts[0].dim(1);
  int m = 0;
  for (const auto& p : parts) {
    contract_require(p.ndim() == 2 && p.dim(1) == n, "concat_rows: column mismatch");
    m += p.dim(0);
  }
  std::vector<double> v;
  v.reserve(static_cast<size_t>(m) * n);
  std::vector<int> row_of;
  for (const auto& p : parts) {
    v.insert(v.end(), p.value().begin(), p.value().end());
    row_of.push_back(p.dim(0));
  }
  return make_op("concat_rows", {m, n}, std::move(v), parts, [row_of](const Tensor& g) {
    std::vector<Tensor> out;
    int r = 0;
    for (int rows : row_of) {
      out.push_back(slice_rows(g, r, r + rows));
      r += rows;
    }
    return out;
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  contract_require(!parts.empty(), "concat_cols: empty");
  const int m = parts[0].dim(0);
  int n = 0;
  std::vector<int> col_of;
  for (const auto& p : parts) {
    contract_require(p.ndim() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
    n += p.dim(1);
    col_of.push_back(p.dim(1));
  }
  std::vector<double> v(static_cast<size_t>(m) * n);
  int c = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    const auto& pv = p.value();
    for (int i = 0; i < m; ++i)
      std::memcpy(&v[static_cast<size_t>(i) * n + c], &pv[static_cast<size_t>(i) * w],
                  sizeof(double) * static_cast<size_t>(w));
    c += w;
  }
  return make_op("concat_cols", {m, n}, std::move(v), parts, [col_of](const Tensor& g) {
    std::vector<Tensor> out;
    int c0 = 0;
    for (int w : col_of) {
      out.push_back(slice_cols(g, c0, c0 + w));
      c0 += w;
    }
    return out;
  });
}

// --- reductions / broadcasts ---

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  Shape shape = a.shape();
  return make_op("sum_all", {1}, {s}, {a}, [shape](const Tensor& g) {
    return std::vector<Tensor>{broadcast_full(g, shape)};
  });
}

Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  return mul_scalar(sum_all(a), inv);
}

Tensor sum_rows(const Tensor& a) {
  contract_require(a.ndim() == 2, "sum_rows: needs 2-d");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(static_cast<size_t>(m));
  const auto& av = a.value();
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += av[static_cast<size_t>(i) * n + j];
    v[static_cast<size_t>(i)] = s;
  }
  return make_op("sum_rows", {m}, std::move(v), {a}, [n](const Tensor& g) {
    return std::vector<Tensor>{broadcast_col(g, n)};
  });
}

Tensor vmin_all(const Tensor& a) {
  const auto& av = a.value();
  size_t arg = 0;
  for (size_t i = 1; i < av.size(); ++i)
    if (av[i] < av[arg]) arg = i;
  std::vector<double> hot(av.size(), 0.0);
  hot[arg] = 1.0;
  Tensor onehot = Tensor::leaf(a.shape(), std::move(hot));
  return make_op("min_all", {1}, {av[arg]}, {a}, [onehot](const Tensor& g) {
    return std::vector<Tensor>{mul(onehot, broadcast_full(g, onehot.shape()))};
  });
}

Tensor vmax_all(const Tensor& a) {
  const auto& av = a.value();
  size_t arg = 0;
  for (size_t i = 1; i < av.size(); ++i)
    if (av[i] > av[arg]) arg = i;
  std::vector<double> hot(av.size(), 0.0);
  hot[arg] = 1.0;
  Tensor onehot = Tensor::leaf(a.shape(), std::move(hot));
  return make_op("max_all", {1}, {av[arg]}, {a}, [onehot](const Tensor& g) {
    return std::vector<Tensor>{mul(onehot, broadcast_full(g, onehot.shape()))};
  });
}

Tensor broadcast_col(const Tensor& v, int n) {
  contract_require(v.ndim() == 1, "broadcast_col: needs 1-d");
  const int m = v.dim(0);
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto& vv = v.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] = vv[static_cast<size_t>(i)];
  return make_op("broadcast_col", {m, n}, std::move(out), {v}, [](const Tensor& g) {
    return std::vector<Tensor>{sum_rows(g)};
  });
}

Tensor broadcast_row(const Tensor& v, int m) {
  contract_require(v.ndim() == 1, "broadcast_row: needs 1-d");
  const int n = v.dim(0);
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto& vv = v.value();
  for (int i = 0; i < m; ++i)
    std::memcpy(&out[static_cast<size_t>(i) * n], vv.data(), sizeof(double) * static_cast<size_t>(n));
  return make_op("broadcast_row", {m, n}, std::move(out), {v}, [](const Tensor& g) {
    return std::vector<Tensor>{sum_rows(transpose(g))};
  });
}

Tensor broadcast_full(const Tensor& s, Shape shape) {
  contract_require(s.size() == 1, "broadcast_full: needs scalar");
  std::vector<double> out(static_cast<size_t>(numel(shape)), s.value()[0]);
  return make_op("broadcast_full", std::move(shape), std::move(out), {s}, [](const Tensor& g) {
    return std::vector<Tensor>{sum_all(g)};
  });
}

// --- fused ---

Tensor softmax_rows(const Tensor& a) {
  contract_require(a.ndim() == 2, "softmax_rows: needs 2-d");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(static_cast<size_t>(m) * n);
  kern::softmax_rows(a.value().data(), v.data(), m, n);
  auto out = make_op("softmax_rows", {m, n}, std::move(v), {a}, nullptr);
  if (out.requires_grad()) {
    std::weak_ptr<Node> self = out.node();
    out.raw()->backward = [self, n](const Tensor& g) {
      Tensor y = self_tensor(self);
      Tensor gy = mul(g, y);
      Tensor corr = broadcast_col(sum_rows(gy), n);
      return std::vector<Tensor>{sub(gy, mul(y, corr))};
    };
  }
  return out;
}

Tensor upsample_bilinear(const Tensor& a, int g, int h, int w) {
  contract_require(a.ndim() == 2 && a.dim(1) == g * g, "upsample_bilinear: needs [m, g*g]");
  const int m = a.dim(0);
  std::vector<double> v(static_cast<size_t>(m) * h * w);
  kern::upsample_rows(a.value().data(), v.data(), m, g, h, w);
  return make_op("upsample_bilinear", {m, h * w}, std::move(v), {a},
                 [g, h, w](const Tensor& gr) {
                   return std::vector<Tensor>{downsample_bilinear(gr, g, h, w)};
                 });
}

Tensor downsample_bilinear(const Tensor& a, int g, int h, int w) {
  contract_require(a.ndim() == 2 && a.dim(1) == h * w, "downsample_bilinear: needs [m, h*w]");
  const int m = a.dim(0);
  std::vector<double> v(static_cast<size_t>(m) * g * g);
  kern::downsample_rows(a.value().data(), v.data(), m, g, h, w);
  return make_op("downsample_bilinear", {m, g * g}, std::move(v), {a},
                 [g, h, w](const Tensor& gr) {
                   return std::vector<Tensor>{upsample_bilinear(gr, g, h, w)};
                 });
}

// --- backward driver ---

std::vector<Tensor> grad(const Tensor& out, const std::vector<Tensor>& inputs, bool create_graph) {
  contract_require(out.defined() && out.size() == 1, "grad: output must be a scalar");

  std::vector<Node*> topo;
  if (out.requires_grad()) {
    struct Frame {
      Node* n;
      size_t next;
    };
    std::unordered_set<Node*> visited;
    std::vector<Frame> stack;
    stack.push_back({out.raw(), 0});
    visited.insert(out.raw());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        Node* p = f.n->parents[f.next++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        topo.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, Tensor> acc;
  acc.emplace(out.raw(), Tensor::full({1}, 1.0));

  const bool prev = grad_mode();
  set_grad_mode(create_graph);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    auto found = acc.find(n);
    if (found == acc.end() || !n->backward) continue;
    std::vector<Tensor> pg = n->backward(found->second);
    contract_require(pg.size() == n->parents.size(), "grad: backward arity mismatch");
    for (size_t i = 0; i < pg.size(); ++i) {
      Node* p = n->parents[i].get();
      if (!p->requires_grad || !pg[i].defined()) continue;
      auto slot = acc.find(p);
      if (slot == acc.end())
        acc.emplace(p, pg[i]);
      else
        slot->second = add(slot->second, pg[i]);
    }
  }
  set_grad_mode(prev);

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto f = acc.find(in.raw());
    if (f == acc.end()) {
      result.push_back(Tensor::zeros(in.shape()));
    } else {
      result.push_back(f->second);
    }
  }
  return result;
}

}  // namespace capseg::ad
