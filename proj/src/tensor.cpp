// Copyright (c) 2026 The freesvc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "freesvc/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

namespace freesvc::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

bool needs_graph(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Builds the output node; records inputs and the backward closure only when
// some input participates in differentiation.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (needs_graph(inputs)) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) {
      node->inputs.push_back(t->defined() ? t->node_ptr() : nullptr);
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient sink for input i, or nullptr when that input is not tracked.
std::vector<double>* sink(Node& self, size_t i) {
  Node* in = self.inputs[i].get();
  if (in == nullptr || !in->requires_grad) return nullptr;
  return &in->grad_buffer();
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  const auto& in = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {&x}, [deriv](Node& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    const auto& xin = self.inputs[0]->value;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      (*g)[i] += self.grad[i] * deriv(xin[i], self.value[i]);
    }
  });
}

// Broadcast bookkeeping for rank <= 4 (shapes left-padded with ones).
struct Broadcast {
  Shape out;
  std::array<int64_t, 4> dims{1, 1, 1, 1};
  std::array<int64_t, 4> sa{0, 0, 0, 0};
  std::array<int64_t, 4> sb{0, 0, 0, 0};
};

Broadcast broadcast_plan(const Shape& a, const Shape& b) {
  require(a.size() == b.size() && a.size() <= 4,
          "broadcast: ranks must match and be <= 4, got " + shape_str(a) +
              " and " + shape_str(b));
  Broadcast plan;
  const size_t r = a.size();
  plan.out.resize(r);
  std::array<int64_t, 4> pa{1, 1, 1, 1}, pb{1, 1, 1, 1};
  for (size_t i = 0; i < r; ++i) {
    pa[4 - r + i] = a[i];
    pb[4 - r + i] = b[i];
  }
  int64_t stride_a = 1, stride_b = 1;
  for (int i = 3; i >= 0; --i) {
    require(pa[i] == pb[i] || pa[i] == 1 || pb[i] == 1,
            "broadcast: incompatible shapes " + shape_str(a) + " and " +
                shape_str(b));
    plan.dims[i] = std::max(pa[i], pb[i]);
    plan.sa[i] = pa[i] == 1 ? 0 : stride_a;
    plan.sb[i] = pb[i] == 1 ? 0 : stride_b;
    stride_a *= pa[i];
    stride_b *= pb[i];
  }
  for (size_t i = 0; i < r; ++i) plan.out[i] = plan.dims[4 - r + i];
  return plan;
}

template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  int64_t o = 0;
  for (int64_t i0 = 0; i0 < p.dims[0]; ++i0)
    for (int64_t i1 = 0; i1 < p.dims[1]; ++i1)
      for (int64_t i2 = 0; i2 < p.dims[2]; ++i2) {
        int64_t ia = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2];
        int64_t ib = i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2];
        for (int64_t i3 = 0; i3 < p.dims[3]; ++i3, ++o) {
          f(o, ia + i3 * p.sa[3], ib + i3 * p.sb[3]);
        }
      }
}

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
      out[i] = op == BinOp::kAdd   ? av[i] + bv[i]
               : op == BinOp::kSub ? av[i] - bv[i]
                                   : av[i] * bv[i];
    }
    return make_result(a.shape(), std::move(out), {&a, &b}, [op](Node& self) {
      auto* ga = sink(self, 0);
      auto* gb = sink(self, 1);
      const auto& g = self.grad;
      if (op == BinOp::kMul) {
        const auto& x = self.inputs[0]->value;
        const auto& y = self.inputs[1]->value;
        for (size_t i = 0; i < g.size(); ++i) {
          if (ga) (*ga)[i] += g[i] * y[i];
          if (gb) (*gb)[i] += g[i] * x[i];
        }
        return;
      }
      const double sb = op == BinOp::kSub ? -1.0 : 1.0;
      for (size_t i = 0; i < g.size(); ++i) {
        if (ga) (*ga)[i] += g[i];
        if (gb) (*gb)[i] += sb * g[i];
      }
    });
  }
  Broadcast plan = broadcast_plan(a.shape(), b.shape());
  std::vector<double> out(numel_of(plan.out));
  for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) {
    out[o] = op == BinOp::kAdd   ? av[ia] + bv[ib]
             : op == BinOp::kSub ? av[ia] - bv[ib]
                                 : av[ia] * bv[ib];
  });
  return make_result(plan.out, std::move(out), {&a, &b},
                     [op, plan](Node& self) {
                       auto* ga = sink(self, 0);
                       auto* gb = sink(self, 1);
                       const auto& g = self.grad;
                       const auto& x = self.inputs[0]->value;
                       const auto& y = self.inputs[1]->value;
                       for_each_broadcast(plan, [&](int64_t o, int64_t ia,
                                                    int64_t ib) {
                         switch (op) {
                           case BinOp::kAdd:
                             if (ga) (*ga)[ia] += g[o];
                             if (gb) (*gb)[ib] += g[o];
                             break;
                           case BinOp::kSub:
                             if (ga) (*ga)[ia] += g[o];
                             if (gb) (*gb)[ib] -= g[o];
                             break;
                           case BinOp::kMul:
                             if (ga) (*ga)[ia] += g[o] * y[ib];
                             if (gb) (*gb)[ib] += g[o] * x[ia];
                             break;
                         }
                       });
                     });
}

std::vector<double> hann_periodic(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  }
  return w;
}

Eigen::FFT<double>& fft_engine() {
  thread_local Eigen::FFT<double> fft;
  return fft;
}

}  // namespace

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel_of(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  require(numel_of(shape) == static_cast<int64_t>(values.size()),
          "Tensor::from: " + std::to_string(values.size()) +
              " values do not fill shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

int64_t Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  require(i >= 0 && i < r, "Tensor::dim: axis out of range");
  return node_->shape[i];
}

double Tensor::item() const {
  require(numel() == 1, "Tensor::item: tensor has " +
                            std::to_string(numel()) + " elements");
  return node_->value[0];
}

Tensor Tensor::detach() const {
  return from(shape(), values(), false);
}

Tensor Tensor::clone() const { return from(shape(), values(), requires_grad()); }

void Tensor::backward() const {
  require(defined(), "backward on undefined tensor");
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order. Shared ownership keeps
  // every node alive while upstream nodes release their inputs.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack{{node_, 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      const std::shared_ptr<Node>& child = n->inputs[next++];
      if (child && child->requires_grad && child->backward &&
          seen.insert(child.get()).second) {
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& seed = node_->grad_buffer();
  std::fill(seed.begin(), seed.end(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->get();
    if (n->backward) {
      n->backward(*n);
      // Release the graph behind this node; leaves keep their grads.
      n->backward = nullptr;
      n->inputs.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor log_clamp_min(const Tensor& x, double floor) {
  return unary(
      x, [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s}, {&x}, [](Node& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (double& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_dim(const Tensor& x, int dim) {
  const Shape& s = x.shape();
  if (dim < 0) dim += static_cast<int>(s.size());
  require(dim >= 0 && dim < static_cast<int>(s.size()), "sum_dim: bad axis");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s[i];
  for (size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
  const int64_t n = s[dim];
  Shape out_shape = s;
  out_shape[dim] = 1;
  std::vector<double> out(outer * inner, 0.0);
  const auto& v = x.values();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k)
      for (int64_t i = 0; i < inner; ++i)
        out[o * inner + i] += v[(o * n + k) * inner + i];
  return make_result(out_shape, std::move(out), {&x},
                     [outer, inner, n](Node& self) {
                       auto* g = sink(self, 0);
                       if (!g) return;
                       for (int64_t o = 0; o < outer; ++o)
                         for (int64_t k = 0; k < n; ++k)
                           for (int64_t i = 0; i < inner; ++i)
                             (*g)[(o * n + k) * inner + i] +=
                                 self.grad[o * inner + i];
                     });
}

Tensor mean_dim(const Tensor& x, int dim) {
  if (dim < 0) dim += x.rank();
  return scale(sum_dim(x, dim), 1.0 / static_cast<double>(x.dim(dim)));
}

// ---- shape ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel_of(shape) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result(std::move(shape), x.values(), {&x}, [](Node& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2 || x.rank() == 3, "transpose: rank must be 2 or 3");
  const int64_t b = x.rank() == 3 ? x.dim(0) : 1;
  const int64_t r = x.dim(-2), c = x.dim(-1);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<double> out(x.numel());
  const auto& v = x.values();
  for (int64_t k = 0; k < b; ++k)
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        out[k * r * c + j * r + i] = v[k * r * c + i * c + j];
  return make_result(out_shape, std::move(out), {&x}, [b, r, c](Node& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (int64_t k = 0; k < b; ++k)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          (*g)[k * r * c + i * c + j] += self.grad[k * r * c + j * r + i];
  });
}

Tensor slice(const Tensor& x, int dim, int64_t begin, int64_t end) {
  const Shape& s = x.shape();
  if (dim < 0) dim += static_cast<int>(s.size());
  require(dim >= 0 && dim < static_cast<int>(s.size()), "slice: bad axis");
  require(0 <= begin && begin <= end && end <= s[dim],
          "slice: range [" + std::to_string(begin) + "," +
              std::to_string(end) + ") outside axis of size " +
              std::to_string(s[dim]));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s[i];
  for (size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
  const int64_t n = s[dim], m = end - begin;
  Shape out_shape = s;
  out_shape[dim] = m;
  std::vector<double> out(outer * m * inner);
  const auto& v = x.values();
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(v.begin() + (o * n + begin) * inner, m * inner,
                out.begin() + o * m * inner);
  return make_result(out_shape, std::move(out), {&x},
                     [outer, inner, n, m, begin](Node& self) {
                       auto* g = sink(self, 0);
                       if (!g) return;
                       for (int64_t o = 0; o < outer; ++o)
                         for (int64_t i = 0; i < m * inner; ++i)
                           (*g)[(o * n + begin) * inner + i] +=
                               self.grad[o * m * inner + i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
  require(!parts.empty(), "concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (dim < 0) dim += static_cast<int>(out_shape.size());
  int64_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = out_shape;
    require(a.size() == b.size(), "concat: rank mismatch");
    a[dim] = b[dim] = 0;
    require(a == b, "concat: shapes differ outside the concat axis");
    total += p.dim(dim);
  }
  out_shape[dim] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= out_shape[i];
  for (size_t i = dim + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  std::vector<double> out(numel_of(out_shape));
  std::vector<int64_t> sizes;
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t m = p.dim(dim);
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.values().begin() + o * m * inner, m * inner,
                  out.begin() + (o * total + offset) * inner);
    offset += m;
    sizes.push_back(m);
  }
  auto node = std::make_shared<Node>();
  node->shape = out_shape;
  node->value = std::move(out);
  bool track = false;
  if (g_grad_enabled)
    for (const auto& p : parts) track = track || p.requires_grad();
  if (track) {
    node->requires_grad = true;
    for (const auto& p : parts) node->inputs.push_back(p.node_ptr());
    node->backward = [outer, inner, total, sizes](Node& self) {
      int64_t off = 0;
      for (size_t k = 0; k < sizes.size(); ++k) {
        auto* g = sink(self, k);
        const int64_t m = sizes[k];
        if (g) {
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < m * inner; ++i)
              (*g)[o * m * inner + i] +=
                  self.grad[(o * total + off) * inner + i];
        }
        off += m;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require(table.rank() == 2, "embedding: table must be [V, H]");
  const int64_t v = table.dim(0), h = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<double> out(n * h);
  for (int64_t i = 0; i < n; ++i) {
    require(ids[i] >= 0 && ids[i] < v, "embedding: id " +
                                           std::to_string(ids[i]) +
                                           " out of range");
    std::copy_n(table.values().begin() + ids[i] * h, h, out.begin() + i * h);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result({n, h}, std::move(out), {&table},
                     [idx, h](Node& self) {
                       auto* g = sink(self, 0);
                       if (!g) return;
                       for (size_t i = 0; i < idx.size(); ++i)
                         for (int64_t j = 0; j < h; ++j)
                           (*g)[idx[i] * h + j] += self.grad[i * h + j];
                     });
}

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m);
  MapMat(out.data(), n, m).noalias() =
      ConstMapMat(a.values().data(), n, k) * ConstMapMat(b.values().data(), k, m);
  return make_result({n, m}, std::move(out), {&a, &b},
                     [n, k, m](Node& self) {
                       ConstMapMat g(self.grad.data(), n, m);
                       if (auto* ga = sink(self, 0)) {
                         MapMat(ga->data(), n, k).noalias() +=
                             g * ConstMapMat(self.inputs[1]->value.data(), k, m)
                                     .transpose();
                       }
                       if (auto* gb = sink(self, 1)) {
                         MapMat(gb->data(), k, m).noalias() +=
                             ConstMapMat(self.inputs[0]->value.data(), n, k)
                                 .transpose() *
                             g;
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
          "linear: x " + shape_str(x.shape()) + " vs weight " +
              shape_str(weight.shape()));
  const int64_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  std::vector<double> out(n * out_dim);
  MapMat o(out.data(), n, out_dim);
  o.noalias() = ConstMapMat(x.values().data(), n, in) *
                ConstMapMat(weight.values().data(), out_dim, in).transpose();
  if (bias.defined()) {
    require(bias.numel() == out_dim, "linear: bias size");
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < out_dim; ++j) o(i, j) += bias.values()[j];
  }
  return make_result(
      {n, out_dim}, std::move(out), {&x, &weight, &bias},
      [n, in, out_dim](Node& self) {
        ConstMapMat g(self.grad.data(), n, out_dim);
        if (auto* gx = sink(self, 0)) {
          MapMat(gx->data(), n, in).noalias() +=
              g * ConstMapMat(self.inputs[1]->value.data(), out_dim, in);
        }
        if (auto* gw = sink(self, 1)) {
          MapMat(gw->data(), out_dim, in).noalias() +=
              g.transpose() * ConstMapMat(self.inputs[0]->value.data(), n, in);
        }
        if (auto* gb = sink(self, 2)) {
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < out_dim; ++j) (*gb)[j] += g(i, j);
        }
      });
}

Tensor left_matmul(const Tensor& w, const Tensor& x) {
  require(w.rank() == 2 && x.rank() == 3 && w.dim(1) == x.dim(1),
          "left_matmul: " + shape_str(w.shape()) + " x " +
              shape_str(x.shape()));
  const int64_t b = x.dim(0), m = w.dim(0), k = w.dim(1), f = x.dim(2);
  std::vector<double> out(b * m * f);
  ConstMapMat wm(w.values().data(), m, k);
  for (int64_t i = 0; i < b; ++i) {
    MapMat(out.data() + i * m * f, m, f).noalias() =
        wm * ConstMapMat(x.values().data() + i * k * f, k, f);
  }
  return make_result({b, m, f}, std::move(out), {&w, &x},
                     [b, m, k, f](Node& self) {
                       ConstMapMat wm(self.inputs[0]->value.data(), m, k);
                       auto* gw = sink(self, 0);
                       auto* gx = sink(self, 1);
                       for (int64_t i = 0; i < b; ++i) {
                         ConstMapMat g(self.grad.data() + i * m * f, m, f);
                         if (gw) {
                           MapMat(gw->data(), m, k).noalias() +=
                               g * ConstMapMat(self.inputs[1]->value.data() +
                                                   i * k * f,
                                               k, f)
                                       .transpose();
                         }
                         if (gx) {
                           MapMat(gx->data() + i * k * f, k, f).noalias() +=
                               wm.transpose() * g;
                         }
                       }
                     });
}

// ---- rows ----------------------------------------------------------------

Tensor log_softmax_rows(const Tensor& x) {
  require(x.rank() == 2, "log_softmax_rows: expects [N, K]");
  const int64_t n = x.dim(0), k = x.dim(1);
  std::vector<double> out(n * k);
  const auto& v = x.values();
  for (int64_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (int64_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  return make_result({n, k}, std::move(out), {&x}, [n, k](Node& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (int64_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (int64_t j = 0; j < k; ++j) gs += self.grad[i * k + j];
      for (int64_t j = 0; j < k; ++j) {
        (*g)[i * k + j] +=
            self.grad[i * k + j] - std::exp(self.value[i * k + j]) * gs;
      }
    }
  });
}

Tensor softmax_rows(const Tensor& x) { return exp(log_softmax_rows(x)); }

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require(x.rank() == 2, "l2_normalize_rows: expects [N, K]");
  const int64_t n = x.dim(0), k = x.dim(1);
  std::vector<double> out(n * k), norms(n);
  const auto& v = x.values();
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += v[i * k + j] * v[i * k + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (int64_t j = 0; j < k; ++j) out[i * k + j] = v[i * k + j] / norms[i];
  }
  return make_result({n, k}, std::move(out), {&x}, [n, k, norms](Node& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < k; ++j)
        dot += self.grad[i * k + j] * self.value[i * k + j];
      for (int64_t j = 0; j < k; ++j) {
        (*g)[i * k + j] +=
            (self.grad[i * k + j] - self.value[i * k + j] * dot) / norms[i];
      }
    }
  });
}

// ---- temporal ------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding, int dilation) {
  require(x.rank() == 3 && weight.rank() == 3 && x.dim(1) == weight.dim(1),
          "conv1d: x " + shape_str(x.shape()) + " vs weight " +
              shape_str(weight.shape()));
  const int64_t b = x.dim(0), cin = x.dim(1), t = x.dim(2);
  const int64_t cout = weight.dim(0), k = weight.dim(2);
  const int64_t tout = (t + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
  require(tout > 0, "conv1d: input of length " + std::to_string(t) +
                        " too short for kernel");
  const int64_t rows = cin * k;
  auto im2col = [=](const double* src, double* col) {
    for (int64_t c = 0; c < cin; ++c)
      for (int64_t kk = 0; kk < k; ++kk) {
        double* dst = col + (c * k + kk) * tout;
        const double* in = src + c * t;
        for (int64_t o = 0; o < tout; ++o) {
          const int64_t pos = o * stride - padding + kk * dilation;
          dst[o] = (pos >= 0 && pos < t) ? in[pos] : 0.0;
        }
      }
  };
  std::vector<double> out(b * cout * tout);
  std::vector<double> col(rows * tout);
  ConstMapMat wm(weight.values().data(), cout, rows);
  for (int64_t i = 0; i < b; ++i) {
    im2col(x.values().data() + i * cin * t, col.data());
    MapMat o(out.data() + i * cout * tout, cout, tout);
    o.noalias() = wm * ConstMapMat(col.data(), rows, tout);
    if (bias.defined()) {
      for (int64_t c = 0; c < cout; ++c) o.row(c).array() += bias.values()[c];
    }
  }
  return make_result(
      {b, cout, tout}, std::move(out), {&x, &weight, &bias},
      [=](Node& self) {
        auto* gx = sink(self, 0);
        auto* gw = sink(self, 1);
        auto* gb = sink(self, 2);
        const auto& xv = self.inputs[0]->value;
        ConstMapMat wm(self.inputs[1]->value.data(), cout, rows);
        std::vector<double> col(rows * tout), gcol(rows * tout);
        for (int64_t i = 0; i < b; ++i) {
          ConstMapMat g(self.grad.data() + i * cout * tout, cout, tout);
          if (gw) {
            im2col(xv.data() + i * cin * t, col.data());
            MapMat(gw->data(), cout, rows).noalias() +=
                g * ConstMapMat(col.data(), rows, tout).transpose();
          }
          if (gb) {
            for (int64_t c = 0; c < cout; ++c) (*gb)[c] += g.row(c).sum();
          }
          if (gx) {
            MapMat(gcol.data(), rows, tout).noalias() = wm.transpose() * g;
            double* dst = gx->data() + i * cin * t;
            for (int64_t c = 0; c < cin; ++c)
              for (int64_t kk = 0; kk < k; ++kk) {
                const double* src = gcol.data() + (c * k + kk) * tout;
                for (int64_t o = 0; o < tout; ++o) {
                  const int64_t pos = o * stride - padding + kk * dilation;
                  if (pos >= 0 && pos < t) dst[c * t + pos] += src[o];
                }
              }
          }
        }
      });
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& weight,
                        const Tensor& bias, int stride, int padding) {
  require(x.rank() == 3 && weight.rank() == 3 && x.dim(1) == weight.dim(0),
          "conv_transpose1d: x " + shape_str(x.shape()) + " vs weight " +
              shape_str(weight.shape()));
  const int64_t b = x.dim(0), cin = x.dim(1), t = x.dim(2);
  const int64_t cout = weight.dim(1), k = weight.dim(2);
  const int64_t tout = (t - 1) * stride - 2 * padding + k;
  require(tout > 0, "conv_transpose1d: empty output");
  const int64_t rows = cout * k;
  std::vector<double> out(b * cout * tout, 0.0);
  std::vector<double> cols(rows * t);
  ConstMapMat wm(weight.values().data(), cin, rows);
  for (int64_t i = 0; i < b; ++i) {
    MapMat(cols.data(), rows, t).noalias() =
        wm.transpose() * ConstMapMat(x.values().data() + i * cin * t, cin, t);
    double* dst = out.data() + i * cout * tout;
    for (int64_t c = 0; c < cout; ++c) {
      for (int64_t kk = 0; kk < k; ++kk) {
        const double* src = cols.data() + (c * k + kk) * t;
        for (int64_t s = 0; s < t; ++s) {
          const int64_t pos = s * stride - padding + kk;
          if (pos >= 0 && pos < tout) dst[c * tout + pos] += src[s];
        }
      }
      if (bias.defined()) {
        for (int64_t p = 0; p < tout; ++p) dst[c * tout + p] += bias.values()[c];
      }
    }
  }
  return make_result(
      {b, cout, tout}, std::move(out), {&x, &weight, &bias},
      [=](Node& self) {
        auto* gx = sink(self, 0);
        auto* gw = sink(self, 1);
        auto* gb = sink(self, 2);
        ConstMapMat wm(self.inputs[1]->value.data(), cin, rows);
        std::vector<double> gcols(rows * t);
        for (int64_t i = 0; i < b; ++i) {
          const double* g = self.grad.data() + i * cout * tout;
          for (int64_t c = 0; c < cout; ++c)
            for (int64_t kk = 0; kk < k; ++kk) {
              double* dst = gcols.data() + (c * k + kk) * t;
              for (int64_t s = 0; s < t; ++s) {
                const int64_t pos = s * stride - padding + kk;
                dst[s] = (pos >= 0 && pos < tout) ? g[c * tout + pos] : 0.0;
              }
            }
          ConstMapMat gc(gcols.data(), rows, t);
          if (gx) {
            MapMat(gx->data() + i * cin * t, cin, t).noalias() += wm * gc;
          }
          if (gw) {
            MapMat(gw->data(), cin, rows).noalias() +=
                ConstMapMat(self.inputs[0]->value.data() + i * cin * t, cin, t) *
                gc.transpose();
          }
          if (gb) {
            for (int64_t c = 0; c < cout; ++c)
              for (int64_t p = 0; p < tout; ++p) (*gb)[c] += g[c * tout + p];
          }
        }
      });
}

Tensor avg_pool1d(const Tensor& x, int kernel, int stride, int padding) {
  require(x.rank() == 3, "avg_pool1d: expects [B, C, T]");
  const int64_t rows = x.dim(0) * x.dim(1), t = x.dim(2);
  const int64_t tout = (t + 2 * padding - kernel) / stride + 1;
  require(tout > 0, "avg_pool1d: input too short");
  std::vector<double> out(rows * tout, 0.0);
  const auto& v = x.values();
  const double inv = 1.0 / kernel;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t o = 0; o < tout; ++o) {
      double s = 0.0;
      for (int kk = 0; kk < kernel; ++kk) {
        const int64_t pos = o * stride - padding + kk;
        if (pos >= 0 && pos < t) s += v[r * t + pos];
      }
      out[r * tout + o] = s * inv;
    }
  return make_result({x.dim(0), x.dim(1), tout}, std::move(out), {&x},
                     [=](Node& self) {
                       auto* g = sink(self, 0);
                       if (!g) return;
                       for (int64_t r = 0; r < rows; ++r)
                         for (int64_t o = 0; o < tout; ++o)
                           for (int kk = 0; kk < kernel; ++kk) {
                             const int64_t pos = o * stride - padding + kk;
                             if (pos >= 0 && pos < t)
                               (*g)[r * t + pos] += self.grad[r * tout + o] * inv;
                           }
                     });
}

Tensor reflect_pad1d(const Tensor& x, int left, int right) {
  require(x.rank() == 3, "reflect_pad1d: expects [B, C, T]");
  const int64_t rows = x.dim(0) * x.dim(1), t = x.dim(2);
  require(left < t && right < t, "reflect_pad1d: padding exceeds length");
  const int64_t tout = t + left + right;
  auto src_index = [=](int64_t p) {
    int64_t s = p - left;
    if (s < 0) s = -s;
    if (s >= t) s = 2 * (t - 1) - s;
    return s;
  };
  std::vector<double> out(rows * tout);
  const auto& v = x.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t p = 0; p < tout; ++p) out[r * tout + p] = v[r * t + src_index(p)];
  return make_result({x.dim(0), x.dim(1), tout}, std::move(out), {&x},
                     [=](Node& self) {
                       auto* g = sink(self, 0);
                       if (!g) return;
                       for (int64_t r = 0; r < rows; ++r)
                         for (int64_t p = 0; p < tout; ++p)
                           (*g)[r * t + src_index(p)] += self.grad[r * tout + p];
                     });
}

Tensor fold_period(const Tensor& x, int period) {
  require(x.rank() == 3 && x.dim(1) == 1, "fold_period: expects [B, 1, T]");
  Tensor padded = x;
  const int64_t t = x.dim(2);
  if (t % period != 0) padded = reflect_pad1d(x, 0, period - t % period);
  const int64_t b = x.dim(0), tp = padded.dim(2), rows = tp / period;
  std::vector<double> out(b * tp);
  const auto& v = padded.values();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < period; ++j)
        out[(i * period + j) * rows + r] = v[i * tp + r * period + j];
  return make_result({b * period, 1, rows}, std::move(out), {&padded},
                     [=](Node& self) {
                       auto* g = sink(self, 0);
                       if (!g) return;
                       for (int64_t i = 0; i < b; ++i)
                         for (int64_t r = 0; r < rows; ++r)
                           for (int64_t j = 0; j < period; ++j)
                             (*g)[i * tp + r * period + j] +=
                                 self.grad[(i * period + j) * rows + r];
                     });
}

Tensor stft_magnitude(const Tensor& x, int n_fft, int hop, int win_length) {
  require(x.rank() == 3 && x.dim(1) == 1, "stft_magnitude: expects [B, 1, T]");
  require(win_length <= n_fft, "stft_magnitude: window longer than fft");
  const int64_t b = x.dim(0), t = x.dim(2);
  const int pad = n_fft / 2;
  require(t > pad, "stft_magnitude: signal shorter than half a window");
  Tensor padded = reflect_pad1d(x, pad, pad);
  const int64_t tp = padded.dim(2);
  const int64_t frames = (tp - n_fft) / hop + 1;
  const int64_t bins = n_fft / 2 + 1;

  std::vector<double> window(n_fft, 0.0);
  {
    auto w = hann_periodic(win_length);
    std::copy(w.begin(), w.end(), window.begin() + (n_fft - win_length) / 2);
  }
  using cd = std::complex<double>;
  // Complex spectra are kept for the backward pass.
  auto spectra = std::make_shared<std::vector<cd>>(b * frames * bins);
  std::vector<double> out(b * bins * frames);
  auto& fft = fft_engine();
  std::vector<double> frame(n_fft);
  std::vector<cd> spec;
  const auto& pv = padded.values();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t f = 0; f < frames; ++f) {
      const double* src = pv.data() + i * tp + f * hop;
      for (int n = 0; n < n_fft; ++n) frame[n] = src[n] * window[n];
      fft.fwd(spec, frame);
      for (int64_t k = 0; k < bins; ++k) {
        (*spectra)[(i * frames + f) * bins + k] = spec[k];
        out[(i * bins + k) * frames + f] = std::abs(spec[k]);
      }
    }
  return make_result(
      {b, bins, frames}, std::move(out), {&padded},
      [=](Node& self) {
        auto* g = sink(self, 0);
        if (!g) return;
        auto& fft = fft_engine();
        std::vector<cd> h(n_fft), hx;
        for (int64_t i = 0; i < b; ++i)
          for (int64_t f = 0; f < frames; ++f) {
            std::fill(h.begin(), h.end(), cd(0.0, 0.0));
            for (int64_t k = 0; k < bins; ++k) {
              const double mag = self.value[(i * bins + k) * frames + f];
              if (mag <= 0.0) continue;
              const cd xk = (*spectra)[(i * frames + f) * bins + k];
              h[k] = self.grad[(i * bins + k) * frames + f] * std::conj(xk) /
                     mag;
            }
            fft.fwd(hx, h);
            double* dst = g->data() + i * tp + f * hop;
            for (int n = 0; n < n_fft; ++n) dst[n] += window[n] * hx[n].real();
          }
      });
}

}  // namespace freesvc::ag
