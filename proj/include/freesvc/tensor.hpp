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

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace freesvc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ag {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// One value in the computation graph. Leaves (parameters, inputs) have no
// backward function; intermediate nodes keep their inputs alive until
// backward() has consumed them.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

// Thread-local switch; while disabled, ops never record a graph.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double item() const;
  double at(int64_t flat) const { return node_->value[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  // Empty span when no gradient has been accumulated yet.
  std::span<const double> grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1 for every element and runs reverse mode.
  void backward() const;
  Tensor detach() const;
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---- elementwise ---------------------------------------------------------
// Binary ops broadcast numpy-style over equal-rank shapes (size-1 axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// log(max(x, floor)); gradient is zero where the floor is active.
Tensor log_clamp_min(const Tensor& x, double floor);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// ---- reductions ----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduces one axis; the axis is kept with size 1.
Tensor sum_dim(const Tensor& x, int dim);
Tensor mean_dim(const Tensor& x, int dim);

// ---- shape ---------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
// Swaps the last two axes (rank 2 or 3).
Tensor transpose(const Tensor& x);
Tensor slice(const Tensor& x, int dim, int64_t begin, int64_t end);
Tensor concat(const std::vector<Tensor>& parts, int dim);
// Rows of a [V, H] table, result [ids.size(), H].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// ---- linear algebra ------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [N,K] x [K,M]
// x [N, in], weight [out, in], bias [out] (bias may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// w [M, K] applied to every batch item of x [B, K, F] -> [B, M, F].
Tensor left_matmul(const Tensor& w, const Tensor& x);

// ---- rows ([N, K]) -------------------------------------------------------
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// ---- temporal ([B, C, T]) ------------------------------------------------
// weight [Cout, Cin, K], bias [Cout] or undefined; zero padding.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0, int dilation = 1);
// weight [Cin, Cout, K]; output length (T-1)*stride - 2*padding + K.
Tensor conv_transpose1d(const Tensor& x, const Tensor& weight,
                        const Tensor& bias, int stride, int padding);
// Zero-padded average pooling (count_include_pad semantics).
Tensor avg_pool1d(const Tensor& x, int kernel, int stride, int padding);
Tensor reflect_pad1d(const Tensor& x, int left, int right);
// [B, 1, T] -> [B*period, 1, ceil(T/period)], reflect-padding the tail.
Tensor fold_period(const Tensor& x, int period);

// Magnitude STFT with Hann window and center reflect padding.
// x [B, 1, T] -> [B, n_fft/2 + 1, T/hop + 1].
Tensor stft_magnitude(const Tensor& x, int n_fft, int hop, int win_length);

}  // namespace ag
}  // namespace freesvc
