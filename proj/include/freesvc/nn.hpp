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
#include <map>
#include <string>
#include <vector>

#include "freesvc/tensor.hpp"

namespace freesvc::nn {

using ag::Tensor;

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

// Named parameters of one model. Initial values are drawn from a generator
// seeded by (seed, name), so a parameter's initialisation never depends on
// which other parameters exist. That keeps ablation variants comparable.
class ParameterSet {
 public:
  explicit ParameterSet(uint64_t seed = 0) : seed_(seed) {}

  Tensor add_normal(const std::string& name, ag::Shape shape, double stddev);
  Tensor add_uniform(const std::string& name, ag::Shape shape, double bound);
  Tensor add_constant(const std::string& name, ag::Shape shape, double value);

  bool contains(const std::string& name) const;
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  // Marks every parameter whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable);
  std::vector<Tensor> trainable_tensors() const;
  void zero_grad();
  int64_t count() const;
  uint64_t seed() const { return seed_; }

 private:
  Tensor insert(const std::string& name, ag::Shape shape,
                std::vector<double> values);

  uint64_t seed_;
  std::vector<Parameter> params_;
  std::map<std::string, size_t> index_;
};

uint64_t name_seed(uint64_t seed, const std::string& name);

struct Linear {
  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, int in, int out,
         bool bias = true, bool zero_init = false);
  Tensor operator()(const Tensor& x) const;  // [N, in] -> [N, out]
  Tensor weight, bias;
};

struct Conv1d {
  Conv1d() = default;
  Conv1d(ParameterSet& ps, const std::string& name, int in, int out,
         int kernel, int stride = 1, int padding = 0, int dilation = 1,
         bool bias = true, bool zero_init = false);
  Tensor operator()(const Tensor& x) const;  // [B, in, T] -> [B, out, T']
  Tensor weight, bias;
  int stride = 1, padding = 0, dilation = 1;
};

struct ConvTranspose1d {
  ConvTranspose1d() = default;
  ConvTranspose1d(ParameterSet& ps, const std::string& name, int in, int out,
                  int kernel, int stride, int padding);
  Tensor operator()(const Tensor& x) const;
  Tensor weight, bias;
  int stride = 1, padding = 0;
};

// Non-causal WaveNet stack with gated tanh/sigmoid units and an optional
// global conditioning vector g [B, cond_channels, 1].
struct WaveNet {
  WaveNet() = default;
  WaveNet(ParameterSet& ps, const std::string& name, int hidden, int kernel,
          int dilation_rate, int layers, int cond_channels);
  Tensor operator()(const Tensor& x, const Tensor& g) const;

  int hidden = 0;
  std::vector<Conv1d> in_layers, res_skip;
  Conv1d cond;
};

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double epsilon = 1e-9;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);
  // Uses gradients accumulated on the parameters; zeroes them afterwards.
  void step();
  void zero_grad();
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const AdamConfig& config() const { return config_; }
  int64_t steps() const { return steps_; }

  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Parameter*>& params() { return params_; }
  std::vector<Slot>& slots() { return slots_; }
  void set_steps(int64_t s) { steps_ = s; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Slot> slots_;
  AdamConfig config_;
  int64_t steps_ = 0;
};

// Trainable parameters of `ps` whose names start with any of `prefixes`.
std::vector<Parameter*> select(ParameterSet& ps,
                               const std::vector<std::string>& prefixes);

}  // namespace freesvc::nn
