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

#include "freesvc/nn.hpp"

#include <cmath>
#include <random>

namespace freesvc::nn {

uint64_t name_seed(uint64_t seed, const std::string& name) {
  // FNV-1a over the name, mixed with the run seed (splitmix64 finaliser).
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  uint64_t z = h ^ (seed + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor ParameterSet::insert(const std::string& name, ag::Shape shape,
                            std::vector<double> values) {
  if (index_.count(name)) throw Error("duplicate parameter name: " + name);
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  index_[name] = params_.size();
  params_.push_back({name, t, true});
  return t;
}

Tensor ParameterSet::add_normal(const std::string& name, ag::Shape shape,
                                double stddev) {
  std::mt19937_64 rng(name_seed(seed_, name));
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ag::numel_of(shape));
  for (double& x : v) x = dist(rng);
  return insert(name, std::move(shape), std::move(v));
}

Tensor ParameterSet::add_uniform(const std::string& name, ag::Shape shape,
                                 double bound) {
  std::mt19937_64 rng(name_seed(seed_, name));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(ag::numel_of(shape));
  for (double& x : v) x = dist(rng);
  return insert(name, std::move(shape), std::move(v));
}

Tensor ParameterSet::add_constant(const std::string& name, ag::Shape shape,
                                  double value) {
  std::vector<double> v(ag::numel_of(shape), value);
  return insert(name, std::move(shape), std::move(v));
}

bool ParameterSet::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return params_[it->second];
}

void ParameterSet::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& p : params_) {
    if (p.name.rfind(prefix, 0) == 0) {
      p.trainable = trainable;
      p.tensor.set_requires_grad(trainable);
    }
  }
}

std::vector<Tensor> ParameterSet::trainable_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_)
    if (p.trainable) out.push_back(p.tensor);
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

int64_t ParameterSet::count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Linear::Linear(ParameterSet& ps, const std::string& name, int in, int out,
               bool with_bias, bool zero_init) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = zero_init ? ps.add_constant(name + ".weight", {out, in}, 0.0)
                     : ps.add_uniform(name + ".weight", {out, in}, bound);
  if (with_bias) {
    bias = zero_init ? ps.add_constant(name + ".bias", {out}, 0.0)
                     : ps.add_uniform(name + ".bias", {out}, bound);
  }
}

Tensor Linear::operator()(const Tensor& x) const {
  return ag::linear(x, weight, bias);
}

Conv1d::Conv1d(ParameterSet& ps, const std::string& name, int in, int out,
               int kernel, int stride_, int padding_, int dilation_,
               bool with_bias, bool zero_init)
    : stride(stride_), padding(padding_), dilation(dilation_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
  weight = zero_init
               ? ps.add_constant(name + ".weight", {out, in, kernel}, 0.0)
               : ps.add_uniform(name + ".weight", {out, in, kernel}, bound);
  if (with_bias) {
    bias = zero_init ? ps.add_constant(name + ".bias", {out}, 0.0)
                     : ps.add_uniform(name + ".bias", {out}, bound);
  }
}

Tensor Conv1d::operator()(const Tensor& x) const {
  return ag::conv1d(x, weight, bias, stride, padding, dilation);
}

ConvTranspose1d::ConvTranspose1d(ParameterSet& ps, const std::string& name,
                                 int in, int out, int kernel, int stride_,
                                 int padding_)
    : stride(stride_), padding(padding_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
  weight = ps.add_uniform(name + ".weight", {in, out, kernel}, bound);
  bias = ps.add_uniform(name + ".bias", {out}, bound);
}

Tensor ConvTranspose1d::operator()(const Tensor& x) const {
  return ag::conv_transpose1d(x, weight, bias, stride, padding);
}

WaveNet::WaveNet(ParameterSet& ps, const std::string& name, int hidden_,
                 int kernel, int dilation_rate, int layers, int cond_channels)
    : hidden(hidden_) {
  if (cond_channels > 0) {
    cond = Conv1d(ps, name + ".cond", cond_channels, 2 * hidden * layers, 1);
  }
  int dilation = 1;
  for (int i = 0; i < layers; ++i) {
    const int pad = (kernel * dilation - dilation) / 2;
    in_layers.emplace_back(ps, name + ".in." + std::to_string(i), hidden,
                           2 * hidden, kernel, 1, pad, dilation);
    const int out = i + 1 < layers ? 2 * hidden : hidden;
    res_skip.emplace_back(ps, name + ".res_skip." + std::to_string(i), hidden,
                          out, 1);
    dilation *= dilation_rate;
  }
}

Tensor WaveNet::operator()(const Tensor& x_in, const Tensor& g) const {
  Tensor x = x_in;
  Tensor output;
  Tensor gc;
  if (g.defined() && cond.weight.defined()) gc = cond(g);
  const int layers = static_cast<int>(in_layers.size());
  for (int i = 0; i < layers; ++i) {
    Tensor h = in_layers[i](x);
    if (gc.defined()) {
      h = ag::add(h, ag::slice(gc, 1, 2 * hidden * i, 2 * hidden * (i + 1)));
    }
    Tensor acts = ag::mul(ag::tanh(ag::slice(h, 1, 0, hidden)),
                          ag::sigmoid(ag::slice(h, 1, hidden, 2 * hidden)));
    Tensor rs = res_skip[i](acts);
    if (i + 1 < layers) {
      x = ag::add(x, ag::slice(rs, 1, 0, hidden));
      Tensor skip = ag::slice(rs, 1, hidden, 2 * hidden);
      output = output.defined() ? ag::add(output, skip) : skip;
    } else {
      output = output.defined() ? ag::add(output, rs) : rs;
    }
  }
  return output;
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  slots_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    const size_t n = params_[i]->tensor.numel();
    slots_[i].m.assign(n, 0.0);
    slots_[i].v.assign(n, 0.0);
  }
}

void Adam::step() {
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    auto g = p.tensor.grad();
    if (g.empty()) continue;
    auto w = p.tensor.data();
    auto& m = slots_[i].m;
    auto& v = slots_[i].v;
    for (size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mh = m[j] / c1;
      const double vh = v[j] / c2;
      w[j] -= config_.learning_rate * mh / (std::sqrt(vh) + config_.epsilon);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->tensor.zero_grad();
}

std::vector<Parameter*> select(ParameterSet& ps,
                               const std::vector<std::string>& prefixes) {
  std::vector<Parameter*> out;
  for (auto& p : ps.all()) {
    if (!p.trainable) continue;
    for (const auto& prefix : prefixes) {
      if (p.name.rfind(prefix, 0) == 0) {
        out.push_back(&p);
        break;
      }
    }
  }
  return out;
}

}  // namespace freesvc::nn
