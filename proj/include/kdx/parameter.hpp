// Copyright (c) 2026 The KDX Authors. All Rights Reserved.
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

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "kdx/tensor.hpp"

namespace kdx {

enum class ParamGroup {
  weight,     // convolution / linear weights (decayed)
  no_decay,   // BN affine parameters and biases
  attention,  // gate logits (own learning rate, no decay)
  buffer,     // BN running statistics (not trained)
};

template <typename Scalar>
struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::weight;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  Tensor<Scalar> velocity;

  bool trainable() const { return group != ParamGroup::buffer; }
};

/// Owns every parameter of a model; layers hold stable pointers into it.
template <typename Scalar>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter<Scalar>& add(std::string name, Shape shape, ParamGroup group) {
    auto p = std::make_unique<Parameter<Scalar>>();
    p->name = std::move(name);
    p->group = group;
    p->value = Tensor<Scalar>(shape);
    p->grad = Tensor<Scalar>(shape);
    params_.push_back(std::move(p));
    return *params_.back();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Number of trainable scalars.
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p->trainable()) n += p->value.size();
    return n;
  }
  std::int64_t count(ParamGroup group) const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p->group == group) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.set_zero();
  }

 private:
  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
};

/// Kaiming-normal init with fan_in = Cin * k * k.
template <typename Scalar, typename Rng>
void kaiming_normal(Tensor<Scalar>& w, Rng& rng) {
  const double fan_in = double(w.shape().sample_size());
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.array()[i] = Scalar(dist(rng));
}

}  // namespace kdx
