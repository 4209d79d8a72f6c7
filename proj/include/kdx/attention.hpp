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

#include <random>
#include <span>
#include <string>
#include <vector>

#include "kdx/errors.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

/// Dataset-level gate: trainable logits v and a temperature T. The weights
/// are softmax(v / T) and do not depend on the input.
template <typename Scalar>
struct AttentionModule {
  Vector<Scalar> logits;
  Scalar temperature = Scalar(1);

  void validate() const {
    if (logits.size() < 1) throw InvalidArgument("attention module needs at least one input");
    if (!(temperature > Scalar(0))) throw InvalidArgument("attention temperature must be positive");
    if (!logits.allFinite()) throw InvalidArgument("attention logits must be finite");
  }

  /// Logits drawn from N(0, 0.01^2): near uniform but with ties broken.
  template <typename Rng>
  static AttentionModule init(int arity, Scalar temperature, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 0.01);
    AttentionModule m;
    m.logits.resize(arity);
    for (int i = 0; i < arity; ++i) m.logits[i] = Scalar(dist(rng));
    m.temperature = temperature;
    return m;
  }
};

template <typename Scalar>
Vector<Scalar> attention_weights(const AttentionModule<Scalar>& m) {
  m.validate();
  Vector<Scalar> e = ((m.logits.array() - m.logits.maxCoeff()) / m.temperature).exp().matrix();
  return e / e.sum();
}

/// Vector-Jacobian product of softmax(v / T): maps dL/da to dL/dv.
template <typename Scalar>
Vector<Scalar> attention_backward(const Vector<Scalar>& weights, const Vector<Scalar>& grad_weights,
                                  Scalar temperature) {
  const Scalar inner = weights.dot(grad_weights);
  return (weights.array() * (grad_weights.array() - inner)).matrix() / temperature;
}

/// sum_k a_k F_k over feature maps of identical shape.
template <typename Scalar>
Tensor<Scalar> mix_features(const Vector<Scalar>& weights, std::span<const Tensor<Scalar>> features) {
  if (std::size_t(weights.size()) != features.size())
    throw ShapeError("mix_features: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(features.size()) + " features");
  if (features.empty()) throw ShapeError("mix_features: no features");
  Tensor<Scalar> out(features.front().shape());
  for (std::size_t k = 0; k < features.size(); ++k) {
    if (!(features[k].shape() == out.shape()))
      throw ShapeError("mix_features: feature " + std::to_string(k) + " has shape " + features[k].shape().str() +
                       ", expected " + out.shape().str());
    out.array() += weights[Eigen::Index(k)] * features[k].array();
  }
  return out;
}

/// dL/da_k = <dL/dout, F_k> for out = mix_features(a, F).
template <typename Scalar>
Vector<Scalar> mix_features_weight_grad(const Tensor<Scalar>& grad_out, std::span<const Tensor<Scalar>> features) {
  Vector<Scalar> g(Eigen::Index(features.size()));
  for (std::size_t k = 0; k < features.size(); ++k) g[Eigen::Index(k)] = (grad_out.array() * features[k].array()).sum();
  return g;
}

/// Index of the largest entry, lowest index on ties.
template <typename Scalar>
int argmax_lowest(const Vector<Scalar>& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = int(i);
  return best;
}

/// One-hot at the argmax (ties go to the lowest index).
template <typename Scalar>
Vector<Scalar> harden(const Vector<Scalar>& weights) {
  Vector<Scalar> out = Vector<Scalar>::Zero(weights.size());
  if (weights.size() > 0) out[argmax_lowest(weights)] = Scalar(1);
  return out;
}

/// One gate as seen from outside the model. `sources` name the inputs the
/// weights range over, using "<stage>:<block>" ids.
struct AttentionRecord {
  int stage = 0;
  int block = 0;
  std::vector<std::string> sources;
  std::vector<double> logits;
  std::vector<double> weights;

  Vector<double> weight_vector() const {
    return Eigen::Map<const Vector<double>>(weights.data(), Eigen::Index(weights.size()));
  }
  std::string id() const { return std::to_string(stage) + ":" + std::to_string(block); }
};

/// Every gate of a model at one point in training.
struct AttentionSnapshot {
  std::vector<AttentionRecord> modules;

  /// Throws InvariantViolation when a weight vector is off the simplex or
  /// its length disagrees with its sources/logits.
  void validate() const;

  std::string to_json() const;
  static AttentionSnapshot from_json(const std::string& text);

  friend bool operator==(const AttentionSnapshot& a, const AttentionSnapshot& b) { return a.to_json() == b.to_json(); }
};

inline std::string node_id(int stage, int block) { return std::to_string(stage) + ":" + std::to_string(block); }

}  // namespace kdx
