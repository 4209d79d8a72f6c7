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

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kdx/backbone.hpp"
#include "kdx/losses.hpp"

namespace kdx {

struct ExplainerConfig {
  /// N_1..N_L; N_1 must be 1.
  std::vector<int> experts_per_stage;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  /// N_i = 4 for every stage after the first.
  static ExplainerConfig defaults(const BackboneSpec& spec, std::uint64_t seed = 0);
  void validate(const BackboneSpec& spec) const;
};

/// Sub-block B^i_j of stage i (1-based, i >= 2) with the gate that mixes the
/// previous stage's experts into its input.
template <typename Scalar>
struct Expert {
  int stage = 0;
  int index = 0;
  int in_channels = 0;
  int out_channels = 0;
  std::vector<Block<Scalar>> blocks;
  std::optional<BatchNormLayer<Scalar>> tail;
  Parameter<Scalar>* gate = nullptr;  // (1, N_{i-1})
  std::optional<Vector<Scalar>> hard;
  bool prunable = false;
  std::size_t param_begin = 0;
  std::size_t param_end = 0;
};

/// Binary classifier for one class: gate over last-stage experts, global
/// average pooling and a 2-way linear layer.
template <typename Scalar>
struct Head {
  int index = 0;
  Parameter<Scalar>* gate = nullptr;
  LinearLayer<Scalar> fc;
  std::optional<Vector<Scalar>> hard;
};

/// Tape handles produced by one explainer forward.
template <typename Scalar>
struct ExplainerVars {
  std::vector<Var> heads;  // K nodes of shape (N, 2, 1, 1)
  GateLog<Scalar> gates;
};

template <typename Scalar>
struct ExplainerOutput {
  std::vector<Tensor<Scalar>> head_logits;  // K tensors of shape (N, 2, 1, 1)
  AttentionSnapshot snapshot;

  int batch() const { return head_logits.empty() ? 0 : head_logits.front().shape().n; }
  /// The K binary logit pairs of one sample.
  std::vector<Vector<Scalar>> sample(int n) const {
    std::vector<Vector<Scalar>> out;
    for (const auto& h : head_logits) out.push_back(h.rows().row(n).transpose());
    return out;
  }
};

template <typename Scalar>
class ExplainerModel {
 public:
  ExplainerModel(BackboneSpec spec, ExplainerConfig cfg);

  const BackboneSpec& spec() const { return spec_; }
  const ExplainerConfig& config() const { return cfg_; }
  int num_classes() const { return spec_.num_classes; }
  ParameterStore<Scalar>& params() { return params_; }
  const ParameterStore<Scalar>& params() const { return params_; }

  /// Soft (or hardened-weight) routing through every expert.
  ExplainerVars<Scalar> forward(Tape<Scalar>& tape, Var x, bool training) const;
  /// One-path routing through reachable experts only. Requires a hardened model.
  ExplainerVars<Scalar> forward_pruned(Tape<Scalar>& tape, Var x) const;

  AttentionSnapshot snapshot() const;
  bool hardened() const { return hardened_; }

  std::int64_t parameter_count() const { return params_.count(); }
  /// Trainable scalars after dropping prunable experts.
  std::int64_t pruned_parameter_count() const;

  std::vector<Block<Scalar>> stem;
  std::vector<std::vector<Expert<Scalar>>> experts;  // stages 2..L
  std::vector<Head<Scalar>> heads;

  /// Copies parameter values and hardening state from a structurally identical model.
  void copy_state_from(const ExplainerModel& other);
  void mark_hardened(bool h) { hardened_ = h; }
  /// Used by the optional temperature anneal.
  void set_temperature(double t) {
    if (!(t > 0.0)) throw InvalidArgument("attention temperature must be positive");
    cfg_.temperature = t;
  }

 private:
  Var gate_weights(Tape<Scalar>& tape, Parameter<Scalar>* gate, const std::optional<Vector<Scalar>>& hard,
                   GateLog<Scalar>& log) const;

  BackboneSpec spec_;
  ExplainerConfig cfg_;
  ParameterStore<Scalar> params_;
  bool hardened_ = false;
};

extern template class ExplainerModel<float>;
extern template class ExplainerModel<double>;

template <typename Scalar>
ExplainerModel<Scalar> build_explainer(const BackboneSpec& spec, const ExplainerConfig& cfg) {
  return ExplainerModel<Scalar>(spec, cfg);
}

/// Eval-mode forward without gradient recording.
template <typename Scalar>
ExplainerOutput<Scalar> forward(const ExplainerModel<Scalar>& model, const Tensor<Scalar>& x) {
  Tape<Scalar> tape(false);
  auto vars = model.forward(tape, tape.input(x), false);
  ExplainerOutput<Scalar> out;
  for (Var h : vars.heads) out.head_logits.push_back(tape.value(h));
  out.snapshot = model.snapshot();
  return out;
}

/// Class with the largest positive-class probability (lowest index on ties).
template <typename Scalar>
int predict_class(const std::vector<ProbVector<Scalar>>& head_probs) {
  if (head_probs.empty()) throw ShapeError("predict_class: no heads");
  int best = 0;
  for (std::size_t k = 0; k < head_probs.size(); ++k) {
    if (head_probs[k].size() != 2) throw ShapeError("predict_class: heads must be binary");
    if (head_probs[k][1] > head_probs[std::size_t(best)][1]) best = int(k);
  }
  return best;
}

/// predict_class applied to softmax of each head pair of sample n.
template <typename Scalar>
int predict_class(const ExplainerOutput<Scalar>& out, int n) {
  std::vector<ProbVector<Scalar>> probs;
  for (const auto& z : out.sample(n)) probs.push_back(softmax(z));
  return predict_class(probs);
}

/// Copy of `model` with every gate replaced by its one-hot hardening and
/// experts that no head can reach flagged prunable.
template <typename Scalar>
ExplainerModel<Scalar> harden_model(const ExplainerModel<Scalar>& model);

extern template ExplainerModel<float> harden_model(const ExplainerModel<float>&);
extern template ExplainerModel<double> harden_model(const ExplainerModel<double>&);

}  // namespace kdx
