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
#include <string>
#include <vector>

#include "kdx/attention.hpp"
#include "kdx/errors.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

// Probability and logit vectors are plain Eigen column vectors. The checks
// below enforce the simplex invariant where an operation requires it.
template <typename Scalar>
using ProbVector = Vector<Scalar>;
template <typename Scalar>
using LogitVector = Vector<Scalar>;

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kSimplexTol = 1e-6;

struct KDHyperParams {
  double alpha = 0.9;
  double tau = 4.0;
  double gamma = 0.1;
  double smoothing_eps = 0.1;
  // Multiply the KL term by tau^2 (Hinton-style gradient rescaling). Off by default.
  bool scale_kl_by_tau_sq = false;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0,1]");
    if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
    if (!(gamma >= 0.0)) throw InvalidArgument("gamma must be non-negative");
    if (!(smoothing_eps >= 0.0 && smoothing_eps < 1.0)) throw InvalidArgument("smoothing_eps must lie in [0,1)");
  }
  double kl_scale() const { return scale_kl_by_tau_sq ? tau * tau : 1.0; }
};

/// Negative/positive weights of the per-class binary cross-entropy.
struct BinaryTaskWeights {
  double w0 = 1.0;
  double w1 = 1.0;

  void validate() const {
    if (!(w0 > 0.0) || !(w1 > 0.0)) throw InvalidArgument("binary task weights must be strictly positive");
  }
  /// Inverse class frequency for a balanced K-class problem: w0 = 1, w1 = K - 1.
  static BinaryTaskWeights inverse_frequency(int num_classes) {
    return {1.0, static_cast<double>(num_classes - 1)};
  }
};

template <typename Scalar>
struct LossAndGrad {
  Scalar value{};
  Vector<Scalar> grad;
};

namespace detail {

template <typename Scalar>
void require_same_length(const Vector<Scalar>& a, const Vector<Scalar>& b, const char* what) {
  if (a.size() != b.size())
    throw ShapeError(std::string(what) + ": length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
}

template <typename Scalar>
Scalar safe_log(Scalar p) {
  return std::log(std::max(p, Scalar(kProbFloor)));
}

}  // namespace detail

template <typename Scalar>
bool is_prob_vector(const Vector<Scalar>& p, double tol = kSimplexTol) {
  if (p.size() < 1 || !p.allFinite() || (p.array() < Scalar(0)).any()) return false;
  return std::abs(double(p.sum()) - 1.0) <= tol;
}

template <typename Scalar>
void require_prob_vector(const Vector<Scalar>& p, const char* what) {
  if (!is_prob_vector(p)) throw InvariantViolation(std::string(what) + ": not a probability vector");
}

/// softmax(z / tau), shifted by the max logit.
template <typename Scalar>
ProbVector<Scalar> tempered_softmax(const LogitVector<Scalar>& z, Scalar tau) {
  if (!(tau > Scalar(0))) throw InvalidArgument("tempered_softmax: tau must be positive");
  if (z.size() == 0 || !z.allFinite()) throw InvalidArgument("tempered_softmax: logits must be finite and non-empty");
  Vector<Scalar> e = ((z.array() - z.maxCoeff()) / tau).exp().matrix();
  return e / e.sum();
}

template <typename Scalar>
ProbVector<Scalar> softmax(const LogitVector<Scalar>& z) {
  return tempered_softmax<Scalar>(z, Scalar(1));
}

/// Cross-entropy -sum_i y_i log p_i. With a one-hot y this is -log p at the true index.
template <typename Scalar>
Scalar ce_loss(const ProbVector<Scalar>& p, const Vector<Scalar>& y) {
  detail::require_same_length(p, y, "ce_loss");
  Scalar loss(0);
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (y[i] != Scalar(0)) loss -= y[i] * detail::safe_log(p[i]);
  return loss;
}

/// KL(q || p) with 0 log 0 = 0.
template <typename Scalar>
Scalar kl_div(const ProbVector<Scalar>& q, const ProbVector<Scalar>& p) {
  detail::require_same_length(q, p, "kl_div");
  Scalar d(0);
  for (Eigen::Index i = 0; i < q.size(); ++i)
    if (q[i] > Scalar(0)) d += q[i] * (detail::safe_log(q[i]) - detail::safe_log(p[i]));
  return std::max(d, Scalar(0));
}

template <typename Scalar>
Vector<Scalar> one_hot(int index, int length) {
  if (index < 0 || index >= length) throw InvalidArgument("one_hot: index out of range");
  Vector<Scalar> y = Vector<Scalar>::Zero(length);
  y[index] = Scalar(1);
  return y;
}

/// CE of softmax(z) against a target distribution, with gradient w.r.t. z.
template <typename Scalar>
LossAndGrad<Scalar> softmax_ce_with_grad(const LogitVector<Scalar>& z, const Vector<Scalar>& target) {
  detail::require_same_length(z, target, "softmax_ce");
  const Vector<Scalar> p = softmax(z);
  return {ce_loss(p, target), p * target.sum() - target};
}

/// KL(q || softmax(z / tau)) with gradient w.r.t. z; q is held fixed.
template <typename Scalar>
LossAndGrad<Scalar> tempered_kl_with_grad(const ProbVector<Scalar>& q, const LogitVector<Scalar>& z, Scalar tau) {
  detail::require_same_length(q, z, "tempered_kl");
  const Vector<Scalar> p = tempered_softmax(z, tau);
  return {kl_div(q, p), (p * q.sum() - q) / tau};
}

/// alpha * CE(softmax(z_s), y) + (1 - alpha) * KL(p(z_t; tau), p(z_s; tau)).
template <typename Scalar>
LossAndGrad<Scalar> vanilla_kd_loss_with_grad(const LogitVector<Scalar>& z_s, const LogitVector<Scalar>& z_t,
                                              const Vector<Scalar>& y, const KDHyperParams& hp) {
  hp.validate();
  detail::require_same_length(z_s, z_t, "vanilla_kd_loss");
  detail::require_same_length(z_s, y, "vanilla_kd_loss");
  const Scalar alpha(hp.alpha);
  const Scalar tau(hp.tau);
  const Scalar scale(hp.kl_scale());
  auto ce = softmax_ce_with_grad(z_s, y);
  auto kl = tempered_kl_with_grad(tempered_softmax(z_t, tau), z_s, tau);
  return {alpha * ce.value + (Scalar(1) - alpha) * scale * kl.value,
          alpha * ce.grad + (Scalar(1) - alpha) * scale * kl.grad};
}

template <typename Scalar>
Scalar vanilla_kd_loss(const LogitVector<Scalar>& z_s, const LogitVector<Scalar>& z_t, const Vector<Scalar>& y,
                       const KDHyperParams& hp) {
  return vanilla_kd_loss_with_grad(z_s, z_t, y, hp).value;
}

/// (1 - eps) * y + eps / C.
template <typename Scalar>
Vector<Scalar> smoothed_targets(const Vector<Scalar>& y, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw InvalidArgument("label smoothing eps must lie in [0,1)");
  const Scalar e(eps);
  return ((Scalar(1) - e) * y.array() + e / Scalar(y.size())).matrix();
}

template <typename Scalar>
LossAndGrad<Scalar> label_smoothing_loss_with_grad(const LogitVector<Scalar>& z_s, const Vector<Scalar>& y,
                                                   double eps) {
  return softmax_ce_with_grad(z_s, smoothed_targets(y, eps));
}

template <typename Scalar>
Scalar label_smoothing_loss(const LogitVector<Scalar>& z_s, const Vector<Scalar>& y, double eps) {
  return label_smoothing_loss_with_grad(z_s, y, eps).value;
}

/// Splits a K-class distribution into K binary distributions [1 - p_k, p_k].
template <typename Scalar>
std::vector<ProbVector<Scalar>> to_binary_targets(const ProbVector<Scalar>& p_t) {
  require_prob_vector(p_t, "to_binary_targets");
  std::vector<ProbVector<Scalar>> out;
  out.reserve(p_t.size());
  for (Eigen::Index k = 0; k < p_t.size(); ++k) {
    ProbVector<Scalar> pair(2);
    pair << Scalar(1) - p_t[k], p_t[k];
    out.push_back(std::move(pair));
  }
  return out;
}

/// -w0 y0 log p0 - w1 y1 log p1. Soft targets are accepted.
template <typename Scalar>
Scalar weighted_bce(const ProbVector<Scalar>& p, const Vector<Scalar>& y, const BinaryTaskWeights& w) {
  if (p.size() != 2 || y.size() != 2) throw ShapeError("weighted_bce: binary vectors required");
  w.validate();
  return -Scalar(w.w0) * y[0] * detail::safe_log(p[0]) - Scalar(w.w1) * y[1] * detail::safe_log(p[1]);
}

/// weighted_bce(softmax(z), y) and its gradient w.r.t. the two logits.
template <typename Scalar>
LossAndGrad<Scalar> weighted_bce_with_grad(const LogitVector<Scalar>& z, const Vector<Scalar>& y,
                                           const BinaryTaskWeights& w) {
  const Vector<Scalar> p = softmax(z);
  Vector<Scalar> wy(2);
  wy << Scalar(w.w0) * y[0], Scalar(w.w1) * y[1];
  return {weighted_bce(p, y, w), p * wy.sum() - wy};
}

/// Loss of a K-head binary explainer, split into its supervised and distillation parts.
template <typename Scalar>
struct ExplainerLoss {
  Scalar supervised{};  // alpha * sum_k WCE (already weighted)
  Scalar distill{};     // (1 - alpha) * sum_k KL (already weighted)
  std::vector<Vector<Scalar>> head_grads;

  Scalar total() const { return supervised + distill; }
};

/// Shared core of the explainer objectives. `targets[k]` is the binary
/// supervision for head k; `teacher` (optional) holds K binary teacher
/// distributions already at temperature tau.
template <typename Scalar>
ExplainerLoss<Scalar> explainer_objective_with_grad(const std::vector<LogitVector<Scalar>>& head_logits,
                                                    const std::vector<Vector<Scalar>>& targets,
                                                    const std::vector<ProbVector<Scalar>>* teacher, double alpha,
                                                    double tau, bool scale_kl, const BinaryTaskWeights& w) {
  const std::size_t K = head_logits.size();
  if (K < 2) throw ShapeError("explainer objective: at least two heads required");
  if (targets.size() != K) throw ShapeError("explainer objective: target count does not match heads");
  if (teacher && teacher->size() != K) throw ShapeError("explainer objective: teacher class count does not match heads");
  w.validate();
  const Scalar a(alpha);
  const Scalar t(tau);
  const Scalar scale(scale_kl ? tau * tau : 1.0);
  ExplainerLoss<Scalar> out;
  out.head_grads.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (head_logits[k].size() != 2) throw ShapeError("explainer objective: head logits must be pairs");
    auto wce = weighted_bce_with_grad(head_logits[k], targets[k], w);
    out.supervised += a * wce.value;
    Vector<Scalar> g = a * wce.grad;
    if (teacher) {
      auto kl = tempered_kl_with_grad((*teacher)[k], head_logits[k], t);
      out.distill += (Scalar(1) - a) * scale * kl.value;
      g += (Scalar(1) - a) * scale * kl.grad;
    }
    out.head_grads.push_back(std::move(g));
  }
  return out;
}

/// Binary one-hot targets for class `label`: head k gets [0,1] iff label == k.
template <typename Scalar>
std::vector<Vector<Scalar>> binary_label_targets(int label, int num_classes) {
  if (label < 0 || label >= num_classes) throw InvalidArgument("class index out of range");
  std::vector<Vector<Scalar>> out;
  for (int k = 0; k < num_classes; ++k) {
    Vector<Scalar> y(2);
    y << Scalar(k == label ? 0 : 1), Scalar(k == label ? 1 : 0);
    out.push_back(std::move(y));
  }
  return out;
}

/// Sum over heads of alpha * WCE + (1 - alpha) * KL(q_k, p_k). `teacher_probs`
/// is the teacher's K-class distribution already at temperature tau.
template <typename Scalar>
ExplainerLoss<Scalar> explainer_kd_objective_with_grad(const std::vector<LogitVector<Scalar>>& head_logits,
                                                       const ProbVector<Scalar>& teacher_probs, int label,
                                                       const KDHyperParams& hp, const BinaryTaskWeights& w) {
  hp.validate();
  if (std::size_t(teacher_probs.size()) != head_logits.size())
    throw ShapeError("explainer_kd_objective: " + std::to_string(head_logits.size()) + " heads vs " +
                     std::to_string(teacher_probs.size()) + " teacher classes");
  const auto teacher = to_binary_targets(teacher_probs);
  return explainer_objective_with_grad(head_logits, binary_label_targets<Scalar>(label, int(head_logits.size())),
                                       &teacher, hp.alpha, hp.tau, hp.scale_kl_by_tau_sq, w);
}

template <typename Scalar>
Scalar explainer_kd_objective(const std::vector<LogitVector<Scalar>>& head_logits,
                              const ProbVector<Scalar>& teacher_probs, int label, const KDHyperParams& hp,
                              const BinaryTaskWeights& w) {
  return explainer_kd_objective_with_grad(head_logits, teacher_probs, label, hp, w).total();
}

/// Shannon entropy (natural log) of one weight vector.
template <typename Scalar>
Scalar entropy(const ProbVector<Scalar>& a) {
  Scalar h(0);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (a[i] > Scalar(0)) h -= a[i] * detail::safe_log(a[i]);
  return h;
}

/// dH/dv for a = softmax(v / T): -(1/T) a .* (log a - sum a log a).
template <typename Scalar>
Vector<Scalar> entropy_grad_wrt_logits(const ProbVector<Scalar>& a, Scalar temperature) {
  Vector<Scalar> log_a = a.unaryExpr([](Scalar x) { return detail::safe_log(x); });
  const Scalar mean_log = a.dot(log_a);
  return -(a.array() * (log_a.array() - mean_log)).matrix() / temperature;
}

/// dH/da (before the softmax): -(log a + 1).
template <typename Scalar>
Vector<Scalar> entropy_grad_wrt_weights(const ProbVector<Scalar>& a) {
  return (-a.unaryExpr([](Scalar x) { return detail::safe_log(x); }).array() - Scalar(1)).matrix();
}

/// Sum of the entropies of every weight vector in the snapshot.
inline double attention_entropy(const AttentionSnapshot& snapshot) {
  double total = 0.0;
  for (const auto& m : snapshot.modules) {
    const Vector<double> a = m.weight_vector();
    if (!is_prob_vector(a))
      throw InvariantViolation("attention_entropy: module (" + std::to_string(m.stage) + "," +
                               std::to_string(m.block) + ") weights are not on the simplex");
    total += entropy(a);
  }
  return total;
}

/// (1 - alpha) KL + alpha CE + gamma H(A).
template <typename Scalar>
Scalar vam_objective(const LogitVector<Scalar>& z_s, const LogitVector<Scalar>& z_t, const Vector<Scalar>& y,
                     const KDHyperParams& hp, const AttentionSnapshot& snapshot) {
  return vanilla_kd_loss(z_s, z_t, y, hp) + Scalar(hp.gamma) * Scalar(attention_entropy(snapshot));
}

}  // namespace kdx
