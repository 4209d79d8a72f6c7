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

#include "kdx/explainer.hpp"

namespace kdx {

ExplainerConfig ExplainerConfig::defaults(const BackboneSpec& spec, std::uint64_t seed) {
  ExplainerConfig cfg;
  cfg.seed = seed;
  cfg.experts_per_stage.assign(std::size_t(spec.num_stages()), 4);
  cfg.experts_per_stage[0] = 1;
  return cfg;
}

void ExplainerConfig::validate(const BackboneSpec& spec) const {
  spec.validate();
  if (int(experts_per_stage.size()) != spec.num_stages())
    throw ConfigError("experts_per_stage has " + std::to_string(experts_per_stage.size()) + " entries, backbone has " +
                      std::to_string(spec.num_stages()) + " stages");
  if (experts_per_stage[0] != 1) throw ConfigError("stage 1 must stay undivided (N_1 = 1)");
  for (int s = 0; s < spec.num_stages(); ++s) {
    const int n = experts_per_stage[std::size_t(s)];
    const int w = spec.widths[std::size_t(s)];
    if (n < 1 || w % n != 0)
      throw ConfigError("stage " + std::to_string(s + 1) + ": " + std::to_string(n) +
                        " experts do not divide width " + std::to_string(w));
  }
  if (!(temperature > 0.0)) throw ConfigError("attention temperature must be positive");
}

template <typename Scalar>
ExplainerModel<Scalar>::ExplainerModel(BackboneSpec spec, ExplainerConfig cfg)
    : spec_(std::move(spec)), cfg_(std::move(cfg)) {
  cfg_.validate(spec_);
  std::mt19937_64 rng(cfg_.seed);
  LayerFactory<Scalar> f(params_, rng);
  stem = make_stage(f, spec_, 0, spec_.in_channels, spec_.widths[0], "stage1");
  const int L = spec_.num_stages();
  int prev_count = 1;
  int prev_width = spec_.widths[0];
  for (int s = 1; s < L; ++s) {
    const int n = cfg_.experts_per_stage[std::size_t(s)];
    const int width = spec_.widths[std::size_t(s)] / n;
    std::vector<Expert<Scalar>> stage;
    for (int j = 0; j < n; ++j) {
      Expert<Scalar> e;
      const std::string prefix = "stage" + std::to_string(s + 1) + ".e" + std::to_string(j);
      e.stage = s + 1;
      e.index = j;
      e.in_channels = prev_width;
      e.out_channels = width;
      e.param_begin = params_.size();
      e.gate = &f.gate(prefix + ".gate", 1, prev_count);
      e.blocks = make_stage(f, spec_, s, prev_width, width, prefix);
      if (s == L - 1 && has_tail_norm(spec_.family)) e.tail = f.bn(prefix + ".tail", width);
      e.param_end = params_.size();
      stage.push_back(std::move(e));
    }
    experts.push_back(std::move(stage));
    prev_count = n;
    prev_width = width;
  }
  for (int k = 0; k < spec_.num_classes; ++k) {
    Head<Scalar> h;
    h.index = k;
    const std::string prefix = "head" + std::to_string(k);
    h.gate = &f.gate(prefix + ".gate", 1, prev_count);
    h.fc = f.linear(prefix + ".fc", prev_width, 2);
    heads.push_back(std::move(h));
  }
}

template <typename Scalar>
Var ExplainerModel<Scalar>::gate_weights(Tape<Scalar>& tape, Parameter<Scalar>* gate,
                                         const std::optional<Vector<Scalar>>& hard, GateLog<Scalar>& log) const {
  Var a;
  if (hard) {
    Tensor<Scalar> t(Shape{1, int(hard->size()), 1, 1});
    t.rows().row(0) = hard->transpose();
    a = tape.constant(std::move(t));
  } else {
    a = tape.softmax_rows(tape.parameter(*gate), Scalar(cfg_.temperature));
  }
  log.push_back({a, Scalar(cfg_.temperature), !hard.has_value()});
  return a;
}

template <typename Scalar>
ExplainerVars<Scalar> ExplainerModel<Scalar>::forward(Tape<Scalar>& tape, Var x, bool training) const {
  const Shape s = tape.value(x).shape();
  if (s.c != spec_.in_channels || s.h != spec_.in_height || s.w != spec_.in_width)
    throw ShapeError("explainer input " + s.str() + " does not match " + spec_.input_shape(s.n).str());
  ExplainerVars<Scalar> out;
  Var h = x;
  for (const auto& b : stem) h = b.forward(tape, h, training, nullptr);
  std::vector<Var> prev{h};
  for (const auto& stage : experts) {
    std::vector<Var> outs;
    for (const auto& e : stage) {
      Var a = gate_weights(tape, e.gate, e.hard, out.gates);
      Var y = tape.mix(a, 0, prev);
      for (const auto& b : e.blocks) y = b.forward(tape, y, training, nullptr);
      if (e.tail) y = tape.relu(e.tail->forward(tape, y, training));
      outs.push_back(y);
    }
    prev = std::move(outs);
  }
  for (const auto& hd : heads) {
    Var a = gate_weights(tape, hd.gate, hd.hard, out.gates);
    out.heads.push_back(hd.fc.forward(tape, tape.global_avg_pool(tape.mix(a, 0, prev))));
  }
  return out;
}

template <typename Scalar>
ExplainerVars<Scalar> ExplainerModel<Scalar>::forward_pruned(Tape<Scalar>& tape, Var x) const {
  if (!hardened_) throw ConfigError("forward_pruned requires a hardened model");
  ExplainerVars<Scalar> out;
  Var h = x;
  for (const auto& b : stem) h = b.forward(tape, h, false, nullptr);
  std::vector<std::optional<Var>> prev{h};
  for (const auto& stage : experts) {
    std::vector<std::optional<Var>> outs;
    for (const auto& e : stage) {
      if (e.prunable) {
        outs.emplace_back();
        continue;
      }
      const auto& src = prev.at(std::size_t(argmax_lowest(*e.hard)));
      if (!src) throw InvariantViolation("expert " + node_id(e.stage, e.index) + " routes to a pruned expert");
      Var y = *src;
      for (const auto& b : e.blocks) y = b.forward(tape, y, false, nullptr);
      if (e.tail) y = tape.relu(e.tail->forward(tape, y, false));
      outs.emplace_back(y);
    }
    prev = std::move(outs);
  }
  for (const auto& hd : heads) {
    const auto& src = prev.at(std::size_t(argmax_lowest(*hd.hard)));
    if (!src) throw InvariantViolation("head " + std::to_string(hd.index) + " routes to a pruned expert");
    out.heads.push_back(hd.fc.forward(tape, tape.global_avg_pool(*src)));
  }
  return out;
}

namespace {

template <typename Scalar>
AttentionRecord make_record(int stage, int block, int source_stage, const Parameter<Scalar>& gate,
                            const std::optional<Vector<Scalar>>& hard, double temperature) {
  AttentionRecord r;
  r.stage = stage;
  r.block = block;
  const Vector<double> v = gate.value.rows().row(0).transpose().template cast<double>();
  const Vector<double> a = hard ? Vector<double>(hard->template cast<double>())
                                : attention_weights(AttentionModule<double>{v, temperature});
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    r.sources.push_back(node_id(source_stage, int(k)));
    r.logits.push_back(v[k]);
    r.weights.push_back(a[k]);
  }
  return r;
}

}  // namespace

template <typename Scalar>
AttentionSnapshot ExplainerModel<Scalar>::snapshot() const {
  AttentionSnapshot snap;
  for (const auto& stage : experts)
    for (const auto& e : stage)
      snap.modules.push_back(make_record(e.stage, e.index, e.stage - 1, *e.gate, e.hard, cfg_.temperature));
  const int L = spec_.num_stages();
  for (const auto& hd : heads) snap.modules.push_back(make_record(L + 1, hd.index, L, *hd.gate, hd.hard, cfg_.temperature));
  return snap;
}

template <typename Scalar>
std::int64_t ExplainerModel<Scalar>::pruned_parameter_count() const {
  std::int64_t n = params_.count();
  for (const auto& stage : experts)
    for (const auto& e : stage) {
      if (!e.prunable) continue;
      for (std::size_t i = e.param_begin; i < e.param_end; ++i)
        if (params_[i].trainable()) n -= params_[i].value.size();
    }
  return n;
}

template <typename Scalar>
void ExplainerModel<Scalar>::copy_state_from(const ExplainerModel& other) {
  if (params_.size() != other.params_.size()) throw ShapeError("copy_state_from: parameter count differs");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!(params_[i].value.shape() == other.params_[i].value.shape()))
      throw ShapeError("copy_state_from: parameter " + params_[i].name + " shape differs");
    params_[i].value = other.params_[i].value;
  }
  for (std::size_t s = 0; s < experts.size(); ++s)
    for (std::size_t j = 0; j < experts[s].size(); ++j) {
      experts[s][j].hard = other.experts[s][j].hard;
      experts[s][j].prunable = other.experts[s][j].prunable;
    }
  for (std::size_t k = 0; k < heads.size(); ++k) heads[k].hard = other.heads[k].hard;
  hardened_ = other.hardened_;
}

template <typename Scalar>
ExplainerModel<Scalar> harden_model(const ExplainerModel<Scalar>& model) {
  ExplainerModel<Scalar> out(model.spec(), model.config());
  out.copy_state_from(model);
  const Scalar T(model.config().temperature);
  auto hard_of = [T](const Parameter<Scalar>& gate) {
    return harden(attention_weights(AttentionModule<Scalar>{gate.value.rows().row(0).transpose(), T}));
  };
  for (auto& stage : out.experts)
    for (auto& e : stage) e.hard = hard_of(*e.gate);
  for (auto& h : out.heads) h.hard = hard_of(*h.gate);

  // Walk back from the heads along the retained edges.
  if (!out.experts.empty()) {
    std::vector<bool> live(out.experts.back().size(), false);
    for (const auto& h : out.heads) live[std::size_t(argmax_lowest(*h.hard))] = true;
    for (std::size_t s = out.experts.size(); s-- > 0;) {
      auto& stage = out.experts[s];
      std::vector<bool> prev_live(s > 0 ? out.experts[s - 1].size() : 1, false);
      for (std::size_t j = 0; j < stage.size(); ++j) {
        stage[j].prunable = !live[j];
        if (live[j]) prev_live[std::size_t(argmax_lowest(*stage[j].hard))] = true;
      }
      live = std::move(prev_live);
    }
  }
  out.mark_hardened(true);
  return out;
}

template class ExplainerModel<float>;
template class ExplainerModel<double>;
template ExplainerModel<float> harden_model(const ExplainerModel<float>&);
template ExplainerModel<double> harden_model(const ExplainerModel<double>&);

}  // namespace kdx
