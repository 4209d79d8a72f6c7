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

#include "kdx/backbone.hpp"

#include <algorithm>
#include <cctype>

namespace kdx {

std::string to_string(Family f) {
  switch (f) {
    case Family::resnet18: return "resnet18-like";
    case Family::vgg8: return "vgg8-like";
    case Family::wrn16_2: return "wrn-16-2-like";
    case Family::wrn40_1: return "wrn-40-1-like";
    case Family::tiny_cnn: return "tiny-cnn";
  }
  return "unknown";
}

Family parse_family(const std::string& name) {
  std::string n;
  for (char c : name) n.push_back(char(std::tolower(static_cast<unsigned char>(c))));
  if (n.size() > 5 && n.ends_with("-like")) n.resize(n.size() - 5);
  if (n == "resnet18") return Family::resnet18;
  if (n == "vgg8") return Family::vgg8;
  if (n == "wrn-16-2" || n == "wrn16_2") return Family::wrn16_2;
  if (n == "wrn-40-1" || n == "wrn40_1") return Family::wrn40_1;
  if (n == "tiny-cnn" || n == "tiny_cnn" || n == "tiny") return Family::tiny_cnn;
  throw ConfigError("unknown backbone family '" + name + "'");
}

BackboneSpec BackboneSpec::make(Family family, int num_classes, int in_height, int in_width, int in_channels) {
  BackboneSpec s;
  s.family = family;
  s.num_classes = num_classes;
  s.in_height = in_height;
  s.in_width = in_width;
  s.in_channels = in_channels;
  switch (family) {
    case Family::tiny_cnn:
      s.widths = {16, 32, 64};
      s.depths = {1, 1, 1};
      break;
    case Family::vgg8:
      s.widths = {64, 128, 256, 512, 512};
      s.depths = {1, 1, 1, 1, 1};
      break;
    case Family::wrn16_2:
      s.widths = {16, 32, 64, 128};
      s.depths = {1, 2, 2, 2};
      break;
    case Family::wrn40_1:
      s.widths = {16, 16, 32, 64};
      s.depths = {1, 6, 6, 6};
      break;
    case Family::resnet18:
      s.widths = {64, 64, 128, 256, 512};
      s.depths = {1, 2, 2, 2, 2};
      break;
  }
  s.validate();
  return s;
}

StageLayout stage_layout(const BackboneSpec& spec, int stage) {
  switch (spec.family) {
    case Family::tiny_cnn:
      return {BlockKind::conv_bn_relu, stage == 0 ? 1 : 2, false};
    case Family::vgg8:
      return {BlockKind::conv_bn_relu, 1, stage + 1 < spec.num_stages()};
    case Family::wrn16_2:
    case Family::wrn40_1:
      if (stage == 0) return {BlockKind::conv_only, 1, false};
      return {BlockKind::preact_basic, stage == 1 ? 1 : 2, false};
    case Family::resnet18:
      if (stage == 0) return {BlockKind::conv_bn_relu, 1, false};
      return {BlockKind::postact_basic, stage == 1 ? 1 : 2, false};
  }
  return {BlockKind::conv_bn_relu, 1, false};
}

bool has_tail_norm(Family f) { return f == Family::wrn16_2 || f == Family::wrn40_1; }

void BackboneSpec::validate() const {
  if (num_classes < 2) throw ConfigError("backbone needs at least two classes");
  if (widths.empty() || widths.size() != depths.size()) throw ConfigError("backbone widths/depths mismatch");
  if (in_channels < 1 || in_height < 1 || in_width < 1) throw ConfigError("backbone input extents must be positive");
  int h = in_height, w = in_width;
  for (int s = 0; s < num_stages(); ++s) {
    if (widths[std::size_t(s)] < 1 || depths[std::size_t(s)] < 1)
      throw ConfigError("stage " + std::to_string(s + 1) + " has non-positive width or depth");
    const StageLayout l = stage_layout(*this, s);
    h = (h + 2 - 3) / l.stride + 1;
    w = (w + 2 - 3) / l.stride + 1;
    if (l.pool_after) {
      h /= 2;
      w /= 2;
    }
    if (h < 1 || w < 1)
      throw ConfigError("input " + std::to_string(in_height) + "x" + std::to_string(in_width) +
                        " is too small for stage " + std::to_string(s + 1) + " of " + to_string(family));
  }
}

template <typename Scalar>
Network<Scalar>::Network(BackboneSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), gate_rng_(seed ^ 0x9E3779B97F4A7C15ULL) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  LayerFactory<Scalar> f(params_, rng);
  int in = spec_.in_channels;
  for (int s = 0; s < spec_.num_stages(); ++s) {
    stages.push_back(make_stage(f, spec_, s, in, spec_.widths[std::size_t(s)], "stage" + std::to_string(s + 1)));
    in = spec_.widths[std::size_t(s)];
  }
  if (has_tail_norm(spec_.family)) tail = f.bn("tail", in);
  fc = f.linear("fc", in, spec_.num_classes);
}

template <typename Scalar>
Var Network<Scalar>::forward(Tape<Scalar>& tape, Var x, bool training, GateLog<Scalar>* gates) const {
  const Shape s = tape.value(x).shape();
  if (s.c != spec_.in_channels || s.h != spec_.in_height || s.w != spec_.in_width)
    throw ShapeError("network input " + s.str() + " does not match " + spec_.input_shape(s.n).str());
  Var h = x;
  for (const auto& stage : stages)
    for (const auto& b : stage) h = b.forward(tape, h, training, gates);
  if (tail) h = tape.relu(tail->forward(tape, h, training));
  return fc.forward(tape, tape.global_avg_pool(h));
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::logits(const Tensor<Scalar>& x) const {
  Tape<Scalar> tape(false);
  return tape.value(forward(tape, tape.input(x), false));
}

template <typename Scalar>
std::vector<ConvLayer<Scalar>*> Network<Scalar>::conv_layers() {
  std::vector<ConvLayer<Scalar>*> out;
  for (auto& stage : stages)
    for (auto& b : stage) b.for_each_conv([&](ConvLayer<Scalar>& c) { out.push_back(&c); });
  return out;
}

template <typename Scalar>
std::vector<const ConvLayer<Scalar>*> Network<Scalar>::conv_layers() const {
  auto layers = const_cast<Network*>(this)->conv_layers();
  return {layers.begin(), layers.end()};
}

template <typename Scalar>
bool Network<Scalar>::has_gates() const {
  for (const auto* c : conv_layers())
    if (c->wrapped()) return true;
  return false;
}

template <typename Scalar>
AttentionSnapshot Network<Scalar>::snapshot() const {
  AttentionSnapshot snap;
  int ordinal = 0;
  for (const auto* c : conv_layers()) {
    if (!c->wrapped()) continue;
    ++ordinal;
    const auto logits = c->gate->value.rows();
    for (int j = 0; j < c->blocks_out; ++j) {
      AttentionRecord r;
      r.stage = ordinal;
      r.block = j;
      Vector<double> v = logits.row(j).transpose().template cast<double>();
      Vector<double> a;
      if (c->hard_gate) {
        a = c->hard_gate->rows().row(j).transpose().template cast<double>();
      } else {
        a = attention_weights(AttentionModule<double>{v, 1.0});
      }
      for (int m = 0; m < c->groups_in; ++m) {
        r.sources.push_back(c->name + "/g" + std::to_string(m));
        r.logits.push_back(v[m]);
        r.weights.push_back(a[m]);
      }
      snap.modules.push_back(std::move(r));
    }
  }
  return snap;
}

template <typename Scalar>
void Network<Scalar>::harden_gates() {
  for (auto* c : conv_layers()) {
    if (!c->wrapped()) continue;
    Tensor<Scalar> hard(c->gate->value.shape());
    const auto logits = c->gate->value.rows();
    for (Eigen::Index j = 0; j < logits.rows(); ++j) {
      const Vector<Scalar> a = attention_weights(AttentionModule<Scalar>{logits.row(j).transpose(), Scalar(1)});
      hard.rows()(j, argmax_lowest(a)) = Scalar(1);
    }
    c->hard_gate = std::move(hard);
  }
}

template class Network<float>;
template class Network<double>;

}  // namespace kdx
