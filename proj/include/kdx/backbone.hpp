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
#include <random>
#include <string>
#include <vector>

#include "kdx/attention.hpp"
#include "kdx/parameter.hpp"
#include "kdx/tape.hpp"

namespace kdx {

enum class Family { resnet18, vgg8, wrn16_2, wrn40_1, tiny_cnn };

std::string to_string(Family f);
/// Accepts "resnet18-like", "vgg8", "wrn-16-2-like", "tiny-cnn", ... (the "-like" suffix is optional).
Family parse_family(const std::string& name);

/// Stage layout of a backbone. Stage 1 is the undivided first block B^1
/// (the stem); later stages are the ones the explainer splits into experts.
struct BackboneSpec {
  Family family = Family::tiny_cnn;
  std::vector<int> widths;
  std::vector<int> depths;
  int in_channels = 3;
  int in_height = 32;
  int in_width = 32;
  int num_classes = 10;

  static BackboneSpec make(Family family, int num_classes, int in_height = 32, int in_width = 32,
                           int in_channels = 3);

  int num_stages() const { return int(widths.size()); }
  Shape input_shape(int batch) const { return {batch, in_channels, in_height, in_width}; }
  void validate() const;
};

/// Per-forward record of gate weight tables, used to seed entropy gradients.
template <typename Scalar>
struct GateUse {
  Var weights;  // (rows, arity, 1, 1) table on the tape
  Scalar temperature = Scalar(1);
  bool trainable = true;
};
template <typename Scalar>
using GateLog = std::vector<GateUse<Scalar>>;

template <typename Scalar>
struct BatchNormLayer {
  Parameter<Scalar>* gamma = nullptr;
  Parameter<Scalar>* beta = nullptr;
  Parameter<Scalar>* running_mean = nullptr;
  Parameter<Scalar>* running_var = nullptr;

  Var forward(Tape<Scalar>& tape, Var x, bool training) const {
    return tape.batch_norm(x, tape.parameter(*gamma), tape.parameter(*beta), running_mean->value, running_var->value,
                           training);
  }
};

/// Convolution, optionally carrying a virtual-attention gate table of shape
/// (blocks_out, groups_in): output block j sees input group m scaled by a[j, m].
template <typename Scalar>
struct ConvLayer {
  std::string name;
  int in = 0;
  int out = 0;
  ConvGeometry geom;
  bool shortcut = false;
  bool stem = false;
  Parameter<Scalar>* weight = nullptr;

  Parameter<Scalar>* gate = nullptr;
  int groups_in = 1;
  int blocks_out = 1;
  std::optional<Tensor<Scalar>> hard_gate;

  bool wrapped() const { return gate != nullptr; }

  Var forward(Tape<Scalar>& tape, Var x, GateLog<Scalar>* log) const {
    Var w = tape.parameter(*weight);
    if (gate) {
      Var a;
      if (hard_gate) {
        a = tape.constant(*hard_gate);
      } else {
        a = tape.softmax_rows(tape.parameter(*gate), Scalar(1));
      }
      if (log) log->push_back({a, Scalar(1), !hard_gate.has_value()});
      w = tape.block_scale(w, a);
    }
    return tape.conv2d(x, w, geom);
  }
};

template <typename Scalar>
struct LinearLayer {
  Parameter<Scalar>* weight = nullptr;  // (out, in, 1, 1)
  Parameter<Scalar>* bias = nullptr;    // (1, out, 1, 1)

  Var forward(Tape<Scalar>& tape, Var x) const {
    return tape.linear(x, tape.parameter(*weight), tape.parameter(*bias));
  }
};

enum class BlockKind {
  conv_only,      // stem of the pre-activation families
  conv_bn_relu,   // tiny-cnn and VGG
  preact_basic,   // wide ResNet basic block (BN-ReLU-conv x2)
  postact_basic,  // ResNet basic block (conv-BN-ReLU, conv-BN, add, ReLU)
};

template <typename Scalar>
struct Block {
  BlockKind kind = BlockKind::conv_bn_relu;
  int in = 0;
  int out = 0;
  int stride = 1;
  bool pool_after = false;
  ConvLayer<Scalar> conv1, conv2;
  BatchNormLayer<Scalar> bn1, bn2;
  std::optional<ConvLayer<Scalar>> proj;
  std::optional<BatchNormLayer<Scalar>> proj_bn;

  Var forward(Tape<Scalar>& tape, Var x, bool training, GateLog<Scalar>* log) const {
    Var y;
    switch (kind) {
      case BlockKind::conv_only:
        y = conv1.forward(tape, x, log);
        break;
      case BlockKind::conv_bn_relu:
        y = tape.relu(bn1.forward(tape, conv1.forward(tape, x, log), training));
        break;
      case BlockKind::preact_basic: {
        Var act = tape.relu(bn1.forward(tape, x, training));
        Var h = conv1.forward(tape, act, log);
        h = conv2.forward(tape, tape.relu(bn2.forward(tape, h, training)), log);
        Var skip = proj ? proj->forward(tape, act, log) : x;
        y = tape.add(h, skip);
        break;
      }
      case BlockKind::postact_basic: {
        Var h = tape.relu(bn1.forward(tape, conv1.forward(tape, x, log), training));
        h = bn2.forward(tape, conv2.forward(tape, h, log), training);
        Var skip = proj ? proj_bn->forward(tape, proj->forward(tape, x, log), training) : x;
        y = tape.relu(tape.add(h, skip));
        break;
      }
    }
    return pool_after ? tape.max_pool2(y) : y;
  }

  template <typename Fn>
  void for_each_conv(Fn&& fn) {
    fn(conv1);
    if (kind == BlockKind::preact_basic || kind == BlockKind::postact_basic) fn(conv2);
    if (proj) fn(*proj);
  }
};

/// Creates parameters in a fixed order from one RNG stream.
template <typename Scalar>
class LayerFactory {
 public:
  LayerFactory(ParameterStore<Scalar>& store, std::mt19937_64& rng) : store_(store), rng_(rng) {}

  ConvLayer<Scalar> conv(const std::string& name, int in, int out, int kernel, int stride) {
    ConvLayer<Scalar> c;
    c.name = name;
    c.in = in;
    c.out = out;
    c.geom = {kernel, stride, kernel / 2};
    c.weight = &store_.add(name + ".weight", Shape{out, in, kernel, kernel}, ParamGroup::weight);
    kaiming_normal(c.weight->value, rng_);
    return c;
  }

  BatchNormLayer<Scalar> bn(const std::string& name, int channels) {
    BatchNormLayer<Scalar> b;
    b.gamma = &store_.add(name + ".gamma", Shape{1, channels, 1, 1}, ParamGroup::no_decay);
    b.gamma->value.array().setOnes();
    b.beta = &store_.add(name + ".beta", Shape{1, channels, 1, 1}, ParamGroup::no_decay);
    b.running_mean = &store_.add(name + ".running_mean", Shape{1, channels, 1, 1}, ParamGroup::buffer);
    b.running_var = &store_.add(name + ".running_var", Shape{1, channels, 1, 1}, ParamGroup::buffer);
    b.running_var->value.array().setOnes();
    return b;
  }

  LinearLayer<Scalar> linear(const std::string& name, int in, int out) {
    LinearLayer<Scalar> l;
    l.weight = &store_.add(name + ".weight", Shape{out, in, 1, 1}, ParamGroup::weight);
    const double bound = 1.0 / std::sqrt(double(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < l.weight->value.size(); ++i) l.weight->value.array()[i] = Scalar(dist(rng_));
    l.bias = &store_.add(name + ".bias", Shape{1, out, 1, 1}, ParamGroup::no_decay);
    return l;
  }

  /// Gate logits of shape (rows, arity), drawn from N(0, 0.01^2).
  Parameter<Scalar>& gate(const std::string& name, int rows, int arity) {
    auto& p = store_.add(name, Shape{rows, arity, 1, 1}, ParamGroup::attention);
    std::normal_distribution<double> dist(0.0, 0.01);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.array()[i] = Scalar(dist(rng_));
    return p;
  }

  Block<Scalar> block(BlockKind kind, const std::string& name, int in, int out, int stride, bool pool_after);

  ParameterStore<Scalar>& store() { return store_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  ParameterStore<Scalar>& store_;
  std::mt19937_64& rng_;
};

template <typename Scalar>
Block<Scalar> LayerFactory<Scalar>::block(BlockKind kind, const std::string& name, int in, int out, int stride,
                                          bool pool_after) {
  Block<Scalar> b;
  b.kind = kind;
  b.in = in;
  b.out = out;
  b.stride = stride;
  b.pool_after = pool_after;
  switch (kind) {
    case BlockKind::conv_only:
      b.conv1 = conv(name + ".conv1", in, out, 3, stride);
      b.conv1.stem = true;
      break;
    case BlockKind::conv_bn_relu:
      b.conv1 = conv(name + ".conv1", in, out, 3, stride);
      b.bn1 = bn(name + ".bn1", out);
      break;
    case BlockKind::preact_basic:
      b.bn1 = bn(name + ".bn1", in);
      b.conv1 = conv(name + ".conv1", in, out, 3, stride);
      b.bn2 = bn(name + ".bn2", out);
      b.conv2 = conv(name + ".conv2", out, out, 3, 1);
      if (in != out || stride != 1) {
        b.proj = conv(name + ".shortcut", in, out, 1, stride);
        b.proj->shortcut = true;
      }
      break;
    case BlockKind::postact_basic:
      b.conv1 = conv(name + ".conv1", in, out, 3, stride);
      b.bn1 = bn(name + ".bn1", out);
      b.conv2 = conv(name + ".conv2", out, out, 3, 1);
      b.bn2 = bn(name + ".bn2", out);
      if (in != out || stride != 1) {
        b.proj = conv(name + ".shortcut", in, out, 1, stride);
        b.proj->shortcut = true;
        b.proj_bn = bn(name + ".shortcut_bn", out);
      }
      break;
  }
  return b;
}

/// Block kind, first-block stride and pooling used by `family` at `stage` (0-based).
struct StageLayout {
  BlockKind kind;
  int stride;
  bool pool_after;
};
StageLayout stage_layout(const BackboneSpec& spec, int stage);
/// True when the family ends with a BN-ReLU after its last stage.
bool has_tail_norm(Family f);

/// Builds `depth` blocks of one stage mapping `in` -> `out` channels.
template <typename Scalar>
std::vector<Block<Scalar>> make_stage(LayerFactory<Scalar>& f, const BackboneSpec& spec, int stage, int in, int out,
                                      const std::string& prefix) {
  const StageLayout layout = stage_layout(spec, stage);
  std::vector<Block<Scalar>> blocks;
  const int depth = spec.depths[std::size_t(stage)];
  for (int d = 0; d < depth; ++d) {
    const int bin = d == 0 ? in : out;
    const int stride = d == 0 ? layout.stride : 1;
    const bool pool = layout.pool_after && d == depth - 1;
    blocks.push_back(f.block(layout.kind, prefix + ".b" + std::to_string(d), bin, out, stride, pool));
  }
  return blocks;
}

/// A conventional multi-class network (optionally with VAM gates on its convolutions).
template <typename Scalar>
class Network {
 public:
  Network(BackboneSpec spec, std::uint64_t seed);

  const BackboneSpec& spec() const { return spec_; }
  ParameterStore<Scalar>& params() { return params_; }
  const ParameterStore<Scalar>& params() const { return params_; }

  /// Logits as a (N, K, 1, 1) node.
  Var forward(Tape<Scalar>& tape, Var x, bool training, GateLog<Scalar>* gates = nullptr) const;

  /// Eval-mode logits without recording gradients.
  Tensor<Scalar> logits(const Tensor<Scalar>& x) const;

  std::vector<ConvLayer<Scalar>*> conv_layers();
  std::vector<const ConvLayer<Scalar>*> conv_layers() const;

  bool has_gates() const;
  /// One record per output block of every gated convolution.
  AttentionSnapshot snapshot() const;
  /// Replaces every gate by its one-hot hardening.
  void harden_gates();

  /// Trainable scalars excluding gate logits.
  std::int64_t backbone_parameter_count() const {
    return params_.count() - params_.count(ParamGroup::attention);
  }
  std::int64_t gate_parameter_count() const { return params_.count(ParamGroup::attention); }

  std::vector<std::vector<Block<Scalar>>> stages;
  std::optional<BatchNormLayer<Scalar>> tail;
  LinearLayer<Scalar> fc;

  /// RNG stream for gate initialisation, separate from the weight stream so
  /// that wrapping does not perturb the backbone weights.
  std::mt19937_64& gate_rng() { return gate_rng_; }

 private:
  BackboneSpec spec_;
  ParameterStore<Scalar> params_;
  std::mt19937_64 gate_rng_;
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace kdx
