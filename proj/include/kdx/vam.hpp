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
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kdx/attention.hpp"
#include "kdx/backbone.hpp"
#include "kdx/conv.hpp"

namespace kdx {

/// A convolution whose filters are read as `blocks_out` output blocks times
/// `groups_in` input groups.
struct VamLayerSpec {
  int c_in = 1;
  int c_out = 1;
  int kernel = 3;
  int groups_in = 1;   // M
  int blocks_out = 1;  // N
  int stride = 1;
  int pad = 1;

  void validate() const {
    if (c_in < 1 || c_out < 1 || kernel < 1 || stride < 1 || pad < 0)
      throw ConfigError("VAM layer extents must be positive");
    if (groups_in < 1 || blocks_out < 1) throw ConfigError("VAM layer needs M, N >= 1");
    if (c_in % groups_in != 0)
      throw ConfigError("VAM layer: M=" + std::to_string(groups_in) + " does not divide C_in=" + std::to_string(c_in));
    if (c_out % blocks_out != 0)
      throw ConfigError("VAM layer: N=" + std::to_string(blocks_out) + " does not divide C_out=" +
                        std::to_string(c_out));
  }
  int in_per_group() const { return c_in / groups_in; }
  int out_per_block() const { return c_out / blocks_out; }
  ConvGeometry geometry() const { return {kernel, stride, pad}; }
};

/// Filter blocks K_{j,m} of shape (C_out/N, C_in/M, S, S) plus one gate of
/// arity M per output block.
template <typename Scalar>
struct VamLayer {
  VamLayerSpec spec;
  std::vector<Tensor<Scalar>> filters;  // index j * M + m
  std::vector<AttentionModule<Scalar>> attention;

  const Tensor<Scalar>& block(int j, int m) const { return filters[std::size_t(j * spec.groups_in + m)]; }
  Tensor<Scalar>& block(int j, int m) { return filters[std::size_t(j * spec.groups_in + m)]; }

  /// Reassembles the (C_out, C_in, S, S) filter bank.
  Tensor<Scalar> dense_filters() const {
    const int ob = spec.out_per_block(), ig = spec.in_per_group(), k = spec.kernel;
    Tensor<Scalar> dense(Shape{spec.c_out, spec.c_in, k, k});
    for (int j = 0; j < spec.blocks_out; ++j)
      for (int m = 0; m < spec.groups_in; ++m)
        for (int o = 0; o < ob; ++o)
          for (int i = 0; i < ig; ++i)
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b) dense(j * ob + o, m * ig + i, a, b) = block(j, m)(o, i, a, b);
    return dense;
  }

  static VamLayer from_dense(const VamLayerSpec& spec, const Tensor<Scalar>& dense,
                             std::vector<AttentionModule<Scalar>> attention) {
    spec.validate();
    const int ob = spec.out_per_block(), ig = spec.in_per_group(), k = spec.kernel;
    if (!(dense.shape() == Shape{spec.c_out, spec.c_in, k, k}))
      throw ShapeError("VamLayer::from_dense: filter bank " + dense.shape().str());
    if (int(attention.size()) != spec.blocks_out) throw ShapeError("VamLayer::from_dense: need one gate per block");
    VamLayer layer;
    layer.spec = spec;
    layer.attention = std::move(attention);
    for (const auto& a : layer.attention)
      if (a.logits.size() != spec.groups_in) throw ShapeError("VamLayer::from_dense: gate arity must equal M");
    for (int j = 0; j < spec.blocks_out; ++j)
      for (int m = 0; m < spec.groups_in; ++m) {
        Tensor<Scalar> blk(Shape{ob, ig, k, k});
        for (int o = 0; o < ob; ++o)
          for (int i = 0; i < ig; ++i)
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b) blk(o, i, a, b) = dense(j * ob + o, m * ig + i, a, b);
        layer.filters.push_back(std::move(blk));
      }
    return layer;
  }

  template <typename Rng>
  static VamLayer random(const VamLayerSpec& spec, Rng& rng, double logit_std = 1.0) {
    spec.validate();
    Tensor<Scalar> dense(Shape{spec.c_out, spec.c_in, spec.kernel, spec.kernel});
    std::normal_distribution<double> w(0.0, 1.0 / std::sqrt(double(dense.shape().sample_size())));
    for (Eigen::Index i = 0; i < dense.size(); ++i) dense.array()[i] = Scalar(w(rng));
    std::normal_distribution<double> v(0.0, logit_std);
    std::vector<AttentionModule<Scalar>> gates(std::size_t(spec.blocks_out));
    for (auto& g : gates) {
      g.logits.resize(spec.groups_in);
      for (int m = 0; m < spec.groups_in; ++m) g.logits[m] = Scalar(v(rng));
    }
    return from_dense(spec, dense, std::move(gates));
  }
};

/// Channels [begin, begin + count) of every sample.
template <typename Scalar>
Tensor<Scalar> channel_slice(const Tensor<Scalar>& x, int begin, int count) {
  const Shape s = x.shape();
  if (begin < 0 || count < 1 || begin + count > s.c) throw ShapeError("channel_slice out of range for " + s.str());
  Tensor<Scalar> out(Shape{s.n, count, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    out.array().segment(Eigen::Index(n) * count * s.plane(), Eigen::Index(count) * s.plane()) =
        x.array().segment((Eigen::Index(n) * s.c + begin) * s.plane(), Eigen::Index(count) * s.plane());
  return out;
}

namespace detail {
template <typename Scalar>
void add_channels(Tensor<Scalar>& dst, int begin, const Tensor<Scalar>& src, Scalar scale) {
  const Shape d = dst.shape(), s = src.shape();
  for (int n = 0; n < s.n; ++n)
    dst.array().segment((Eigen::Index(n) * d.c + begin) * d.plane(), s.sample_size()) +=
        scale * src.array().segment(Eigen::Index(n) * s.sample_size(), s.sample_size());
}
}  // namespace detail

/// Output block j = sum_m a_{j,m} (F_m conv K_{j,m}); blocks are concatenated along channels.
template <typename Scalar>
Tensor<Scalar> vam_forward(const Tensor<Scalar>& F, const VamLayer<Scalar>& layer) {
  const VamLayerSpec& sp = layer.spec;
  if (F.shape().c != sp.c_in)
    throw ShapeError("vam_forward: input has " + std::to_string(F.shape().c) + " channels, layer expects " +
                     std::to_string(sp.c_in));
  const ConvGeometry g = sp.geometry();
  const Shape s = F.shape();
  Tensor<Scalar> out(Shape{s.n, sp.c_out, g.out_extent(s.h), g.out_extent(s.w)});
  for (int m = 0; m < sp.groups_in; ++m) {
    const Tensor<Scalar> Fm = channel_slice(F, m * sp.in_per_group(), sp.in_per_group());
    for (int j = 0; j < sp.blocks_out; ++j) {
      const Vector<Scalar> a = attention_weights(layer.attention[std::size_t(j)]);
      detail::add_channels(out, j * sp.out_per_block(), conv2d(Fm, layer.block(j, m), g), a[m]);
    }
  }
  return out;
}

/// Plain convolution with the reassembled filter bank.
template <typename Scalar>
Tensor<Scalar> dense_equivalent_output(const Tensor<Scalar>& F, const VamLayer<Scalar>& layer) {
  if (F.shape().c != layer.spec.c_in) throw ShapeError("dense_equivalent_output: channel mismatch");
  return conv2d(F, layer.dense_filters(), layer.spec.geometry());
}

template <typename Scalar>
struct VamGradients {
  std::vector<Tensor<Scalar>> filters;  // same indexing as VamLayer::filters
  std::vector<Vector<Scalar>> logits;   // one per output block
  Tensor<Scalar> input;
};

/// Analytic gradients of <grad_out, vam_forward(F, layer)>.
template <typename Scalar>
VamGradients<Scalar> vam_backward(const Tensor<Scalar>& F, const VamLayer<Scalar>& layer,
                                  const Tensor<Scalar>& grad_out) {
  const VamLayerSpec& sp = layer.spec;
  const ConvGeometry g = sp.geometry();
  VamGradients<Scalar> grads;
  grads.input = Tensor<Scalar>(F.shape());
  std::vector<Vector<Scalar>> weight_grads(std::size_t(sp.blocks_out), Vector<Scalar>::Zero(sp.groups_in));
  for (const auto& f : layer.filters) grads.filters.emplace_back(f.shape());
  for (int m = 0; m < sp.groups_in; ++m) {
    const Tensor<Scalar> Fm = channel_slice(F, m * sp.in_per_group(), sp.in_per_group());
    Tensor<Scalar> dFm(Fm.shape());
    for (int j = 0; j < sp.blocks_out; ++j) {
      const Vector<Scalar> a = attention_weights(layer.attention[std::size_t(j)]);
      const Tensor<Scalar> gy = channel_slice(grad_out, j * sp.out_per_block(), sp.out_per_block());
      const Tensor<Scalar> part = conv2d(Fm, layer.block(j, m), g);
      weight_grads[std::size_t(j)][m] = (gy.array() * part.array()).sum();
      Tensor<Scalar> dk(layer.block(j, m).shape());
      Tensor<Scalar> dx(Fm.shape());
      conv2d_backward(Fm, layer.block(j, m), gy, g, &dx, &dk);
      grads.filters[std::size_t(j * sp.groups_in + m)].array() += a[m] * dk.array();
      dFm.array() += a[m] * dx.array();
    }
    detail::add_channels(grads.input, m * sp.in_per_group(), dFm, Scalar(1));
  }
  for (int j = 0; j < sp.blocks_out; ++j) {
    const auto& gate = layer.attention[std::size_t(j)];
    grads.logits.push_back(attention_backward(attention_weights(gate), weight_grads[std::size_t(j)], gate.temperature));
  }
  return grads;
}

struct WrappedLayer {
  std::string name;
  int c_in = 0;
  int c_out = 0;
  int groups_in = 1;
  int blocks_out = 1;
};

struct WrapReport {
  std::vector<WrappedLayer> wrapped;
  std::vector<std::string> skipped;   // eligible but channels_per_block does not divide
  std::vector<std::string> excluded;  // stem and 1x1 shortcut convolutions
  std::int64_t gate_parameters = 0;
  std::int64_t backbone_parameters = 0;

  double overhead() const { return backbone_parameters ? double(gate_parameters) / double(backbone_parameters) : 0.0; }
};

/// Chooses (M, N) for an eligible convolution, or nullopt to leave it plain.
template <typename Scalar>
using VamGrouping = std::function<std::optional<std::pair<int, int>>(const ConvLayer<Scalar>&)>;

/// Attaches gates to every eligible convolution of `net` (stage >= 2, not a
/// 1x1 shortcut). Gates start near uniform with N(0, 0.01^2) logits.
template <typename Scalar>
WrapReport wrap_network(Network<Scalar>& net, const VamGrouping<Scalar>& grouping) {
  WrapReport report;
  LayerFactory<Scalar> f(net.params(), net.gate_rng());
  for (std::size_t s = 0; s < net.stages.size(); ++s)
    for (auto& b : net.stages[s])
      b.for_each_conv([&](ConvLayer<Scalar>& c) {
        if (s == 0 || c.stem || c.shortcut) {
          report.excluded.push_back(c.name);
          return;
        }
        if (c.wrapped()) return;
        const auto mn = grouping(c);
        if (!mn) {
          report.skipped.push_back(c.name);
          return;
        }
        c.groups_in = mn->first;
        c.blocks_out = mn->second;
        c.gate = &f.gate(c.name + ".gate", c.blocks_out, c.groups_in);
        report.wrapped.push_back({c.name, c.in, c.out, c.groups_in, c.blocks_out});
      });
  report.gate_parameters = net.gate_parameter_count();
  report.backbone_parameters = net.backbone_parameter_count();
  return report;
}

/// M = C_in / channels_per_block, N = C_out / channels_per_block.
template <typename Scalar>
WrapReport wrap_network(Network<Scalar>& net, int channels_per_block) {
  if (channels_per_block < 1) throw ConfigError("channels_per_block must be positive");
  return wrap_network<Scalar>(net, [channels_per_block](const ConvLayer<Scalar>& c) -> std::optional<std::pair<int, int>> {
    if (c.in % channels_per_block != 0 || c.out % channels_per_block != 0) return std::nullopt;
    return std::pair{c.in / channels_per_block, c.out / channels_per_block};
  });
}

/// Builds a backbone and wraps it.
template <typename Scalar>
Network<Scalar> wrap_network(const BackboneSpec& spec, int channels_per_block, std::uint64_t seed,
                             WrapReport* report = nullptr) {
  Network<Scalar> net(spec, seed);
  WrapReport r = wrap_network(net, channels_per_block);
  if (report) *report = std::move(r);
  return net;
}

/// Channels per virtual block used for each family in the VAM experiments.
int default_channels_per_block(Family family);

}  // namespace kdx
