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
#include <functional>
#include <span>
#include <vector>

#include "kdx/conv.hpp"
#include "kdx/parameter.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode recorder for the handful of layer-level ops our networks use.
/// Forward values live on the tape; backward() replays recorded adjoints in
/// reverse order. Parameter leaves accumulate straight into Parameter::grad.
template <typename Scalar>
class Tape {
 public:
  using T = Tensor<Scalar>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var input(T value) { return push(std::move(value), false); }

  Var parameter(Parameter<Scalar>& p) {
    Node n;
    n.ref = &p.value;
    n.requires_grad = grad_enabled_;
    n.param_grad = &p.grad;
    nodes_.push_back(std::move(n));
    return {int(nodes_.size()) - 1};
  }

  /// Constant that never receives a gradient (e.g. hardened gate weights).
  Var constant(T value) { return push(std::move(value), false); }

  const T& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulated for v (zeros if nothing reached it).
  const T& grad(Var v) { return grad_of(v.id); }

  /// Adds `g` to the gradient of v before backward().
  void seed(Var v, const T& g) {
    if (!nodes_.at(v.id).requires_grad) return;
    T& dst = grad_of(v.id);
    if (!(dst.shape() == g.shape())) throw ShapeError("seed: gradient shape " + g.shape().str());
    dst.array() += g.array();
  }

  void backward() {
    for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && n.has_grad) n.backward();
    }
  }

  // ---------------------------------------------------------------- ops

  Var conv2d(Var x, Var w, ConvGeometry g) {
    Var out = push(kdx::conv2d(value(x), value(w), g), any_grad({x, w}));
    if (recording(out))
      nodes_[out.id].backward = [this, x, w, g, out] {
        T* gx = requires_grad(x) ? &grad_of(x.id) : nullptr;
        T* gw = requires_grad(w) ? &grad_of(w.id) : nullptr;
        conv2d_backward(value(x), value(w), grad_of(out.id), g, gx, gw);
      };
    return out;
  }

  /// Batch normalisation over (N, H, W). In training mode batch statistics
  /// are used and the running estimates are updated in place.
  Var batch_norm(Var x, Var gamma, Var beta, T& running_mean, T& running_var, bool training,
                 Scalar eps = Scalar(1e-5), Scalar momentum = Scalar(0.1)) {
    const T& in = value(x);
    const Shape s = in.shape();
    const Eigen::Index p = s.plane();
    const Eigen::Index m = Eigen::Index(s.n) * p;
    Vector<Scalar> mean(s.c), inv_std(s.c);
    if (training) {
      for (int c = 0; c < s.c; ++c) {
        Scalar sum(0), sq(0);
        for (int n = 0; n < s.n; ++n) {
          const auto plane = in.array().segment((Eigen::Index(n) * s.c + c) * p, p);
          sum += plane.sum();
        }
        const Scalar mu = sum / Scalar(m);
        for (int n = 0; n < s.n; ++n) {
          const auto plane = in.array().segment((Eigen::Index(n) * s.c + c) * p, p);
          sq += (plane - mu).square().sum();
        }
        const Scalar var = sq / Scalar(m);
        mean[c] = mu;
        inv_std[c] = Scalar(1) / std::sqrt(var + eps);
        const Scalar unbiased = m > 1 ? sq / Scalar(m - 1) : var;
        running_mean.array()[c] = (Scalar(1) - momentum) * running_mean.array()[c] + momentum * mu;
        running_var.array()[c] = (Scalar(1) - momentum) * running_var.array()[c] + momentum * unbiased;
      }
    } else {
      for (int c = 0; c < s.c; ++c) {
        mean[c] = running_mean.array()[c];
        inv_std[c] = Scalar(1) / std::sqrt(running_var.array()[c] + eps);
      }
    }
    const T& ga = value(gamma);
    const T& be = value(beta);
    T xhat(s), y(s);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const Eigen::Index off = (Eigen::Index(n) * s.c + c) * p;
        xhat.array().segment(off, p) = (in.array().segment(off, p) - mean[c]) * inv_std[c];
        y.array().segment(off, p) = xhat.array().segment(off, p) * ga.array()[c] + be.array()[c];
      }
    Var out = push(std::move(y), any_grad({x, gamma, beta}));
    if (recording(out))
      nodes_[out.id].backward = [this, x, gamma, beta, out, training, inv_std, xhat = std::move(xhat)] {
        const T& gy = grad_of(out.id);
        const Shape s = gy.shape();
        const Eigen::Index p = s.plane();
        const Scalar m = Scalar(Eigen::Index(s.n) * p);
        const T& ga = value(gamma);
        Vector<Scalar> sum_g = Vector<Scalar>::Zero(s.c), sum_gx = Vector<Scalar>::Zero(s.c);
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c) {
            const Eigen::Index off = (Eigen::Index(n) * s.c + c) * p;
            sum_g[c] += gy.array().segment(off, p).sum();
            sum_gx[c] += (gy.array().segment(off, p) * xhat.array().segment(off, p)).sum();
          }
        if (requires_grad(gamma)) grad_of(gamma.id).array() += sum_gx.array();
        if (requires_grad(beta)) grad_of(beta.id).array() += sum_g.array();
        if (!requires_grad(x)) return;
        T& gx = grad_of(x.id);
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c) {
            const Eigen::Index off = (Eigen::Index(n) * s.c + c) * p;
            const Scalar k = ga.array()[c] * inv_std[c];
            if (training) {
              gx.array().segment(off, p) +=
                  k * (gy.array().segment(off, p) - sum_g[c] / m - xhat.array().segment(off, p) * (sum_gx[c] / m));
            } else {
              gx.array().segment(off, p) += k * gy.array().segment(off, p);
            }
          }
      };
    return out;
  }

  Var relu(Var x) {
    T y = value(x);
    y.array() = y.array().max(Scalar(0));
    Var out = push(std::move(y), any_grad({x}));
    if (recording(out))
      nodes_[out.id].backward = [this, x, out] {
        grad_of(x.id).array() += (value(out).array() > Scalar(0)).select(grad_of(out.id).array(), Scalar(0));
      };
    return out;
  }

  Var add(Var a, Var b) {
    if (!(value(a).shape() == value(b).shape()))
      throw ShapeError("add: " + value(a).shape().str() + " vs " + value(b).shape().str());
    T y = value(a);
    y.array() += value(b).array();
    Var out = push(std::move(y), any_grad({a, b}));
    if (recording(out))
      nodes_[out.id].backward = [this, a, b, out] {
        if (requires_grad(a)) grad_of(a.id).array() += grad_of(out.id).array();
        if (requires_grad(b)) grad_of(b.id).array() += grad_of(out.id).array();
      };
    return out;
  }

  /// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
  Var max_pool2(Var x) {
    const T& in = value(x);
    const Shape s = in.shape();
    const Shape os{s.n, s.c, s.h / 2, s.w / 2};
    if (os.h < 1 || os.w < 1) throw ShapeError("max_pool2: input too small " + s.str());
    T y(os);
    std::vector<Eigen::Index> arg(std::size_t(os.numel()));
    Eigen::Index o = 0;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < os.h; ++h)
          for (int w = 0; w < os.w; ++w, ++o) {
            Eigen::Index best = ((Eigen::Index(n) * s.c + c) * s.h + 2 * h) * s.w + 2 * w;
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw) {
                const Eigen::Index i = ((Eigen::Index(n) * s.c + c) * s.h + 2 * h + dh) * s.w + 2 * w + dw;
                if (in.array()[i] > in.array()[best]) best = i;
              }
            arg[std::size_t(o)] = best;
            y.array()[o] = in.array()[best];
          }
    Var out = push(std::move(y), any_grad({x}));
    if (recording(out))
      nodes_[out.id].backward = [this, x, out, arg = std::move(arg)] {
        T& gx = grad_of(x.id);
        const T& gy = grad_of(out.id);
        for (std::size_t i = 0; i < arg.size(); ++i) gx.array()[arg[i]] += gy.array()[Eigen::Index(i)];
      };
    return out;
  }

  /// (N, C, H, W) -> (N, C, 1, 1).
  Var global_avg_pool(Var x) {
    const T& in = value(x);
    const Shape s = in.shape();
    T y(Shape{s.n, s.c, 1, 1});
    for (int n = 0; n < s.n; ++n) y.rows().row(n) = in.sample(n).rowwise().mean().transpose();
    Var out = push(std::move(y), any_grad({x}));
    if (recording(out))
      nodes_[out.id].backward = [this, x, out] {
        T& gx = grad_of(x.id);
        const T& gy = grad_of(out.id);
        const Shape s = gx.shape();
        const Scalar inv = Scalar(1) / Scalar(s.plane());
        for (int n = 0; n < s.n; ++n) gx.sample(n).colwise() += gy.rows().row(n).transpose() * inv;
      };
    return out;
  }

  /// x (N, D, 1, 1) times w^T (w is (O, D, 1, 1)) plus b (1, O, 1, 1).
  Var linear(Var x, Var w, Var b) {
    const T& in = value(x);
    const T& wt = value(w);
    const Shape s = in.shape();
    if (s.sample_size() != wt.shape().c) throw ShapeError("linear: input " + s.str() + " vs weight " + wt.shape().str());
    const Eigen::Map<const RowMatrix<Scalar>> W(wt.data(), wt.shape().n, wt.shape().c);
    T y(Shape{s.n, wt.shape().n, 1, 1});
    y.rows().noalias() = in.rows() * W.transpose();
    y.rows().rowwise() += value(b).rows().row(0);
    Var out = push(std::move(y), any_grad({x, w, b}));
    if (recording(out))
      nodes_[out.id].backward = [this, x, w, b, out] {
        const T& gy = grad_of(out.id);
        const T& wt = value(w);
        const Eigen::Map<const RowMatrix<Scalar>> W(wt.data(), wt.shape().n, wt.shape().c);
        if (requires_grad(w)) {
          T& gw = grad_of(w.id);
          Eigen::Map<RowMatrix<Scalar>>(gw.data(), wt.shape().n, wt.shape().c).noalias() +=
              gy.rows().transpose() * value(x).rows();
        }
        if (requires_grad(b)) grad_of(b.id).rows().row(0) += gy.rows().colwise().sum();
        if (requires_grad(x)) grad_of(x.id).rows().noalias() += gy.rows() * W;
      };
    return out;
  }

  /// Row-wise softmax(v / T) of a (R, M, 1, 1) logit table.
  Var softmax_rows(Var v, Scalar temperature) {
    if (!(temperature > Scalar(0))) throw InvalidArgument("softmax_rows: temperature must be positive");
    T y = value(v);
    auto r = y.rows();
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      r.row(i) = ((r.row(i).array() - r.row(i).maxCoeff()) / temperature).exp().matrix();
      r.row(i) /= r.row(i).sum();
    }
    Var out = push(std::move(y), any_grad({v}));
    if (recording(out))
      nodes_[out.id].backward = [this, v, out, temperature] {
        const auto a = value(out).rows();
        const auto g = grad_of(out.id).rows();
        auto gv = grad_of(v.id).rows();
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
          const Scalar inner = a.row(i).dot(g.row(i));
          gv.row(i).array() += a.row(i).array() * (g.row(i).array() - inner) / temperature;
        }
      };
    return out;
  }

  /// sum_k a[row, k] * features[k], where `weights` is a (R, M, 1, 1) table.
  Var mix(Var weights, int row, std::span<const Var> features) {
    const auto a = value(weights).rows();
    if (a.cols() != Eigen::Index(features.size()))
      throw ShapeError("mix: " + std::to_string(a.cols()) + " weights for " + std::to_string(features.size()) +
                       " features");
    const Shape s = value(features[0]).shape();
    T y(s);
    std::vector<Var> feats(features.begin(), features.end());
    for (std::size_t k = 0; k < feats.size(); ++k) {
      if (!(value(feats[k]).shape() == s)) throw ShapeError("mix: feature shapes differ");
      y.array() += a(row, Eigen::Index(k)) * value(feats[k]).array();
    }
    std::vector<Var> deps = feats;
    deps.push_back(weights);
    Var out = push(std::move(y), any_grad(deps));
    if (recording(out))
      nodes_[out.id].backward = [this, weights, row, feats = std::move(feats), out] {
        const T& gy = grad_of(out.id);
        const auto a = value(weights).rows();
        const bool wgrad = requires_grad(weights);
        for (std::size_t k = 0; k < feats.size(); ++k) {
          if (requires_grad(feats[k])) grad_of(feats[k].id).array() += a(row, Eigen::Index(k)) * gy.array();
          if (wgrad) grad_of(weights.id).rows()(row, Eigen::Index(k)) += (gy.array() * value(feats[k]).array()).sum();
        }
      };
    return out;
  }

  /// Filter bank scaled block-wise by a (N, M) attention table: output rows of
  /// block j and input channels of group m are multiplied by a[j, m].
  Var block_scale(Var w, Var attn) {
    const T& wt = value(w);
    const auto a = value(attn).rows();
    const Shape s = wt.shape();
    const int out_blocks = int(a.rows()), in_groups = int(a.cols());
    if (s.n % out_blocks != 0 || s.c % in_groups != 0) throw ShapeError("block_scale: groups do not divide filters");
    const int rows_per = s.n / out_blocks, cin_per = s.c / in_groups;
    const Eigen::Index kk = s.plane();
    T y = wt;
    for (int o = 0; o < s.n; ++o)
      for (int m = 0; m < in_groups; ++m)
        y.array().segment((Eigen::Index(o) * s.c + Eigen::Index(m) * cin_per) * kk, cin_per * kk) *=
            a(o / rows_per, m);
    Var out = push(std::move(y), any_grad({w, attn}));
    if (recording(out))
      nodes_[out.id].backward = [this, w, attn, out, rows_per, cin_per, in_groups] {
        const T& gy = grad_of(out.id);
        const T& wt = value(w);
        const Shape s = wt.shape();
        const Eigen::Index kk = s.plane();
        const auto a = value(attn).rows();
        const bool ga = requires_grad(attn), gw = requires_grad(w);
        for (int o = 0; o < s.n; ++o)
          for (int m = 0; m < in_groups; ++m) {
            const Eigen::Index off = (Eigen::Index(o) * s.c + Eigen::Index(m) * cin_per) * kk;
            const auto g = gy.array().segment(off, cin_per * kk);
            if (gw) grad_of(w.id).array().segment(off, cin_per * kk) += a(o / rows_per, m) * g;
            if (ga) grad_of(attn.id).rows()(o / rows_per, m) += (g * wt.array().segment(off, cin_per * kk)).sum();
          }
      };
    return out;
  }

 private:
  struct Node {
    T value;
    const T* ref = nullptr;  // parameter leaves alias the parameter value
    T grad;
    T* param_grad = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void()> backward;
  };

  Var push(T value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    return {int(nodes_.size()) - 1};
  }

  bool any_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (nodes_[v.id].requires_grad) return true;
    return false;
  }
  bool any_grad(const std::vector<Var>& vs) const {
    for (Var v : vs)
      if (nodes_[v.id].requires_grad) return true;
    return false;
  }

  bool recording(Var out) const { return nodes_[out.id].requires_grad; }

  T& grad_of(int id) {
    Node& n = nodes_[id];
    n.has_grad = true;
    if (n.param_grad) return *n.param_grad;
    if (n.grad.empty() && n.value.size() + (n.ref ? n.ref->size() : 0) > 0) n.grad = T((n.ref ? *n.ref : n.value).shape());
    return n.grad;
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace kdx
