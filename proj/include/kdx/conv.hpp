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

#include "kdx/tensor.hpp"

namespace kdx {

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_extent(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

/// Unfolds channels [c_begin, c_begin + c_count) of x into a
/// (c_count * k * k, N * Ho * Wo) row-major patch matrix.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, int c_begin, int c_count, const ConvGeometry& g, RowMatrix<Scalar>& col) {
  const Shape s = x.shape();
  const int ho = g.out_extent(s.h), wo = g.out_extent(s.w);
  const int k = g.kernel;
  const Eigen::Index cols = Eigen::Index(s.n) * ho * wo;
  col.resize(Eigen::Index(c_count) * k * k, cols);
  for (int c = 0; c < c_count; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        Scalar* row = col.data() + ((Eigen::Index(c) * k + ki) * k + kj) * cols;
        for (int n = 0; n < s.n; ++n) {
          const Scalar* plane = x.data() + (Eigen::Index(n) * s.c + c_begin + c) * s.plane();
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * g.stride - g.pad + ki;
            Scalar* dst = row + (Eigen::Index(n) * ho + oh) * wo;
            if (ih < 0 || ih >= s.h) {
              std::fill(dst, dst + wo, Scalar(0));
              continue;
            }
            const Scalar* src = plane + Eigen::Index(ih) * s.w;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * g.stride - g.pad + kj;
              dst[ow] = (iw >= 0 && iw < s.w) ? src[iw] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters patch gradients back into channels
/// [c_begin, c_begin + c_count) of dx (accumulating).
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, int c_begin, int c_count, const ConvGeometry& g, Tensor<Scalar>& dx) {
  const Shape s = dx.shape();
  const int ho = g.out_extent(s.h), wo = g.out_extent(s.w);
  const int k = g.kernel;
  const Eigen::Index cols = Eigen::Index(s.n) * ho * wo;
  for (int c = 0; c < c_count; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const Scalar* row = col.data() + ((Eigen::Index(c) * k + ki) * k + kj) * cols;
        for (int n = 0; n < s.n; ++n) {
          Scalar* plane = dx.data() + (Eigen::Index(n) * s.c + c_begin + c) * s.plane();
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= s.h) continue;
            const Scalar* src = row + (Eigen::Index(n) * ho + oh) * wo;
            Scalar* dst = plane + Eigen::Index(ih) * s.w;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * g.stride - g.pad + kj;
              if (iw >= 0 && iw < s.w) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

/// Moves a (C, N * P) row-major matrix into NCHW layout and back.
template <typename Scalar>
void channel_major_to_nchw(const RowMatrix<Scalar>& m, Tensor<Scalar>& out) {
  const Shape s = out.shape();
  const Eigen::Index p = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      std::copy_n(m.data() + Eigen::Index(c) * m.cols() + n * p, p, out.data() + (Eigen::Index(n) * s.c + c) * p);
}

template <typename Scalar>
RowMatrix<Scalar> nchw_to_channel_major(const Tensor<Scalar>& t) {
  const Shape s = t.shape();
  const Eigen::Index p = s.plane();
  RowMatrix<Scalar> m(s.c, Eigen::Index(s.n) * p);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      std::copy_n(t.data() + (Eigen::Index(n) * s.c + c) * p, p, m.data() + Eigen::Index(c) * m.cols() + n * p);
  return m;
}

/// Filter bank (Cout, Cin, k, k) viewed as a (Cout, Cin * k * k) matrix.
template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> filter_matrix(const Tensor<Scalar>& w) {
  return {w.data(), w.shape().n, w.shape().sample_size()};
}
template <typename Scalar>
Eigen::Map<RowMatrix<Scalar>> filter_matrix(Tensor<Scalar>& w) {
  return {w.data(), w.shape().n, w.shape().sample_size()};
}

/// Dense 2-D convolution (cross-correlation), no bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& g) {
  const Shape xs = x.shape(), ws = w.shape();
  if (ws.c != xs.c || ws.h != g.kernel || ws.w != g.kernel)
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with filters " + ws.str());
  RowMatrix<Scalar> col;
  im2col(x, 0, xs.c, g, col);
  RowMatrix<Scalar> y = filter_matrix(w) * col;
  Tensor<Scalar> out(Shape{xs.n, ws.n, g.out_extent(xs.h), g.out_extent(xs.w)});
  channel_major_to_nchw(y, out);
  return out;
}

/// Gradients of conv2d. Either output pointer may be null.
template <typename Scalar>
void conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& grad_out,
                     const ConvGeometry& g, Tensor<Scalar>* grad_x, Tensor<Scalar>* grad_w) {
  const RowMatrix<Scalar> gy = nchw_to_channel_major(grad_out);
  if (grad_w || grad_x) {
    RowMatrix<Scalar> col;
    if (grad_w) {
      im2col(x, 0, x.shape().c, g, col);
      filter_matrix(*grad_w).noalias() += gy * col.transpose();
    }
    if (grad_x) {
      col.noalias() = filter_matrix(w).transpose() * gy;
      col2im(col, 0, x.shape().c, g, *grad_x);
    }
  }
}

}  // namespace kdx
