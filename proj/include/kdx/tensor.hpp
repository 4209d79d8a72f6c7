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

#include <Eigen/Dense>
#include <cstddef>
#include <string>

#include "kdx/errors.hpp"

namespace kdx {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// NCHW extent. A single feature map is a shape with n == 1.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  Eigen::Index numel() const { return Eigen::Index(n) * c * h * w; }
  Eigen::Index sample_size() const { return Eigen::Index(c) * h * w; }
  Eigen::Index plane() const { return Eigen::Index(h) * w; }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense NCHW tensor backed by a contiguous Eigen array.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), data_(Array::Zero(shape.numel())) {}
  Tensor(Shape shape, Array data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) throw ShapeError("tensor data does not match " + shape_.str());
  }

  static Tensor constant(Shape shape, Scalar value) { return Tensor(shape, Array::Constant(shape.numel(), value)); }

  const Shape& shape() const { return shape_; }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator()(int n, int c, int h, int w) {
    return data_[((Eigen::Index(n) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar operator()(int n, int c, int h, int w) const {
    return data_[((Eigen::Index(n) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  /// Sample `n` viewed as a (C, H*W) row-major matrix.
  Eigen::Map<RowMatrix<Scalar>> sample(int n) {
    return {data_.data() + n * shape_.sample_size(), shape_.c, shape_.plane()};
  }
  Eigen::Map<const RowMatrix<Scalar>> sample(int n) const {
    return {data_.data() + n * shape_.sample_size(), shape_.c, shape_.plane()};
  }

  /// Batch viewed as (N, C*H*W); handy for logits of shape (N, K, 1, 1).
  Eigen::Map<RowMatrix<Scalar>> rows() { return {data_.data(), shape_.n, shape_.sample_size()}; }
  Eigen::Map<const RowMatrix<Scalar>> rows() const { return {data_.data(), shape_.n, shape_.sample_size()}; }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Shape shape_{};
  Array data_;
};

/// A single (C, H, W) map. Stored as a batch of one.
template <typename Scalar>
using FeatureMap = Tensor<Scalar>;

template <typename Scalar>
FeatureMap<Scalar> make_feature_map(int c, int h, int w) {
  if (c < 1 || h < 1 || w < 1) throw ShapeError("feature map extents must be positive");
  return FeatureMap<Scalar>(Shape{1, c, h, w});
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  if (a.size() == 0) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace kdx
