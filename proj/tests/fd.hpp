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

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "kdx/tensor.hpp"

namespace kdx::test {

inline constexpr double kStep = 1e-4;
inline constexpr double kRelTol = 1e-3;

/// Central differences of f at x.
inline Vector<double> numeric_grad(const std::function<double(const Vector<double>&)>& f, Vector<double> x,
                                   double h = kStep) {
  Vector<double> g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// max |a - b| / max(1e-6 + max|b|), a scale-aware relative error.
inline double rel_error(const Vector<double>& analytic, const Vector<double>& numeric) {
  const double scale = std::max(1e-6, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

inline Vector<double> random_vector(int n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Tensor<Scalar> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.array()[i] = Scalar(d(rng));
  return t;
}

inline Vector<double> flat(const Tensor<double>& t) { return t.array().matrix(); }

inline void unflat(Tensor<double>& t, const Vector<double>& v) { t.array() = v.array(); }

}  // namespace kdx::test
