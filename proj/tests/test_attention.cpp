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

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "fd.hpp"
#include "kdx/attention.hpp"
#include "kdx/losses.hpp"
#include "kdx/errors.hpp"

using namespace kdx;

namespace {

Vector<double> vec(std::initializer_list<double> v) {
  Vector<double> out(Eigen::Index(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

std::vector<Tensor<double>> random_features(int m, std::mt19937_64& rng) {
  std::vector<Tensor<double>> f;
  for (int k = 0; k < m; ++k) f.push_back(test::random_tensor<double>({1, 3, 4, 5}, rng));
  return f;
}

}  // namespace

TEST_CASE("attention weights") {
  for (double T : {0.1, 1.0, 7.0}) {
    const auto a = attention_weights(AttentionModule<double>{vec({0, 0, 0}), T});
    for (int i = 0; i < 3; ++i) CHECK(a[i] == doctest::Approx(1.0 / 3.0));
  }
  CHECK(attention_weights(AttentionModule<double>{vec({-3.2}), 1.0})[0] == 1.0);
  const auto a = attention_weights(AttentionModule<double>{vec({std::log(4.0), 0}), 1.0});
  CHECK(a[0] == doctest::Approx(0.8));
  CHECK(a[1] == doctest::Approx(0.2));
  CHECK_THROWS_AS(attention_weights(AttentionModule<double>{vec({1, 2}), 0.0}), InvalidArgument);
  CHECK_THROWS_AS(attention_weights(AttentionModule<double>{Vector<double>(), 1.0}), InvalidArgument);
}

TEST_CASE("attention weights are shift invariant and hardening ignores temperature") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + int(rng() % 6);
    const Vector<double> v = test::random_vector(m, rng, 3.0);
    const double c = test::random_vector(1, rng, 50.0)[0];
    const auto a = attention_weights(AttentionModule<double>{v, 1.0});
    const auto b = attention_weights(AttentionModule<double>{(v.array() + c).matrix(), 1.0});
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(is_prob_vector(a));
    for (double T : {0.05, 0.5, 2.0, 40.0}) {
      const auto h = harden(attention_weights(AttentionModule<double>{v, T}));
      CHECK(argmax_lowest(h) == argmax_lowest(v));
    }
  }
}

TEST_CASE("gate initialisation is near uniform") {
  std::mt19937_64 rng(8);
  const auto m = AttentionModule<double>::init(16, 1.0, rng);
  CHECK(m.logits.size() == 16);
  CHECK(m.logits.cwiseAbs().maxCoeff() < 0.06);
  CHECK(m.logits.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("feature mixing") {
  std::mt19937_64 rng(5);
  const auto f = random_features(3, rng);
  CHECK(max_abs_diff(mix_features<double>(vec({0, 0, 1}), f), f[2]) == 0.0);
  const std::vector<Tensor<double>> same(4, f[0]);
  CHECK(max_abs_diff(mix_features<double>(vec({0.1, 0.2, 0.3, 0.4}), same), f[0]) <= 1e-12);
  const std::vector<Tensor<double>> pair{Tensor<double>::constant({1, 2, 2, 2}, 1.0),
                                         Tensor<double>::constant({1, 2, 2, 2}, 3.0)};
  CHECK(max_abs_diff(mix_features<double>(vec({0.5, 0.5}), pair), Tensor<double>::constant({1, 2, 2, 2}, 2.0)) == 0.0);
  CHECK_THROWS_AS(mix_features<double>(vec({0.5, 0.5}), f), ShapeError);
  std::vector<Tensor<double>> bad = f;
  bad[1] = test::random_tensor<double>({1, 3, 4, 4}, rng);
  CHECK_THROWS_AS(mix_features<double>(vec({0.2, 0.3, 0.5}), bad), ShapeError);
}

TEST_CASE("feature mixing is linear and permutation equivariant") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 2 + int(rng() % 4);
    auto f = random_features(m, rng);
    const Vector<double> a = test::random_vector(m, rng);
    const Vector<double> b = test::random_vector(m, rng);
    const auto lhs = mix_features<double>(2.0 * a + 3.0 * b, f);
    Tensor<double> rhs = mix_features<double>(a, f);
    rhs.array() = 2.0 * rhs.array() + 3.0 * mix_features<double>(b, f).array();
    CHECK(max_abs_diff(lhs, rhs) <= 1e-10);

    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Vector<double> ap(m);
    std::vector<Tensor<double>> fp;
    for (int k = 0; k < m; ++k) {
      ap[k] = a[perm[std::size_t(k)]];
      fp.push_back(f[std::size_t(perm[std::size_t(k)])]);
    }
    CHECK(max_abs_diff(mix_features<double>(ap, fp), mix_features<double>(a, f)) <= 1e-12);
  }
}

TEST_CASE("hardening") {
  CHECK(harden<double>(vec({0.2, 0.5, 0.3})) == vec({0, 1, 0}));
  CHECK(harden<double>(vec({0.5, 0.5})) == vec({1, 0}));
  CHECK(harden<double>(vec({1.0})) == vec({1.0}));
  CHECK(harden<double>(vec({0.25, 0.25, 0.25, 0.25})) == vec({1, 0, 0, 0}));
}

TEST_CASE("mixing gradient through attention matches finite differences") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 2 + int(rng() % 4);
    const double T = 0.5 + (trial % 3);
    const auto f = random_features(m, rng);
    const Tensor<double> c = test::random_tensor<double>(f[0].shape(), rng);
    const Vector<double> v = test::random_vector(m, rng);
    auto loss = [&](const Vector<double>& x) {
      return (mix_features<double>(attention_weights(AttentionModule<double>{x, T}), f).array() * c.array()).sum();
    };
    const auto a = attention_weights(AttentionModule<double>{v, T});
    const Vector<double> analytic = attention_backward<double>(a, mix_features_weight_grad<double>(c, f), T);
    CHECK(test::rel_error(analytic, test::numeric_grad(loss, v)) <= test::kRelTol);
  }
}

TEST_CASE("snapshot JSON round trip and validation") {
  AttentionRecord r;
  r.stage = 2;
  r.block = 1;
  r.sources = {"1:0", "1:1"};
  r.logits = {0.125, -0.5};
  const auto a = attention_weights(AttentionModule<double>{vec({0.125, -0.5}), 1.0});
  r.weights = {a[0], a[1]};
  AttentionSnapshot snap{{r}};
  CHECK_NOTHROW(snap.validate());
  const std::string text = snap.to_json();
  const AttentionSnapshot back = AttentionSnapshot::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.modules[0].weights == r.weights);
  CHECK(back.modules[0].sources == r.sources);

  AttentionSnapshot bad = snap;
  bad.modules[0].weights = {0.7, 0.7};
  CHECK_THROWS_AS(bad.validate(), InvariantViolation);
  bad = snap;
  bad.modules[0].sources.pop_back();
  CHECK_THROWS_AS(bad.validate(), InvariantViolation);
}
