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

#include <filesystem>
#include <random>

#include "fd.hpp"
#include "kdx/backbone.hpp"
#include "kdx/checkpoint.hpp"
#include "kdx/errors.hpp"

using namespace kdx;

TEST_CASE("family names parse with or without the -like suffix") {
  CHECK(parse_family("wrn-16-2-like") == Family::wrn16_2);
  CHECK(parse_family("wrn-16-2") == Family::wrn16_2);
  CHECK(parse_family("resnet18-like") == Family::resnet18);
  CHECK(parse_family("vgg8") == Family::vgg8);
  CHECK(parse_family("tiny-cnn") == Family::tiny_cnn);
  for (Family f : {Family::resnet18, Family::vgg8, Family::wrn16_2, Family::wrn40_1, Family::tiny_cnn})
    CHECK(parse_family(to_string(f)) == f);
  CHECK_THROWS_AS(parse_family("resnet50"), ConfigError);
}

TEST_CASE("every family produces K logits on 32x32 inputs") {
  std::mt19937_64 rng(1);
  for (Family f : {Family::resnet18, Family::vgg8, Family::wrn16_2, Family::wrn40_1, Family::tiny_cnn}) {
    Network<float> net(BackboneSpec::make(f, 10), 3);
    const auto x = test::random_tensor<float>(net.spec().input_shape(1), rng);
    const auto y = net.logits(x);
    CHECK(y.shape() == Shape{1, 10, 1, 1});
    CHECK(y.array().allFinite());
  }
}

TEST_CASE("parameter counts match a hand count") {
  // Stem 3x3 conv, three pre-activation stages with projection shortcuts,
  // tail BN and a 128 -> 10 linear layer.
  CHECK(Network<float>(BackboneSpec::make(Family::wrn16_2, 10), 0).params().count() == 691674);
  // Three conv-BN layers and a 64 -> 10 linear layer.
  CHECK(Network<float>(BackboneSpec::make(Family::tiny_cnn, 10), 0).params().count() ==
        (3 * 16 * 9 + 32) + (16 * 32 * 9 + 64) + (32 * 64 * 9 + 128) + (64 * 10 + 10));
  Network<float> net(BackboneSpec::make(Family::wrn16_2, 10), 0);
  CHECK(net.gate_parameter_count() == 0);
  CHECK(net.backbone_parameter_count() == net.params().count());
}

TEST_CASE("too-small inputs and malformed specs are rejected") {
  CHECK_THROWS_AS(BackboneSpec::make(Family::vgg8, 10, 8, 8), ConfigError);
  CHECK_THROWS_AS(BackboneSpec::make(Family::tiny_cnn, 1), ConfigError);
  CHECK_NOTHROW(BackboneSpec::make(Family::tiny_cnn, 2, 4, 4));
  Network<float> net(BackboneSpec::make(Family::tiny_cnn, 3, 16, 16), 0);
  std::mt19937_64 rng(2);
  CHECK_THROWS_AS(net.logits(test::random_tensor<float>({1, 3, 8, 8}, rng)), ShapeError);
}

TEST_CASE("construction is deterministic in the seed") {
  const auto spec = BackboneSpec::make(Family::wrn16_2, 10, 16, 16);
  Network<float> a(spec, 11), b(spec, 11), c(spec, 12);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(max_abs_diff(a.params()[i].value, b.params()[i].value) == 0.0f);
    if (max_abs_diff(a.params()[i].value, c.params()[i].value) > 0.0f) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("training mode updates BN running statistics only on a recording tape") {
  const auto spec = BackboneSpec::make(Family::tiny_cnn, 3, 8, 8);
  Network<double> net(spec, 4);
  std::mt19937_64 rng(3);
  const auto x = test::random_tensor<double>(spec.input_shape(4), rng);
  Parameter<double>* mean = nullptr;
  for (auto& p : net.params())
    if (p->name == "stage1.b0.bn1.running_mean") mean = p.get();
  REQUIRE(mean != nullptr);
  REQUIRE(mean->group == ParamGroup::buffer);
  const auto before = mean->value;
  {
    Tape<double> tape(true);
    net.forward(tape, tape.input(x), true);
  }
  CHECK(max_abs_diff(before, mean->value) > 0.0);
  const auto after = mean->value;
  net.logits(x);
  CHECK(max_abs_diff(after, mean->value) == 0.0);
}

TEST_CASE("checkpoint round trip restores every tensor") {
  const auto spec = BackboneSpec::make(Family::tiny_cnn, 4, 16, 16);
  Network<float> a(spec, 5), b(spec, 6);
  const std::string path = (std::filesystem::temp_directory_path() / "kdx_test_ckpt.bin").string();
  save_parameters(path, a.params());
  load_parameters(path, b.params());
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(max_abs_diff(a.params()[i].value, b.params()[i].value) == 0.0f);

  Network<float> other(BackboneSpec::make(Family::tiny_cnn, 5, 16, 16), 5);
  CHECK_THROWS_AS(load_parameters(path, other.params()), DataError);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  CHECK_THROWS_AS(load_parameters(path, b.params()), DataError);
  std::filesystem::remove(path);
}
