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
#include <map>
#include <string>
#include <vector>

#include "kdx/backbone.hpp"
#include "kdx/data.hpp"
#include "kdx/losses.hpp"

namespace kdx {

enum class StudentMode { plain, explainer, vam };

/// Ablation grid: {plain, vam} x {CE, CE+KL, CE+entropy, CE+KL+entropy}.
enum class Variant { none, M1, M2, M3, M4, M5, M6 };

/// Supervision of an explainer run.
enum class ExplainerObjective { ce, ls, kd };

std::string to_string(StudentMode m);
std::string to_string(Variant v);
std::string to_string(ExplainerObjective o);
StudentMode parse_mode(const std::string& s);
Variant parse_variant(const std::string& s);
ExplainerObjective parse_objective(const std::string& s);

/// Loss terms switched on by a run, resolved from mode + variant/objective.
struct ObjectiveTerms {
  bool kl = false;
  bool entropy = false;
  bool smoothing = false;
  /// Weight on the supervised term (alpha when KL is on, otherwise 1).
  double supervised_weight = 1.0;
};

struct RunConfig {
  StudentMode mode = StudentMode::plain;
  Variant variant = Variant::M1;
  ExplainerObjective objective = ExplainerObjective::kd;
  Family family = Family::wrn16_2;
  std::vector<int> experts_per_stage;  // empty: 1 then 4 per stage
  double attention_temperature = 1.0;
  double attention_temperature_final = 0.0;  // >0: linear anneal to this value
  int channels_per_block = 0;          // 0: family default

  Family teacher_family = Family::wrn16_2;
  std::string teacher_checkpoint;
  std::string logit_cache;

  KDHyperParams kd;
  double w0 = 0.0;  // 0: inverse class frequency
  double w1 = 0.0;

  double lr = 0.05;
  double attention_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay = 0.1;
  std::vector<int> milestones{150, 180, 210};
  int lr_step = 0;  // >0: decay every lr_step epochs instead of at milestones
  int epochs = 240;
  int batch_size = 128;

  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string out_dir;

  DatasetSpec data;

  /// Mode-specific schedule defaults (explainer: lr 0.1, step 30, 300 epochs).
  static RunConfig defaults_for(StudentMode mode);

  /// Throws ConfigError on inconsistent fields.
  void validate() const;
  ObjectiveTerms terms() const;
  BinaryTaskWeights binary_weights() const;
  /// `epoch` is the 0-based epoch index; a milestone m applies from index m on.
  double learning_rate(int epoch, bool attention) const;
  /// Explainer gate temperature at 0-based `epoch` (constant unless annealing).
  double temperature_at(int epoch) const;

  std::string serialize() const;
  /// Applies `key = value` lines on top of `base`. '#' starts a comment.
  static RunConfig parse(const std::string& text, RunConfig base);
  static RunConfig parse(const std::string& text) { return parse(text, RunConfig{}); }
  /// Applies one key; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
};

/// Flat key/value pairs from `key = value` text.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

RunConfig load_run_config(const std::string& path, RunConfig base = {});

}  // namespace kdx
