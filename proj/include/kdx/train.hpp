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
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kdx/config.hpp"
#include "kdx/data.hpp"
#include "kdx/explainer.hpp"
#include "kdx/tree.hpp"
#include "kdx/vam.hpp"

namespace kdx {

/// The student of a run: a plain or VAM-wrapped network, or an explainer.
struct StudentModel {
  StudentMode mode = StudentMode::plain;
  std::unique_ptr<Network<float>> net;
  std::unique_ptr<ExplainerModel<float>> explainer;
  WrapReport wrap;

  ParameterStore<float>& params();
  const ParameterStore<float>& params() const;
  AttentionSnapshot snapshot() const;
  int num_classes() const;
  bool gated() const;
};

BackboneSpec backbone_for(Family family, const Dataset& data);
StudentModel build_student(const RunConfig& cfg, const BackboneSpec& spec);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double ce_term = 0.0;
  std::optional<double> kl_term;
  std::optional<double> entropy_term;
  std::optional<double> attention_entropy;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double wall_time_s = 0.0;
};

/// Per-epoch training log. CSV columns:
///   epoch              1-based epoch index ("final" on the summary row)
///   lr                 weight learning rate used in the epoch
///   train_loss         mean batch objective; equals ce_term + kl_term + entropy_term
///   ce_term            weighted supervised term (CE, smoothed CE or weighted BCE)
///   kl_term            weighted distillation term (empty when the run has none)
///   entropy_term       gamma times the summed gate entropy (empty when off)
///   attention_entropy  summed gate entropy at epoch end (empty without gates)
///   train_acc          top-1 on the augmented training batches, percent
///   test_acc           top-1 on the test split at epoch end, percent
///   wall_time_s        seconds since training started
struct MetricsLog {
  std::vector<EpochMetrics> epochs;

  static const char* header();
  std::string to_csv() const;
  static MetricsLog from_csv(const std::string& text);
  const EpochMetrics& last() const;
  /// True when every column except wall time matches exactly.
  bool same_curves(const MetricsLog& other) const;
};

/// Teacher logits for every example of a split, bound to its fingerprint.
struct LogitCache {
  std::uint64_t fingerprint = 0;
  RowMatrix<float> logits;  // (n, K)

  int rows() const { return int(logits.rows()); }
  int classes() const { return int(logits.cols()); }
  void save(const std::string& path) const;
  static LogitCache load(const std::string& path);
  /// Throws StaleCacheError unless the cache was built for `data`.
  void require_matches(const Dataset& data) const;
};

/// Logits of example `index`, evaluated alone and un-augmented.
Vector<float> teacher_logits_for(const Network<float>& teacher, const Dataset& data, int index);
LogitCache cache_teacher_logits(const Network<float>& teacher, const Dataset& data);

/// Where KL targets come from: a live network or a cache.
struct TeacherSource {
  const Network<float>* live = nullptr;
  const LogitCache* cache = nullptr;
  bool available() const { return live || cache; }
};

struct FitResult {
  StudentModel model;
  MetricsLog log;
  AttentionSnapshot snapshot;
  double test_acc = 0.0;
};

/// Called after each epoch with the model and its metrics.
using EpochHook = std::function<void(const StudentModel&, const EpochMetrics&)>;

/// Trains cfg's student with explicitly chosen loss terms (no variant checks).
FitResult fit_student(const RunConfig& cfg, const ObjectiveTerms& terms, const DataSplits& data,
                      const TeacherSource& teacher, const EpochHook& hook = {});

/// Validated entry point: resolves terms from mode + variant/objective.
/// With a non-empty out_dir, writes the run directory (snapshot every epoch).
FitResult distill(const RunConfig& cfg, const DataSplits& data, const TeacherSource& teacher);

/// Plain CE training of cfg.teacher_family. Throws DivergenceError on NaN loss.
FitResult train_teacher(const RunConfig& cfg, const DataSplits& data);

struct EvalResult {
  double accuracy = 0.0;  // percent
  std::vector<double> per_class;
  int count = 0;
};

EvalResult evaluate(const Network<float>& model, const Dataset& data);
EvalResult evaluate(const ExplainerModel<float>& model, const Dataset& data);
EvalResult evaluate(const StudentModel& model, const Dataset& data);
/// Accuracy of fixed predictions against `data`'s labels.
EvalResult score_predictions(const std::vector<int>& predictions, const Dataset& data);

/// Run directory files.
struct RunFiles {
  static constexpr const char* config = "config.txt";
  static constexpr const char* metrics = "metrics.csv";
  static constexpr const char* model = "model.bin";
  static constexpr const char* snapshot = "snapshot.json";
  static constexpr const char* summary = "summary.json";
  static constexpr const char* tree_dot = "tree.dot";
  static constexpr const char* tree_json = "tree.json";
  static constexpr const char* snapshots = "snapshots";
};

struct RunRecord {
  std::string name;
  RunConfig config;
  std::uint64_t fingerprint = 0;
  double test_acc = 0.0;
  AttentionSnapshot snapshot;
};

void write_run(const std::string& dir, const RunConfig& cfg, const FitResult& result, std::uint64_t fingerprint);
RunRecord load_run(const std::string& dir);
/// Rebuilds the student of a run directory and loads its weights.
StudentModel load_run_model(const std::string& dir, const BackboneSpec& spec);

struct ComparisonRow {
  std::string name;
  std::string objective;
  std::optional<double> smoothing_eps;
  double test_acc = 0.0;
  double total_entropy = 0.0;
  std::optional<int> retained_blocks;
  std::optional<int> total_blocks;
  std::string dot;  // empty unless the run has an explainer tree
};

struct ComparisonReport {
  std::vector<ComparisonRow> rows;
  /// Markdown table; deltas are relative to the first run.
  std::string to_markdown() const;
};

/// Throws ValidationError for fewer than two runs or runs that differ in
/// dataset fingerprint, family or mode.
ComparisonReport compare_objectives(const std::vector<RunRecord>& runs);

}  // namespace kdx
