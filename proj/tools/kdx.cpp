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

// kdx: command-line front end for teacher training, distillation,
// evaluation, tree extraction and run comparison.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "kdx/checkpoint.hpp"
#include "kdx/errors.hpp"
#include "kdx/train.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;

/// One string option per RunConfig key, named exactly like the key.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "flat key = value file overriding the defaults");
    for (const auto& [key, _] : kdx::parse_key_values(kdx::RunConfig{}.serialize()))
      app.add_option("--" + key, values[key], "RunConfig field '" + key + "'");
  }

  /// defaults_for(mode) <- config file <- explicit flags.
  kdx::RunConfig resolve(const CLI::App& app, kdx::StudentMode fallback) const {
    std::vector<std::pair<std::string, std::string>> file;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw kdx::ConfigError("cannot open config file " + config_file);
      std::stringstream ss;
      ss << in.rdbuf();
      file = kdx::parse_key_values(ss.str());
    }
    std::vector<std::pair<std::string, std::string>> flags;
    for (const auto& [key, value] : values)
      if (app.count("--" + key) > 0) flags.emplace_back(key, value);

    kdx::StudentMode mode = fallback;
    for (const auto* kvs : {&file, &flags})
      for (const auto& [k, v] : *kvs)
        if (k == "mode") mode = kdx::parse_mode(v);
    kdx::RunConfig cfg = kdx::RunConfig::defaults_for(mode);
    for (const auto* kvs : {&file, &flags})
      for (const auto& [k, v] : *kvs) cfg.set(k, v);
    return cfg;
  }
};

kdx::Network<float> load_teacher(const kdx::RunConfig& cfg, const kdx::Dataset& data) {
  kdx::Network<float> teacher(kdx::backbone_for(cfg.teacher_family, data), 0);
  kdx::load_parameters(cfg.teacher_checkpoint, teacher.params());
  return teacher;
}

void print_metrics(const kdx::FitResult& r) {
  const auto& m = r.log.last();
  std::cout << "epochs " << m.epoch << "  train_loss " << m.train_loss << "  train_acc " << m.train_acc
            << "  test_acc " << m.test_acc;
  if (m.attention_entropy) std::cout << "  attention_entropy " << *m.attention_entropy;
  std::cout << "\n";
}

int run_train_teacher(const CLI::App& app, const ConfigFlags& flags, bool write_cache) {
  kdx::RunConfig cfg = flags.resolve(app, kdx::StudentMode::plain);
  cfg.validate();
  const kdx::DataSplits data = kdx::load_dataset(cfg.data);
  const kdx::FitResult r = kdx::train_teacher(cfg, data);
  print_metrics(r);
  if (!cfg.out_dir.empty()) {
    kdx::RunConfig t = cfg;
    t.mode = kdx::StudentMode::plain;
    t.variant = kdx::Variant::M1;
    t.family = cfg.teacher_family;
    kdx::write_run(cfg.out_dir, t, r, data.train.fingerprint);
    if (write_cache) {
      const fs::path cache = fs::path(cfg.out_dir) / "logits.bin";
      kdx::cache_teacher_logits(*r.model.net, data.train).save(cache.string());
      std::cout << "logit cache " << cache.string() << "\n";
    }
    std::cout << "checkpoint " << (fs::path(cfg.out_dir) / kdx::RunFiles::model).string() << "\n";
  }
  return 0;
}

int run_distill(const CLI::App& app, const ConfigFlags& flags) {
  const kdx::RunConfig cfg = flags.resolve(app, kdx::StudentMode::plain);
  cfg.validate();
  const kdx::DataSplits data = kdx::load_dataset(cfg.data);
  std::optional<kdx::LogitCache> cache;
  std::optional<kdx::Network<float>> teacher;
  kdx::TeacherSource source;
  if (cfg.terms().kl) {
    if (!cfg.logit_cache.empty()) {
      cache = kdx::LogitCache::load(cfg.logit_cache);
      cache->require_matches(data.train);
      source.cache = &*cache;
    } else if (!cfg.teacher_checkpoint.empty()) {
      teacher.emplace(load_teacher(cfg, data.train));
      source.live = &*teacher;
    } else {
      throw kdx::ConfigError("variant " + kdx::to_string(cfg.variant) +
                             " needs --teacher_checkpoint or --logit_cache");
    }
  }
  const kdx::FitResult r = kdx::distill(cfg, data, source);
  print_metrics(r);
  if (!cfg.out_dir.empty()) std::cout << "run " << cfg.out_dir << "\n";
  return 0;
}

int run_eval(const std::string& dir) {
  const kdx::RunConfig cfg = kdx::RunConfig::parse([&] {
    std::ifstream in(fs::path(dir) / kdx::RunFiles::config);
    if (!in) throw kdx::DataError("cannot open run config in " + dir);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }());
  const kdx::DataSplits data = kdx::load_dataset(cfg.data);
  const kdx::StudentModel model = kdx::load_run_model(dir, kdx::backbone_for(cfg.family, data.test));
  const kdx::EvalResult e = kdx::evaluate(model, data.test);
  std::cout << "test_acc " << e.accuracy << " (" << e.count << " examples)\n";
  for (std::size_t k = 0; k < e.per_class.size(); ++k) std::cout << "class " << k << " " << e.per_class[k] << "\n";
  return 0;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw kdx::DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw kdx::DataError("cannot write " + path);
  out << text;
}

int run_extract_tree(const std::string& snapshot_path, int classes, const std::string& dot_out,
                     const std::string& json_out) {
  const kdx::AttentionSnapshot snap = kdx::AttentionSnapshot::from_json(slurp(snapshot_path));
  const kdx::EntropyReport report = classes > 0 ? kdx::entropy_report(snap, classes) : kdx::entropy_report(snap);
  const int K = classes > 0 ? classes : int(report.class_branch.size());
  const kdx::NeuralTree tree = kdx::extract_tree(snap, K);
  std::cerr << "total_entropy " << report.total_entropy << "  mean_entropy " << report.mean_entropy
            << "  retained " << report.retained_blocks << "/" << report.total_blocks
            << (report.is_tree ? "  (tree)" : "  (forest)") << "\n";
  if (!json_out.empty()) spill(json_out, kdx::to_json(tree));
  if (dot_out.empty()) std::cout << kdx::to_dot(tree);
  else spill(dot_out, kdx::to_dot(tree));
  return 0;
}

int run_compare(const std::vector<std::string>& dirs, const std::string& out_dir) {
  std::vector<kdx::RunRecord> runs;
  for (const auto& d : dirs) runs.push_back(kdx::load_run(d));
  const kdx::ComparisonReport report = kdx::compare_objectives(runs);
  std::cout << report.to_markdown();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    spill((fs::path(out_dir) / "report.md").string(), report.to_markdown());
    for (const auto& row : report.rows)
      if (!row.dot.empty()) spill((fs::path(out_dir) / (row.name + ".dot")).string(), row.dot);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation explainer and virtual attention toolkit"};
  app.require_subcommand(1);

  ConfigFlags teacher_flags, distill_flags;
  bool write_cache = false;
  auto* train_teacher = app.add_subcommand("train-teacher", "train a teacher with plain cross-entropy");
  teacher_flags.attach(*train_teacher);
  train_teacher->add_flag("--write-cache", write_cache, "also cache teacher logits for the training split");

  auto* distill = app.add_subcommand("distill", "train a student (plain, vam or explainer)");
  distill_flags.attach(*distill);

  std::string eval_dir;
  auto* eval = app.add_subcommand("eval", "evaluate a run directory on its test split");
  eval->add_option("--run", eval_dir, "run directory")->required();

  std::string snapshot_path, dot_out, json_out;
  int classes = 0;
  auto* extract = app.add_subcommand("extract-tree", "harden a snapshot and print the retained tree as DOT");
  extract->add_option("--snapshot", snapshot_path, "attention snapshot JSON")->required();
  extract->add_option("--classes", classes, "number of classes (default: number of heads)");
  extract->add_option("--dot", dot_out, "write DOT here instead of stdout");
  extract->add_option("--json", json_out, "also write the tree as JSON");

  std::vector<std::string> compare_dirs;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "compare runs that share a dataset and architecture");
  compare->add_option("--run", compare_dirs, "run directory (repeat)")->required();
  compare->add_option("--out", compare_out, "write report.md and one DOT per run here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (*train_teacher) return run_train_teacher(*train_teacher, teacher_flags, write_cache);
    if (*distill) return run_distill(*distill, distill_flags);
    if (*eval) return run_eval(eval_dir);
    if (*extract) return run_extract_tree(snapshot_path, classes, dot_out, json_out);
    if (*compare) return run_compare(compare_dirs, compare_out);
  } catch (const kdx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const kdx::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
