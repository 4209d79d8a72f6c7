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

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kdx/checkpoint.hpp"
#include "kdx/errors.hpp"
#include "kdx/train.hpp"

using namespace kdx;
namespace fs = std::filesystem;

namespace {

RunConfig toy(StudentMode mode) {
  RunConfig cfg = RunConfig::defaults_for(mode);
  cfg.family = Family::tiny_cnn;
  cfg.teacher_family = Family::tiny_cnn;
  cfg.experts_per_stage = {1, 2, 2};
  cfg.data.num_classes = 4;
  cfg.data.image_size = 16;
  cfg.data.synthetic_train = 256;
  cfg.data.synthetic_test = 128;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.attention_lr = 0.05;
  cfg.milestones = {};
  cfg.lr_step = 0;
  cfg.seed = 1;
  return cfg;
}

const DataSplits& toy_data() {
  static const DataSplits d = load_dataset(toy(StudentMode::plain).data);
  return d;
}

const Network<float>& toy_teacher() {
  static const FitResult r = [] {
    RunConfig cfg = toy(StudentMode::plain);
    cfg.epochs = 4;
    return train_teacher(cfg, toy_data());
  }();
  return *r.model.net;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kdx_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

std::vector<std::uint8_t> cifar_record(std::vector<std::uint8_t> label, std::uint8_t fill) {
  label.resize(label.size() + 3072, fill);
  return label;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("synthetic data is deterministic and subsets take the first examples") {
  DatasetSpec spec = toy(StudentMode::plain).data;
  const auto a = load_dataset(spec);
  const auto b = load_dataset(spec);
  CHECK(a.train.fingerprint == b.train.fingerprint);
  CHECK(a.train.size() == 256);
  CHECK(a.test.size() == 128);
  CHECK(a.train.images.shape() == Shape{256, 3, 16, 16});
  CHECK(a.train.fingerprint != a.test.fingerprint);
  for (int i = 0; i < a.train.size(); ++i) CHECK(a.train.labels[std::size_t(i)] == i % 4);

  spec.train_size = 100;
  const auto sub = load_dataset(spec);
  CHECK(sub.train.size() == 100);
  CHECK(sub.train.fingerprint != a.train.fingerprint);
  CHECK(sub.train.images.array().head(100 * 3 * 16 * 16).isApprox(a.train.images.array().head(100 * 3 * 16 * 16)));

  spec.train_size = 0;
  spec.synthetic_seed = 8;
  CHECK(load_dataset(spec).train.fingerprint != a.train.fingerprint);
}

TEST_CASE("CIFAR binary records parse and truncation reports the offset") {
  const auto dir = scratch("cifar");
  std::vector<std::uint8_t> bytes = cifar_record({3}, 255);
  const auto second = cifar_record({7}, 0);
  bytes.insert(bytes.end(), second.begin(), second.end());
  write_bytes(dir / "two.bin", bytes);
  const auto rec = read_cifar_file((dir / "two.bin").string(), 1, 0);
  CHECK(rec.labels == std::vector<int>{3, 7});
  CHECK(rec.pixels.size() == 2 * 3072);
  CHECK(int(rec.pixels[0]) == 255);
  CHECK(int(rec.pixels[3072]) == 0);
  CHECK(read_cifar_file((dir / "two.bin").string(), 1, 0, 1).labels.size() == 1);

  bytes.resize(3073 + 100);
  write_bytes(dir / "cut.bin", bytes);
  const std::string msg = error_of([&] { read_cifar_file((dir / "cut.bin").string(), 1, 0); });
  CHECK(msg.find("byte offset 3073") != std::string::npos);
  CHECK_THROWS_AS(read_cifar_file((dir / "cut.bin").string(), 1, 0), DataError);
  CHECK_THROWS_AS(read_cifar_file((dir / "absent.bin").string(), 1, 0), DataError);

  // CIFAR-100 keeps the fine label (second byte).
  write_bytes(dir / "c100.bin", cifar_record({2, 42}, 9));
  CHECK(read_cifar_file((dir / "c100.bin").string(), 2, 1).labels == std::vector<int>{42});
  fs::remove_all(dir);
}

TEST_CASE("CIFAR-10 directory loads and normalises") {
  const auto dir = scratch("cifar10");
  for (int b = 1; b <= 5; ++b) write_bytes(dir / ("data_batch_" + std::to_string(b) + ".bin"), cifar_record({std::uint8_t(b)}, 255));
  write_bytes(dir / "test_batch.bin", cifar_record({9}, 0));
  DatasetSpec spec;
  spec.source = DataSource::cifar10_binary;
  spec.root = dir.string();
  const auto d = load_dataset(spec);
  CHECK(d.train.size() == 5);
  CHECK(d.test.size() == 1);
  CHECK(d.train.labels == std::vector<int>{1, 2, 3, 4, 5});
  CHECK(d.train.images(0, 0, 0, 0) == doctest::Approx((1.0 - 0.4914) / 0.2470).epsilon(1e-5));
  CHECK(d.test.images(0, 2, 31, 31) == doctest::Approx(-0.4465 / 0.2616).epsilon(1e-5));
  spec.train_size = 2;
  CHECK(load_dataset(spec).train.size() == 2);
  fs::remove(dir / "test_batch.bin");
  CHECK_THROWS_AS(load_dataset(spec), DataError);
  fs::remove_all(dir);
}

TEST_CASE("batches gather examples and augmentation keeps shape") {
  const auto& d = toy_data().train;
  const std::vector<int> idx{5, 0, 9};
  const auto plain = make_batch(d, idx, DatasetSpec{}, nullptr);
  CHECK(plain.shape() == Shape{3, 3, 16, 16});
  for (int c = 0; c < 3; ++c) CHECK(plain(1, c, 4, 7) == d.images(0, c, 4, 7));
  CHECK(batch_labels(d, idx) == std::vector<int>{1, 0, 1});
  DatasetSpec aug;
  aug.random_crop = aug.horizontal_flip = true;
  std::mt19937_64 rng(1);
  const auto augmented = make_batch(d, idx, aug, &rng);
  CHECK(augmented.shape() == plain.shape());
  CHECK(max_abs_diff(augmented, plain) > 0.0f);
}

TEST_CASE("run configuration serialises to a fixed point") {
  for (StudentMode m : {StudentMode::plain, StudentMode::explainer, StudentMode::vam}) {
    RunConfig cfg = RunConfig::defaults_for(m);
    const std::string text = cfg.serialize();
    CHECK(RunConfig::parse(text).serialize() == text);
  }
  RunConfig cfg = toy(StudentMode::explainer);
  cfg.kd.alpha = 0.3;
  cfg.kd.tau = 2.5;
  cfg.attention_temperature_final = 0.1;
  cfg.data.mean = {0.1f, 0.2f, 0.3f};
  cfg.out_dir = "/tmp/x";
  const std::string text = cfg.serialize();
  const RunConfig back = RunConfig::parse(text);
  CHECK(back.serialize() == text);
  CHECK(back.kd.alpha == 0.3);
  CHECK(back.experts_per_stage == std::vector<int>{1, 2, 2});
  CHECK(RunConfig::parse("# comment\nlr = 0.2\n").lr == 0.2);
  CHECK_THROWS_AS(RunConfig::parse("learning_rate = 0.2\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("epochs = many\n"), ConfigError);
}

TEST_CASE("modes accept only their own variants") {
  auto with = [](StudentMode m, Variant v) {
    RunConfig cfg = RunConfig::defaults_for(m);
    cfg.variant = v;
    return cfg;
  };
  CHECK_NOTHROW(with(StudentMode::plain, Variant::M1).validate());
  CHECK_NOTHROW(with(StudentMode::plain, Variant::M4).validate());
  for (Variant v : {Variant::M2, Variant::M3, Variant::M5, Variant::M6, Variant::none})
    CHECK_THROWS_AS(with(StudentMode::plain, v).validate(), ConfigError);
  for (Variant v : {Variant::M2, Variant::M3, Variant::M5, Variant::M6})
    CHECK_NOTHROW(with(StudentMode::vam, v).validate());
  for (Variant v : {Variant::M1, Variant::M4})
    CHECK_THROWS_AS(with(StudentMode::vam, v).validate(), ConfigError);
  CHECK_THROWS_AS(with(StudentMode::explainer, Variant::M1).validate(), ConfigError);
  RunConfig m6 = with(StudentMode::vam, Variant::M6);
  m6.kd.gamma = 0.0;
  CHECK_THROWS_AS(m6.validate(), ConfigError);

  CHECK_FALSE(with(StudentMode::plain, Variant::M1).terms().kl);
  CHECK(with(StudentMode::plain, Variant::M4).terms().kl);
  const auto t3 = with(StudentMode::vam, Variant::M3).terms();
  CHECK((!t3.kl && t3.entropy));
  const auto t6 = with(StudentMode::vam, Variant::M6).terms();
  CHECK((t6.kl && t6.entropy && t6.supervised_weight == 0.9));
  RunConfig ls = RunConfig::defaults_for(StudentMode::explainer);
  ls.objective = ExplainerObjective::ls;
  CHECK((ls.terms().smoothing && !ls.terms().kl));
}

TEST_CASE("learning-rate schedules") {
  RunConfig cfg;
  // Epoch indices are 0-based: index 150 is the 151st epoch.
  CHECK(cfg.learning_rate(0, false) == doctest::Approx(0.05));
  CHECK(cfg.learning_rate(149, false) == doctest::Approx(0.05));
  CHECK(cfg.learning_rate(150, false) == doctest::Approx(0.005));
  CHECK(cfg.learning_rate(239, false) == doctest::Approx(0.00005));
  CHECK(cfg.learning_rate(0, true) == doctest::Approx(0.01));
  const RunConfig ex = RunConfig::defaults_for(StudentMode::explainer);
  CHECK(ex.learning_rate(29, false) == doctest::Approx(0.1));
  CHECK(ex.learning_rate(30, false) == doctest::Approx(0.01));
  RunConfig anneal = ex;
  anneal.attention_temperature_final = 0.5;
  anneal.epochs = 3;
  CHECK(anneal.temperature_at(0) == doctest::Approx(1.0));
  CHECK(anneal.temperature_at(1) == doctest::Approx(0.75));
  CHECK(anneal.temperature_at(2) == doctest::Approx(0.5));
  CHECK(ex.temperature_at(77) == 1.0);
}

TEST_CASE("metrics CSV round trip") {
  MetricsLog log;
  EpochMetrics a;
  a.epoch = 1;
  a.lr = 0.1;
  a.train_loss = 1.0 / 3.0;
  a.ce_term = 0.25;
  a.kl_term = 1.0 / 3.0 - 0.25;
  a.train_acc = 12.5;
  a.test_acc = 33.0;
  a.wall_time_s = 0.5;
  EpochMetrics b = a;
  b.epoch = 2;
  b.kl_term.reset();
  b.attention_entropy = 2.0794415416798357;
  log.epochs = {a, b};
  const std::string csv = log.to_csv();
  CHECK(csv.rfind(std::string(MetricsLog::header()) + "\n", 0) == 0);
  CHECK(csv.find("\nfinal,") != std::string::npos);
  const auto back = MetricsLog::from_csv(csv);
  CHECK(back.same_curves(log));
  CHECK(back.to_csv() == csv);
  CHECK_FALSE(back.epochs[1].kl_term.has_value());
  MetricsLog other = log;
  other.epochs[1].wall_time_s = 99.0;
  CHECK(other.same_curves(log));
  other.epochs[1].test_acc = 34.0;
  CHECK_FALSE(other.same_curves(log));
}

TEST_CASE("teacher logit cache binds to the dataset") {
  const auto& data = toy_data();
  const auto cache = cache_teacher_logits(toy_teacher(), data.train);
  CHECK(cache.rows() == data.train.size());
  CHECK(cache.classes() == 4);
  const auto live = teacher_logits_for(toy_teacher(), data.train, 17);
  CHECK((cache.logits.row(17).transpose() - live).cwiseAbs().maxCoeff() == 0.0f);
  CHECK_NOTHROW(cache.require_matches(data.train));
  CHECK_THROWS_AS(cache.require_matches(data.test), StaleCacheError);

  DatasetSpec smaller = toy(StudentMode::plain).data;
  smaller.train_size = 200;
  const auto sub = load_dataset(smaller);
  CHECK_THROWS_AS(cache.require_matches(sub.train), StaleCacheError);

  const auto dir = scratch("cache");
  cache.save((dir / "logits.bin").string());
  const auto back = LogitCache::load((dir / "logits.bin").string());
  CHECK(back.fingerprint == cache.fingerprint);
  CHECK(back.logits == cache.logits);
  fs::remove_all(dir);
}

TEST_CASE("cached and live teachers give identical curves") {
  RunConfig cfg = toy(StudentMode::plain);
  cfg.variant = Variant::M4;
  const auto cache = cache_teacher_logits(toy_teacher(), toy_data().train);
  const auto live = distill(cfg, toy_data(), TeacherSource{&toy_teacher(), nullptr});
  const auto cached = distill(cfg, toy_data(), TeacherSource{nullptr, &cache});
  CHECK(live.log.same_curves(cached.log));
  CHECK(live.log.last().kl_term.has_value());
}

TEST_CASE("training is deterministic in the seed") {
  for (StudentMode m : {StudentMode::explainer, StudentMode::vam}) {
    RunConfig cfg = toy(m);
    const TeacherSource t{&toy_teacher(), nullptr};
    const auto a = distill(cfg, toy_data(), t);
    const auto b = distill(cfg, toy_data(), t);
    CHECK(a.log.same_curves(b.log));
    CHECK(a.snapshot.to_json() == b.snapshot.to_json());
    cfg.seed = 2;
    CHECK_FALSE(distill(cfg, toy_data(), t).log.same_curves(a.log));
  }
}

TEST_CASE("logged loss terms follow the variant") {
  const TeacherSource t{&toy_teacher(), nullptr};
  const auto m1 = distill(toy(StudentMode::plain), toy_data(), t);
  for (const auto& e : m1.log.epochs) {
    CHECK_FALSE(e.kl_term.has_value());
    CHECK_FALSE(e.entropy_term.has_value());
    CHECK_FALSE(e.attention_entropy.has_value());
    CHECK(e.train_loss == doctest::Approx(e.ce_term).epsilon(1e-12));
  }
  RunConfig m6 = toy(StudentMode::vam);
  const auto r6 = distill(m6, toy_data(), t);
  for (const auto& e : r6.log.epochs) {
    REQUIRE(e.kl_term.has_value());
    REQUIRE(e.entropy_term.has_value());
    CHECK(e.attention_entropy.has_value());
    CHECK(e.train_loss == doctest::Approx(e.ce_term + *e.kl_term + *e.entropy_term).epsilon(1e-9));
  }
}

TEST_CASE("zero entropy weight reduces the full objective to CE + KL") {
  RunConfig cfg = toy(StudentMode::vam);
  cfg.kd.gamma = 0.0;
  const TeacherSource t{&toy_teacher(), nullptr};
  ObjectiveTerms full{true, true, false, cfg.kd.alpha};
  ObjectiveTerms no_h{true, false, false, cfg.kd.alpha};
  const auto a = fit_student(cfg, full, toy_data(), t);
  const auto b = fit_student(cfg, no_h, toy_data(), t);
  REQUIRE(a.log.epochs.size() == b.log.epochs.size());
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i) {
    CHECK(a.log.epochs[i].train_loss == b.log.epochs[i].train_loss);
    CHECK(*a.log.epochs[i].entropy_term == 0.0);
  }
}

TEST_CASE("explainer with pure supervision has a zero KL column") {
  RunConfig cfg = toy(StudentMode::explainer);
  cfg.kd.alpha = 1.0;
  const auto r = distill(cfg, toy_data(), TeacherSource{&toy_teacher(), nullptr});
  for (const auto& e : r.log.epochs) {
    REQUIRE(e.kl_term.has_value());
    CHECK(*e.kl_term == 0.0);
    CHECK(e.attention_entropy.has_value());
  }
}

TEST_CASE("KL variants without a teacher are rejected") {
  RunConfig cfg = toy(StudentMode::plain);
  cfg.variant = Variant::M4;
  CHECK_THROWS_AS(distill(cfg, toy_data(), TeacherSource{}), ConfigError);
}

TEST_CASE("diverging runs stop with an error") {
  RunConfig cfg = toy(StudentMode::plain);
  cfg.lr = 1e30;
  cfg.momentum = 0.0;
  cfg.epochs = 3;
  CHECK_THROWS_AS(distill(cfg, toy_data(), TeacherSource{}), DivergenceError);
}

TEST_CASE("accuracy scoring") {
  DatasetSpec spec = toy(StudentMode::plain).data;
  spec.num_classes = 10;
  spec.synthetic_test = 200;
  const auto d = load_dataset(spec).test;
  const auto constant = score_predictions(std::vector<int>(std::size_t(d.size()), 0), d);
  CHECK(constant.accuracy == doctest::Approx(10.0));
  CHECK(constant.per_class[0] == doctest::Approx(100.0));
  CHECK(constant.per_class[1] == doctest::Approx(0.0));
  CHECK(constant.count == 200);
  CHECK(score_predictions(d.labels, d).accuracy == doctest::Approx(100.0));
  CHECK_THROWS(score_predictions({1, 2}, d));
}

TEST_CASE("teacher fits a four-class toy and reloads to the same accuracy") {
  RunConfig cfg = toy(StudentMode::plain);
  cfg.teacher_family = Family::wrn16_2;
  cfg.epochs = 20;
  cfg.data.synthetic_train = 512;
  const auto data = load_dataset(cfg.data);
  const auto r = train_teacher(cfg, data);
  CHECK(evaluate(*r.model.net, data.train).accuracy >= 95.0);
  CHECK(r.log.last().train_acc >= 95.0);
  CHECK(r.test_acc == doctest::Approx(evaluate(*r.model.net, data.test).accuracy));

  const auto dir = scratch("teacher");
  save_parameters((dir / "teacher.bin").string(), r.model.net->params());
  Network<float> reloaded(backbone_for(Family::wrn16_2, data.train), 99);
  load_parameters((dir / "teacher.bin").string(), reloaded.params());
  CHECK(evaluate(reloaded, data.test).accuracy == r.test_acc);
  fs::remove_all(dir);
}

TEST_CASE("run directories and objective comparison") {
  const auto root = scratch("runs");
  const TeacherSource t{&toy_teacher(), nullptr};
  std::vector<RunRecord> runs;
  for (ExplainerObjective obj : {ExplainerObjective::ce, ExplainerObjective::ls, ExplainerObjective::kd}) {
    RunConfig cfg = toy(StudentMode::explainer);
    cfg.objective = obj;
    cfg.epochs = 1;
    cfg.out_dir = (root / to_string(obj)).string();
    const auto r = distill(cfg, toy_data(), t);
    for (const char* f : {RunFiles::config, RunFiles::metrics, RunFiles::model, RunFiles::snapshot, RunFiles::summary,
                          RunFiles::tree_dot, RunFiles::tree_json})
      CHECK_MESSAGE(fs::exists(fs::path(cfg.out_dir) / f), f);
    CHECK(fs::exists(fs::path(cfg.out_dir) / RunFiles::snapshots / "epoch_0001.json"));
    runs.push_back(load_run(cfg.out_dir));
    CHECK(runs.back().test_acc == r.test_acc);
    CHECK(runs.back().config.serialize() == cfg.serialize());
    const auto model = load_run_model(cfg.out_dir, backbone_for(cfg.family, toy_data().train));
    CHECK(evaluate(model, toy_data().test).accuracy == r.test_acc);
  }
  const auto report = compare_objectives(runs);
  CHECK(report.rows.size() == 3);
  CHECK(report.rows[1].smoothing_eps.has_value());
  CHECK_FALSE(report.rows[0].smoothing_eps.has_value());
  for (const auto& row : report.rows) CHECK_FALSE(row.dot.empty());
  const std::string md = report.to_markdown();
  CHECK(md.find("label_smoothing") != std::string::npos);

  const auto self = compare_objectives({runs[0], runs[0]});
  CHECK(self.to_markdown().find("| 0.0000 | 0.0000 | 0 |") != std::string::npos);

  CHECK_THROWS_AS(compare_objectives({runs[0]}), ValidationError);
  RunRecord other = runs[1];
  other.fingerprint ^= 1;
  CHECK_THROWS_AS(compare_objectives({runs[0], other}), ValidationError);
  other = runs[1];
  other.config.family = Family::wrn16_2;
  CHECK_THROWS_AS(compare_objectives({runs[0], other}), ValidationError);
  fs::remove_all(root);
}
