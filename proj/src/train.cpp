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

#include "kdx/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <sstream>

#include "kdx/checkpoint.hpp"
#include "kdx/errors.hpp"

namespace kdx {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- models

ParameterStore<float>& StudentModel::params() { return explainer ? explainer->params() : net->params(); }
const ParameterStore<float>& StudentModel::params() const { return explainer ? explainer->params() : net->params(); }

AttentionSnapshot StudentModel::snapshot() const {
  if (explainer) return explainer->snapshot();
  return net->has_gates() ? net->snapshot() : AttentionSnapshot{};
}

int StudentModel::num_classes() const { return explainer ? explainer->num_classes() : net->spec().num_classes; }

bool StudentModel::gated() const { return explainer || net->has_gates(); }

BackboneSpec backbone_for(Family family, const Dataset& data) {
  const Shape s = data.image_shape();
  return BackboneSpec::make(family, data.num_classes, s.h, s.w, s.c);
}

StudentModel build_student(const RunConfig& cfg, const BackboneSpec& spec) {
  StudentModel m;
  m.mode = cfg.mode;
  switch (cfg.mode) {
    case StudentMode::plain:
      m.net = std::make_unique<Network<float>>(spec, cfg.seed);
      break;
    case StudentMode::vam: {
      m.net = std::make_unique<Network<float>>(spec, cfg.seed);
      const int cpb = cfg.channels_per_block > 0 ? cfg.channels_per_block : default_channels_per_block(cfg.family);
      m.wrap = wrap_network(*m.net, cpb);
      if (m.wrap.wrapped.empty()) throw ConfigError("channels_per_block=" + std::to_string(cpb) + " wraps no layer");
      break;
    }
    case StudentMode::explainer: {
      ExplainerConfig ec = ExplainerConfig::defaults(spec, cfg.seed);
      if (!cfg.experts_per_stage.empty()) ec.experts_per_stage = cfg.experts_per_stage;
      ec.temperature = cfg.attention_temperature;
      ec.validate(spec);
      m.explainer = std::make_unique<ExplainerModel<float>>(spec, ec);
      break;
    }
  }
  return m;
}

// ---------------------------------------------------------------- metrics

namespace {

std::string cell(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string cell(const std::optional<double>& v) { return v ? cell(*v) : std::string(); }

std::optional<double> parse_cell(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace

const char* MetricsLog::header() {
  return "epoch,lr,train_loss,ce_term,kl_term,entropy_term,attention_entropy,train_acc,test_acc,wall_time_s";
}

std::string MetricsLog::to_csv() const {
  std::ostringstream o;
  o << header() << "\n";
  auto row = [&o](const std::string& epoch, const EpochMetrics& m) {
    o << epoch << ',' << cell(m.lr) << ',' << cell(m.train_loss) << ',' << cell(m.ce_term) << ',' << cell(m.kl_term)
      << ',' << cell(m.entropy_term) << ',' << cell(m.attention_entropy) << ',' << cell(m.train_acc) << ','
      << cell(m.test_acc) << ',' << cell(m.wall_time_s) << "\n";
  };
  for (const auto& m : epochs) row(std::to_string(m.epoch), m);
  if (!epochs.empty()) row("final", epochs.back());
  return o.str();
}

MetricsLog MetricsLog::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != header()) throw DataError("metrics: unexpected CSV header");
  MetricsLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 10) throw DataError("metrics: expected 10 columns, got " + std::to_string(f.size()));
    if (f[0] == "final") continue;
    EpochMetrics m;
    m.epoch = std::stoi(f[0]);
    m.lr = std::stod(f[1]);
    m.train_loss = std::stod(f[2]);
    m.ce_term = std::stod(f[3]);
    m.kl_term = parse_cell(f[4]);
    m.entropy_term = parse_cell(f[5]);
    m.attention_entropy = parse_cell(f[6]);
    m.train_acc = std::stod(f[7]);
    m.test_acc = std::stod(f[8]);
    m.wall_time_s = std::stod(f[9]);
    if (!log.epochs.empty() && m.epoch <= log.epochs.back().epoch) throw DataError("metrics: epochs not increasing");
    log.epochs.push_back(m);
  }
  return log;
}

const EpochMetrics& MetricsLog::last() const {
  if (epochs.empty()) throw InvalidArgument("metrics log is empty");
  return epochs.back();
}

bool MetricsLog::same_curves(const MetricsLog& other) const {
  if (epochs.size() != other.epochs.size()) return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = other.epochs[i];
    if (a.epoch != b.epoch || a.lr != b.lr || a.train_loss != b.train_loss || a.ce_term != b.ce_term ||
        a.kl_term != b.kl_term || a.entropy_term != b.entropy_term || a.attention_entropy != b.attention_entropy ||
        a.train_acc != b.train_acc || a.test_acc != b.test_acc)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------- logit cache

namespace {

constexpr char kCacheMagic[4] = {'K', 'D', 'X', 'L'};

}  // namespace

void LogitCache::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write logit cache " + path);
  out.write(kCacheMagic, 4);
  const std::uint64_t n = std::uint64_t(logits.rows());
  const std::uint32_t k = std::uint32_t(logits.cols());
  out.write(reinterpret_cast<const char*>(&fingerprint), sizeof fingerprint);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(&k), sizeof k);
  out.write(reinterpret_cast<const char*>(logits.data()), std::streamsize(logits.size() * sizeof(float)));
  if (!out) throw DataError("failed writing logit cache " + path);
}

LogitCache LogitCache::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open logit cache " + path);
  char magic[4];
  LogitCache c;
  std::uint64_t n = 0;
  std::uint32_t k = 0;
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kCacheMagic)) throw DataError(path + ": not a logit cache");
  in.read(reinterpret_cast<char*>(&c.fingerprint), sizeof c.fingerprint);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  in.read(reinterpret_cast<char*>(&k), sizeof k);
  if (!in) throw DataError(path + ": truncated header");
  c.logits.resize(Eigen::Index(n), Eigen::Index(k));
  if (!in.read(reinterpret_cast<char*>(c.logits.data()), std::streamsize(c.logits.size() * sizeof(float))))
    throw DataError(path + ": truncated logits at byte offset " + std::to_string(std::streamoff(in.tellg())));
  return c;
}

void LogitCache::require_matches(const Dataset& data) const {
  if (fingerprint != data.fingerprint || rows() != data.size()) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "logit cache is stale: fingerprint %016llx (%d rows) vs dataset %016llx (%d rows)",
                  static_cast<unsigned long long>(fingerprint), rows(),
                  static_cast<unsigned long long>(data.fingerprint), data.size());
    throw StaleCacheError(buf);
  }
  if (classes() != data.num_classes)
    throw StaleCacheError("logit cache has " + std::to_string(classes()) + " classes, dataset has " +
                          std::to_string(data.num_classes));
}

Vector<float> teacher_logits_for(const Network<float>& teacher, const Dataset& data, int index) {
  const Shape s = data.image_shape();
  Tensor<float> x(s);
  x.array() = data.images.array().segment(Eigen::Index(index) * s.sample_size(), s.sample_size());
  const Tensor<float> z = teacher.logits(x);
  return z.rows().row(0).transpose();
}

LogitCache cache_teacher_logits(const Network<float>& teacher, const Dataset& data) {
  if (teacher.spec().num_classes != data.num_classes)
    throw ShapeError("teacher predicts " + std::to_string(teacher.spec().num_classes) + " classes, dataset has " +
                     std::to_string(data.num_classes));
  LogitCache c;
  c.fingerprint = data.fingerprint;
  c.logits.resize(data.size(), data.num_classes);
  for (int i = 0; i < data.size(); ++i) c.logits.row(i) = teacher_logits_for(teacher, data, i).transpose();
  return c;
}

// ---------------------------------------------------------------- evaluation

EvalResult score_predictions(const std::vector<int>& predictions, const Dataset& data) {
  if (int(predictions.size()) != data.size()) throw ShapeError("prediction count does not match dataset size");
  EvalResult r;
  r.count = data.size();
  std::vector<int> hits(std::size_t(data.num_classes), 0), totals(std::size_t(data.num_classes), 0);
  int correct = 0;
  for (int i = 0; i < data.size(); ++i) {
    const int y = data.labels[std::size_t(i)];
    ++totals[std::size_t(y)];
    if (predictions[std::size_t(i)] == y) {
      ++hits[std::size_t(y)];
      ++correct;
    }
  }
  r.accuracy = r.count ? 100.0 * correct / r.count : 0.0;
  for (int k = 0; k < data.num_classes; ++k)
    r.per_class.push_back(totals[std::size_t(k)] ? 100.0 * hits[std::size_t(k)] / totals[std::size_t(k)] : 0.0);
  return r;
}

namespace {

constexpr int kEvalBatch = 250;

template <typename Fn>
std::vector<int> predict_batched(const Dataset& data, Fn&& predict) {
  std::vector<int> preds;
  preds.reserve(std::size_t(data.size()));
  std::vector<int> idx;
  for (int start = 0; start < data.size(); start += kEvalBatch) {
    idx.resize(std::size_t(std::min(kEvalBatch, data.size() - start)));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<float> x = make_batch(data, idx, DatasetSpec{}, nullptr);
    predict(x, preds);
  }
  return preds;
}

}  // namespace

EvalResult evaluate(const Network<float>& model, const Dataset& data) {
  if (model.spec().num_classes != data.num_classes)
    throw ShapeError("model predicts " + std::to_string(model.spec().num_classes) + " classes, dataset has " +
                     std::to_string(data.num_classes));
  return score_predictions(predict_batched(data,
                                           [&](const Tensor<float>& x, std::vector<int>& out) {
                                             const Tensor<float> z = model.logits(x);
                                             for (int n = 0; n < z.shape().n; ++n)
                                               out.push_back(argmax_lowest<float>(z.rows().row(n).transpose()));
                                           }),
                           data);
}

EvalResult evaluate(const ExplainerModel<float>& model, const Dataset& data) {
  if (model.num_classes() != data.num_classes)
    throw ShapeError("explainer has " + std::to_string(model.num_classes()) + " heads, dataset has " +
                     std::to_string(data.num_classes) + " classes");
  return score_predictions(predict_batched(data,
                                           [&](const Tensor<float>& x, std::vector<int>& out) {
                                             const auto o = forward(model, x);
                                             for (int n = 0; n < o.batch(); ++n) out.push_back(predict_class(o, n));
                                           }),
                           data);
}

EvalResult evaluate(const StudentModel& model, const Dataset& data) {
  return model.explainer ? evaluate(*model.explainer, data) : evaluate(*model.net, data);
}

// ---------------------------------------------------------------- training

namespace {

struct BatchLoss {
  double ce = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  int correct = 0;
};

Vector<double> row_of(const Tensor<float>& t, int n) { return t.rows().row(n).transpose().cast<double>(); }

void sgd_step(ParameterStore<float>& params, const RunConfig& cfg, double lr_w, double lr_a) {
  const float mu = float(cfg.momentum);
  for (auto& p : params) {
    if (!p->trainable()) continue;
    const bool att = p->group == ParamGroup::attention;
    const float lr = float(att ? lr_a : lr_w);
    const float wd = p->group == ParamGroup::weight ? float(cfg.weight_decay) : 0.0f;
    if (p->velocity.size() != p->value.size()) p->velocity = Tensor<float>(p->value.shape());
    auto v = p->velocity.array();
    v = mu * v + p->grad.array() + wd * p->value.array();
    p->value.array() -= lr * v;
  }
}

/// Seeds gamma * dH/da on every trainable gate table and returns sum H.
double seed_entropy(Tape<float>& tape, const GateLog<float>& gates, double gamma) {
  double total = 0.0;
  for (const auto& g : gates) {
    if (!g.trainable) continue;
    const Tensor<float>& a = tape.value(g.weights);
    const int rows = a.shape().n;
    const int arity = a.shape().c;
    Tensor<float> grad(a.shape());
    for (int r = 0; r < rows; ++r) {
      const Vector<double> w = a.rows().row(r).transpose().cast<double>();
      total += entropy(w);
      const Vector<double> gw = gamma * entropy_grad_wrt_weights(w);
      for (int j = 0; j < arity; ++j) grad.data()[Eigen::Index(r) * arity + j] = float(gw[j]);
    }
    tape.seed(g.weights, grad);
  }
  return total;
}

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const ObjectiveTerms& terms, const DataSplits& data, const TeacherSource& teacher)
      : cfg_(cfg), terms_(terms), data_(data), teacher_(teacher), bw_(cfg.binary_weights()) {}

  BatchLoss step(StudentModel& m, std::span<const int> idx, std::mt19937_64& rng, double lr_w, double lr_a) {
    const bool augment = cfg_.data.random_crop || cfg_.data.horizontal_flip;
    const Tensor<float> x = make_batch(data_.train, idx, cfg_.data, augment ? &rng : nullptr);
    const std::vector<int> y = batch_labels(data_.train, idx);
    m.params().zero_grad();
    Tape<float> tape(true);
    const Var xin = tape.input(x);
    BatchLoss loss = m.explainer ? explainer_loss(*m.explainer, tape, xin, idx, y)
                                 : network_loss(*m.net, tape, xin, idx, y);
    if (!std::isfinite(loss.ce + loss.kl + loss.entropy)) return loss;
    tape.backward();
    sgd_step(m.params(), cfg_, lr_w, lr_a);
    return loss;
  }

 private:
  static BatchLoss diverged() {
    BatchLoss l;
    l.ce = std::numeric_limits<double>::quiet_NaN();
    return l;
  }

  std::optional<Vector<double>> teacher_probs(int index) const {
    if (!terms_.kl) return std::nullopt;
    Vector<double> z = teacher_.cache ? Vector<double>(teacher_.cache->logits.row(index).transpose().cast<double>())
                                      : teacher_logits_for(*teacher_.live, data_.train, index).cast<double>();
    return tempered_softmax(z, cfg_.kd.tau);
  }

  Vector<double> class_target(int label) const {
    Vector<double> t = one_hot<double>(label, data_.train.num_classes);
    return terms_.smoothing ? smoothed_targets(t, cfg_.kd.smoothing_eps) : t;
  }

  BatchLoss network_loss(const Network<float>& net, Tape<float>& tape, Var xin, std::span<const int> idx,
                         const std::vector<int>& y) {
    GateLog<float> gates;
    const Var out = net.forward(tape, xin, true, &gates);
    const Tensor<float>& z = tape.value(out);
    if (!z.array().allFinite()) return diverged();
    const int B = int(idx.size());
    const double inv_b = 1.0 / B;
    const double kl_w = (1.0 - cfg_.kd.alpha) * cfg_.kd.kl_scale();
    Tensor<float> grad(z.shape());
    BatchLoss loss;
    for (int b = 0; b < B; ++b) {
      const Vector<double> zs = row_of(z, b);
      if (argmax_lowest(zs) == y[std::size_t(b)]) ++loss.correct;
      auto ce = softmax_ce_with_grad(zs, class_target(y[std::size_t(b)]));
      loss.ce += terms_.supervised_weight * ce.value * inv_b;
      Vector<double> g = terms_.supervised_weight * ce.grad;
      if (auto q = teacher_probs(idx[std::size_t(b)])) {
        auto kl = tempered_kl_with_grad(*q, zs, cfg_.kd.tau);
        loss.kl += kl_w * kl.value * inv_b;
        g += kl_w * kl.grad;
      }
      grad.rows().row(b) = (g * inv_b).cast<float>().transpose();
    }
    tape.seed(out, grad);
    if (terms_.entropy) loss.entropy = cfg_.kd.gamma * seed_entropy(tape, gates, cfg_.kd.gamma);
    return loss;
  }

  BatchLoss explainer_loss(const ExplainerModel<float>& model, Tape<float>& tape, Var xin, std::span<const int> idx,
                           const std::vector<int>& y) {
    const ExplainerVars<float> vars = model.forward(tape, xin, true);
    const int K = model.num_classes();
    const int B = int(idx.size());
    const double inv_b = 1.0 / B;
    const double alpha = terms_.kl ? cfg_.kd.alpha : 1.0;
    std::vector<Tensor<float>> grads;
    for (Var h : vars.heads) {
      if (!tape.value(h).array().allFinite()) return diverged();
      grads.emplace_back(tape.value(h).shape());
    }
    BatchLoss loss;
    for (int b = 0; b < B; ++b) {
      std::vector<Vector<double>> heads;
      std::vector<ProbVector<double>> probs;
      for (Var h : vars.heads) {
        heads.push_back(row_of(tape.value(h), b));
        probs.push_back(softmax(heads.back()));
      }
      if (predict_class(probs) == y[std::size_t(b)]) ++loss.correct;
      const auto targets = terms_.smoothing ? to_binary_targets(class_target(y[std::size_t(b)]))
                                            : binary_label_targets<double>(y[std::size_t(b)], K);
      std::optional<std::vector<ProbVector<double>>> teacher;
      if (auto q = teacher_probs(idx[std::size_t(b)])) teacher = to_binary_targets(*q);
      const auto l = explainer_objective_with_grad(heads, targets, teacher ? &*teacher : nullptr, alpha, cfg_.kd.tau,
                                                   cfg_.kd.scale_kl_by_tau_sq, bw_);
      loss.ce += l.supervised * inv_b;
      loss.kl += l.distill * inv_b;
      for (int k = 0; k < K; ++k) grads[std::size_t(k)].rows().row(b) = (l.head_grads[std::size_t(k)] * inv_b).cast<float>().transpose();
    }
    for (int k = 0; k < K; ++k) tape.seed(vars.heads[std::size_t(k)], grads[std::size_t(k)]);
    if (terms_.entropy) loss.entropy = cfg_.kd.gamma * seed_entropy(tape, vars.gates, cfg_.kd.gamma);
    return loss;
  }

  const RunConfig& cfg_;
  ObjectiveTerms terms_;
  const DataSplits& data_;
  TeacherSource teacher_;
  BinaryTaskWeights bw_;
};

}  // namespace

FitResult fit_student(const RunConfig& cfg, const ObjectiveTerms& terms, const DataSplits& data,
                      const TeacherSource& teacher, const EpochHook& hook) {
  try {
    cfg.kd.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  if (data.train.size() == 0) throw DataError("training split is empty");
  if (data.train.num_classes != data.test.num_classes) throw DataError("train/test class counts differ");
  if (terms.kl) {
    if (!teacher.available())
      throw ConfigError("the objective includes a KL term but no teacher checkpoint or logit cache was given");
    if (teacher.cache) {
      teacher.cache->require_matches(data.train);
    } else if (teacher.live->spec().num_classes != data.train.num_classes) {
      throw ShapeError("teacher class count does not match the dataset");
    }
  }

  FitResult result;
  result.model = build_student(cfg, backbone_for(cfg.family, data.train));
  StudentModel& model = result.model;
  Trainer trainer(cfg, terms, data, teacher);
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(std::size_t(data.train.size()));
  std::iota(order.begin(), order.end(), 0);
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_w = cfg.learning_rate(epoch, false);
    const double lr_a = cfg.learning_rate(epoch, true);
    if (model.explainer) model.explainer->set_temperature(cfg.temperature_at(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double ce = 0.0, kl = 0.0, ent = 0.0;
    int correct = 0, batches = 0;
    for (std::size_t s = 0; s < order.size(); s += std::size_t(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), s + std::size_t(cfg.batch_size));
      const BatchLoss l = trainer.step(model, std::span<const int>(order.data() + s, e - s), rng, lr_w, lr_a);
      if (!std::isfinite(l.ce + l.kl + l.entropy))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                              std::to_string(batches + 1) + " (ce=" + cell(l.ce) + ", kl=" + cell(l.kl) +
                              ", entropy=" + cell(l.entropy) + ")");
      ce += l.ce;
      kl += l.kl;
      ent += l.entropy;
      correct += l.correct;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr_w;
    m.ce_term = ce / batches;
    m.train_loss = m.ce_term;
    if (terms.kl) {
      m.kl_term = kl / batches;
      m.train_loss += *m.kl_term;
    }
    if (terms.entropy) {
      m.entropy_term = ent / batches;
      m.train_loss += *m.entropy_term;
    }
    if (model.gated()) m.attention_entropy = attention_entropy(model.snapshot());
    m.train_acc = 100.0 * correct / data.train.size();
    m.test_acc = evaluate(model, data.test).accuracy;
    m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.epochs.push_back(m);
    if (hook) hook(model, m);
  }
  result.snapshot = model.snapshot();
  result.test_acc = result.log.last().test_acc;
  return result;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

char hex_digit(unsigned v) { return "0123456789abcdef"[v & 15]; }

std::string hex64(std::uint64_t v) {
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[std::size_t(i)] = hex_digit(unsigned(v));
  return s;
}

}  // namespace

FitResult distill(const RunConfig& cfg, const DataSplits& data, const TeacherSource& teacher) {
  cfg.validate();
  EpochHook hook;
  if (!cfg.out_dir.empty()) {
    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir / RunFiles::snapshots);
    write_text(dir / RunFiles::config, cfg.serialize());
    auto log = std::make_shared<MetricsLog>();
    hook = [dir, log](const StudentModel& m, const EpochMetrics& e) {
      log->epochs.push_back(e);
      write_text(dir / RunFiles::metrics, log->to_csv());
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.json", e.epoch);
      write_text(dir / RunFiles::snapshots / name, m.snapshot().to_json());
    };
  }
  FitResult r = fit_student(cfg, cfg.terms(), data, teacher, hook);
  if (!cfg.out_dir.empty()) write_run(cfg.out_dir, cfg, r, data.train.fingerprint);
  return r;
}

FitResult train_teacher(const RunConfig& cfg, const DataSplits& data) {
  RunConfig t = cfg;
  t.mode = StudentMode::plain;
  t.variant = Variant::M1;
  t.family = cfg.teacher_family;
  t.validate();
  return fit_student(t, t.terms(), data, TeacherSource{});
}

// ---------------------------------------------------------------- run directories

void write_run(const std::string& dir, const RunConfig& cfg, const FitResult& result, std::uint64_t fingerprint) {
  const fs::path d(dir);
  fs::create_directories(d);
  write_text(d / RunFiles::config, cfg.serialize());
  write_text(d / RunFiles::metrics, result.log.to_csv());
  save_parameters((d / RunFiles::model).string(), result.model.params());
  write_text(d / RunFiles::snapshot, result.snapshot.to_json());
  nlohmann::json s;
  s["fingerprint"] = hex64(fingerprint);
  s["mode"] = to_string(cfg.mode);
  s["family"] = to_string(cfg.family);
  s["variant"] = to_string(cfg.variant);
  s["objective"] = to_string(cfg.objective);
  s["test_acc"] = result.test_acc;
  s["epochs"] = result.log.epochs.size();
  write_text(d / RunFiles::summary, s.dump(1) + "\n");
  if (result.model.explainer) {
    const NeuralTree tree = extract_tree(result.snapshot, result.model.num_classes());
    write_text(d / RunFiles::tree_dot, to_dot(tree));
    write_text(d / RunFiles::tree_json, to_json(tree));
  }
}

RunRecord load_run(const std::string& dir) {
  const fs::path d(dir);
  RunRecord r;
  r.name = d.filename().string();
  if (r.name.empty()) r.name = d.parent_path().filename().string();
  r.config = RunConfig::parse(read_text(d / RunFiles::config));
  const auto s = nlohmann::json::parse(read_text(d / RunFiles::summary));
  r.fingerprint = std::stoull(s.at("fingerprint").get<std::string>(), nullptr, 16);
  r.test_acc = s.at("test_acc").get<double>();
  r.snapshot = AttentionSnapshot::from_json(read_text(d / RunFiles::snapshot));
  return r;
}

StudentModel load_run_model(const std::string& dir, const BackboneSpec& spec) {
  const RunConfig cfg = RunConfig::parse(read_text(fs::path(dir) / RunFiles::config));
  StudentModel m = build_student(cfg, spec);
  load_parameters((fs::path(dir) / RunFiles::model).string(), m.params());
  return m;
}

// ---------------------------------------------------------------- comparison

ComparisonReport compare_objectives(const std::vector<RunRecord>& runs) {
  if (runs.size() < 2) throw ValidationError("compare needs at least two runs");
  const RunRecord& ref = runs.front();
  ComparisonReport report;
  for (const auto& r : runs) {
    if (r.fingerprint != ref.fingerprint)
      throw ValidationError("run '" + r.name + "' used a different dataset than '" + ref.name + "'");
    if (r.config.family != ref.config.family || r.config.mode != ref.config.mode)
      throw ValidationError("run '" + r.name + "' uses a different architecture than '" + ref.name + "'");
    ComparisonRow row;
    row.name = r.name;
    row.objective = r.config.mode == StudentMode::explainer ? to_string(r.config.objective) : to_string(r.config.variant);
    if (r.config.terms().smoothing) row.smoothing_eps = r.config.kd.smoothing_eps;
    row.test_acc = r.test_acc;
    row.total_entropy = r.snapshot.modules.empty() ? 0.0 : attention_entropy(r.snapshot);
    if (r.config.mode == StudentMode::explainer) {
      const int K = r.config.data.classes();
      const EntropyReport e = entropy_report(r.snapshot, K);
      row.retained_blocks = e.retained_blocks;
      row.total_blocks = e.total_blocks;
      row.dot = to_dot(extract_tree(r.snapshot, K));
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string ComparisonReport::to_markdown() const {
  std::ostringstream o;
  o << "| run | objective | label_smoothing | test_acc | total_entropy | retained_blocks | d_acc | d_entropy | "
       "d_retained |\n";
  o << "|---|---|---|---|---|---|---|---|---|\n";
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  const ComparisonRow& ref = rows.front();
  for (const auto& r : rows) {
    o << "| " << r.name << " | " << r.objective << " | " << (r.smoothing_eps ? num(*r.smoothing_eps) : "-") << " | "
      << num(r.test_acc) << " | " << num(r.total_entropy) << " | "
      << (r.retained_blocks ? std::to_string(*r.retained_blocks) + "/" + std::to_string(*r.total_blocks) : "-")
      << " | " << num(r.test_acc - ref.test_acc) << " | " << num(r.total_entropy - ref.total_entropy) << " | "
      << (r.retained_blocks && ref.retained_blocks ? std::to_string(*r.retained_blocks - *ref.retained_blocks) : "-")
      << " |\n";
  }
  return o.str();
}

}  // namespace kdx
