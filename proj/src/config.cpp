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

#include "kdx/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "kdx/errors.hpp"

namespace kdx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  return out;
}

template <typename Int>
Int to_int(const std::string& key, const std::string& v) {
  Int out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("'" + key + "': expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_int<int>(key, item));
  }
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::array<float, 3> to_triplet(const std::string& key, const std::string& v) {
  std::array<float, 3> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 3) throw ConfigError("'" + key + "': expected three values");
    out[i++] = float(to_double(key, trim(item)));
  }
  if (i != 3) throw ConfigError("'" + key + "': expected three values");
  return out;
}

std::string fmt_triplet(const std::array<float, 3>& a) {
  std::string s;
  for (std::size_t i = 0; i < 3; ++i) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, a[i]);
    s += (i ? "," : "") + std::string(buf, r.ptr);
  }
  return s;
}

Family family_or_config_error(const std::string& v) {
  try {
    return parse_family(v);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

std::string to_string(StudentMode m) {
  switch (m) {
    case StudentMode::plain: return "plain";
    case StudentMode::explainer: return "explainer";
    case StudentMode::vam: return "vam";
  }
  return "unknown";
}

std::string to_string(Variant v) {
  if (v == Variant::none) return "none";
  return "M" + std::to_string(int(v));
}

std::string to_string(ExplainerObjective o) {
  switch (o) {
    case ExplainerObjective::ce: return "ce";
    case ExplainerObjective::ls: return "ls";
    case ExplainerObjective::kd: return "kd";
  }
  return "unknown";
}

StudentMode parse_mode(const std::string& s) {
  if (s == "plain") return StudentMode::plain;
  if (s == "explainer") return StudentMode::explainer;
  if (s == "vam") return StudentMode::vam;
  throw ConfigError("unknown mode '" + s + "' (expected plain|explainer|vam)");
}

Variant parse_variant(const std::string& s) {
  if (s == "none" || s.empty()) return Variant::none;
  if (s.size() == 2 && (s[0] == 'M' || s[0] == 'm') && s[1] >= '1' && s[1] <= '6') return Variant(s[1] - '0');
  throw ConfigError("unknown variant '" + s + "' (expected M1..M6)");
}

ExplainerObjective parse_objective(const std::string& s) {
  if (s == "ce") return ExplainerObjective::ce;
  if (s == "ls" || s == "label-smoothing") return ExplainerObjective::ls;
  if (s == "kd") return ExplainerObjective::kd;
  throw ConfigError("unknown objective '" + s + "' (expected ce|ls|kd)");
}

RunConfig RunConfig::defaults_for(StudentMode mode) {
  RunConfig c;
  c.mode = mode;
  switch (mode) {
    case StudentMode::plain:
      c.variant = Variant::M1;
      break;
    case StudentMode::vam:
      c.variant = Variant::M6;
      break;
    case StudentMode::explainer:
      c.variant = Variant::none;
      c.family = Family::tiny_cnn;
      c.lr = 0.1;
      c.attention_lr = 0.1;
      c.milestones.clear();
      c.lr_step = 30;
      c.epochs = 300;
      break;
  }
  return c;
}

void RunConfig::validate() const {
  switch (mode) {
    case StudentMode::plain:
      if (variant != Variant::M1 && variant != Variant::M4)
        throw ConfigError("variant " + to_string(variant) + " requires a VAM student; plain mode accepts M1 or M4");
      break;
    case StudentMode::vam:
      if (variant == Variant::none || variant == Variant::M1 || variant == Variant::M4)
        throw ConfigError("variant " + to_string(variant) + " requires plain mode; vam mode accepts M2, M3, M5, M6");
      break;
    case StudentMode::explainer:
      if (variant != Variant::none)
        throw ConfigError("explainer mode takes an objective (ce|ls|kd), not variant " + to_string(variant));
      break;
  }
  if ((variant == Variant::M3 || variant == Variant::M6) && !(kd.gamma > 0.0))
    throw ConfigError("variant " + to_string(variant) + " requires gamma > 0");
  try {
    kd.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  if (w0 < 0.0 || w1 < 0.0) throw ConfigError("binary task weights must be non-negative (0 selects the default)");
  if (!(attention_temperature > 0.0)) throw ConfigError("attention_temperature must be positive");
  if (attention_temperature_final < 0.0) throw ConfigError("attention_temperature_final must be non-negative");
  if (channels_per_block < 0) throw ConfigError("channels_per_block must be non-negative");
  if (!(lr > 0.0) || !(attention_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(lr_decay > 0.0) || lr_decay > 1.0) throw ConfigError("lr_decay must lie in (0,1]");
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1]) throw ConfigError("milestones must be strictly increasing");
  if (lr_step < 0) throw ConfigError("lr_step must be non-negative");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  data.validate();
}

ObjectiveTerms RunConfig::terms() const {
  ObjectiveTerms t;
  switch (mode) {
    case StudentMode::explainer:
      t.kl = objective == ExplainerObjective::kd;
      t.smoothing = objective == ExplainerObjective::ls;
      break;
    default:
      t.kl = variant == Variant::M4 || variant == Variant::M5 || variant == Variant::M6;
      t.entropy = variant == Variant::M3 || variant == Variant::M6;
      break;
  }
  t.supervised_weight = t.kl ? kd.alpha : 1.0;
  return t;
}

BinaryTaskWeights RunConfig::binary_weights() const {
  BinaryTaskWeights w = BinaryTaskWeights::inverse_frequency(data.classes());
  if (w0 > 0.0) w.w0 = w0;
  if (w1 > 0.0) w.w1 = w1;
  return w;
}

double RunConfig::temperature_at(int epoch) const {
  if (!(attention_temperature_final > 0.0) || epochs < 2) return attention_temperature;
  const double f = double(epoch) / double(epochs - 1);
  return attention_temperature + f * (attention_temperature_final - attention_temperature);
}

double RunConfig::learning_rate(int epoch, bool attention) const {
  int decays = 0;
  if (lr_step > 0) {
    decays = epoch / lr_step;
  } else {
    for (int m : milestones)
      if (epoch >= m) ++decays;
  }
  double rate = attention ? attention_lr : lr;
  for (int i = 0; i < decays; ++i) rate *= lr_decay;
  return rate;
}

std::string RunConfig::serialize() const {
  std::ostringstream o;
  o << "mode = " << to_string(mode) << "\n"
    << "variant = " << to_string(variant) << "\n"
    << "objective = " << to_string(objective) << "\n"
    << "family = " << to_string(family) << "\n"
    << "experts_per_stage = " << join(experts_per_stage) << "\n"
    << "attention_temperature = " << fmt(attention_temperature) << "\n"
    << "attention_temperature_final = " << fmt(attention_temperature_final) << "\n"
    << "channels_per_block = " << channels_per_block << "\n"
    << "teacher_family = " << to_string(teacher_family) << "\n"
    << "teacher_checkpoint = " << teacher_checkpoint << "\n"
    << "logit_cache = " << logit_cache << "\n"
    << "alpha = " << fmt(kd.alpha) << "\n"
    << "tau = " << fmt(kd.tau) << "\n"
    << "gamma = " << fmt(kd.gamma) << "\n"
    << "smoothing_eps = " << fmt(kd.smoothing_eps) << "\n"
    << "scale_kl_by_tau_sq = " << (kd.scale_kl_by_tau_sq ? "true" : "false") << "\n"
    << "w0 = " << fmt(w0) << "\n"
    << "w1 = " << fmt(w1) << "\n"
    << "lr = " << fmt(lr) << "\n"
    << "attention_lr = " << fmt(attention_lr) << "\n"
    << "momentum = " << fmt(momentum) << "\n"
    << "weight_decay = " << fmt(weight_decay) << "\n"
    << "lr_decay = " << fmt(lr_decay) << "\n"
    << "milestones = " << join(milestones) << "\n"
    << "lr_step = " << lr_step << "\n"
    << "epochs = " << epochs << "\n"
    << "batch_size = " << batch_size << "\n"
    << "seed = " << seed << "\n"
    << "deterministic = " << (deterministic ? "true" : "false") << "\n"
    << "out_dir = " << out_dir << "\n"
    << "data.source = " << to_string(data.source) << "\n"
    << "data.root = " << data.root << "\n"
    << "data.train_size = " << data.train_size << "\n"
    << "data.test_size = " << data.test_size << "\n"
    << "data.mean = " << fmt_triplet(data.mean) << "\n"
    << "data.std = " << fmt_triplet(data.stddev) << "\n"
    << "data.random_crop = " << (data.random_crop ? "true" : "false") << "\n"
    << "data.horizontal_flip = " << (data.horizontal_flip ? "true" : "false") << "\n"
    << "data.num_classes = " << data.num_classes << "\n"
    << "data.image_size = " << data.image_size << "\n"
    << "data.synthetic_train = " << data.synthetic_train << "\n"
    << "data.synthetic_test = " << data.synthetic_test << "\n"
    << "data.synthetic_groups = " << data.synthetic_groups << "\n"
    << "data.synthetic_noise = " << fmt(data.synthetic_noise) << "\n"
    << "data.synthetic_seed = " << data.synthetic_seed << "\n";
  return o.str();
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "mode") mode = parse_mode(v);
  else if (key == "variant") variant = parse_variant(v);
  else if (key == "objective") objective = parse_objective(v);
  else if (key == "family") family = family_or_config_error(v);
  else if (key == "experts_per_stage") experts_per_stage = to_int_list(key, v);
  else if (key == "attention_temperature") attention_temperature = to_double(key, v);
  else if (key == "attention_temperature_final") attention_temperature_final = to_double(key, v);
  else if (key == "channels_per_block") channels_per_block = to_int<int>(key, v);
  else if (key == "teacher_family") teacher_family = family_or_config_error(v);
  else if (key == "teacher_checkpoint") teacher_checkpoint = v;
  else if (key == "logit_cache") logit_cache = v;
  else if (key == "alpha") kd.alpha = to_double(key, v);
  else if (key == "tau") kd.tau = to_double(key, v);
  else if (key == "gamma") kd.gamma = to_double(key, v);
  else if (key == "smoothing_eps") kd.smoothing_eps = to_double(key, v);
  else if (key == "scale_kl_by_tau_sq") kd.scale_kl_by_tau_sq = to_bool(key, v);
  else if (key == "w0") w0 = to_double(key, v);
  else if (key == "w1") w1 = to_double(key, v);
  else if (key == "lr") lr = to_double(key, v);
  else if (key == "attention_lr") attention_lr = to_double(key, v);
  else if (key == "momentum") momentum = to_double(key, v);
  else if (key == "weight_decay") weight_decay = to_double(key, v);
  else if (key == "lr_decay") lr_decay = to_double(key, v);
  else if (key == "milestones") milestones = to_int_list(key, v);
  else if (key == "lr_step") lr_step = to_int<int>(key, v);
  else if (key == "epochs") epochs = to_int<int>(key, v);
  else if (key == "batch_size") batch_size = to_int<int>(key, v);
  else if (key == "seed") seed = to_int<std::uint64_t>(key, v);
  else if (key == "deterministic") deterministic = to_bool(key, v);
  else if (key == "out_dir") out_dir = v;
  else if (key == "data.source") data.source = parse_data_source(v);
  else if (key == "data.root") data.root = v;
  else if (key == "data.train_size") data.train_size = to_int<int>(key, v);
  else if (key == "data.test_size") data.test_size = to_int<int>(key, v);
  else if (key == "data.mean") data.mean = to_triplet(key, v);
  else if (key == "data.std") data.stddev = to_triplet(key, v);
  else if (key == "data.random_crop") data.random_crop = to_bool(key, v);
  else if (key == "data.horizontal_flip") data.horizontal_flip = to_bool(key, v);
  else if (key == "data.num_classes") data.num_classes = to_int<int>(key, v);
  else if (key == "data.image_size") data.image_size = to_int<int>(key, v);
  else if (key == "data.synthetic_train") data.synthetic_train = to_int<int>(key, v);
  else if (key == "data.synthetic_test") data.synthetic_test = to_int<int>(key, v);
  else if (key == "data.synthetic_groups") data.synthetic_groups = to_int<int>(key, v);
  else if (key == "data.synthetic_noise") data.synthetic_noise = to_double(key, v);
  else if (key == "data.synthetic_seed") data.synthetic_seed = to_int<std::uint64_t>(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

RunConfig RunConfig::parse(const std::string& text, RunConfig base) {
  for (const auto& [k, v] : parse_key_values(text)) base.set(k, v);
  return base;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return RunConfig::parse(ss.str(), std::move(base));
}

}  // namespace kdx
