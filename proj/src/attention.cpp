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

#include "kdx/attention.hpp"

#include <cmath>
#include <json.hpp>

namespace kdx {

using nlohmann::json;

void AttentionSnapshot::validate() const {
  for (const auto& m : modules) {
    const std::string where = "attention module " + m.id();
    if (m.weights.empty()) throw InvariantViolation(where + " has no weights");
    if (m.sources.size() != m.weights.size() || m.logits.size() != m.weights.size())
      throw InvariantViolation(where + ": sources/logits/weights lengths differ");
    double sum = 0.0;
    for (double a : m.weights) {
      if (!std::isfinite(a) || a < 0.0) throw InvariantViolation(where + " has a negative or non-finite weight");
      sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InvariantViolation(where + " weights do not sum to 1");
  }
}

std::string AttentionSnapshot::to_json() const {
  json arr = json::array();
  for (const auto& m : modules) {
    arr.push_back({{"stage", m.stage}, {"block", m.block}, {"sources", m.sources}, {"logits", m.logits},
                   {"weights", m.weights}});
  }
  return arr.dump(1);
}

AttentionSnapshot AttentionSnapshot::from_json(const std::string& text) {
  AttentionSnapshot snap;
  json arr;
  try {
    arr = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("snapshot JSON: ") + e.what());
  }
  if (!arr.is_array()) throw ValidationError("snapshot JSON must be an array of modules");
  try {
    for (const auto& item : arr) {
      AttentionRecord r;
      r.stage = item.at("stage").get<int>();
      r.block = item.at("block").get<int>();
      r.sources = item.at("sources").get<std::vector<std::string>>();
      r.logits = item.at("logits").get<std::vector<double>>();
      r.weights = item.at("weights").get<std::vector<double>>();
      snap.modules.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("snapshot JSON: ") + e.what());
  }
  return snap;
}

}  // namespace kdx
