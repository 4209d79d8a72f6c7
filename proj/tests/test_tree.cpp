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
#include <random>
#include <set>

#include "fd.hpp"
#include "kdx/errors.hpp"
#include "kdx/tree.hpp"

using namespace kdx;

namespace {

AttentionRecord record(int stage, int block, std::vector<std::string> sources, std::vector<double> weights) {
  AttentionRecord r;
  r.stage = stage;
  r.block = block;
  r.sources = std::move(sources);
  r.weights = std::move(weights);
  for (double w : r.weights) r.logits.push_back(std::log(w));
  return r;
}

// Two experts after the stem, two heads.
AttentionSnapshot two_class(std::vector<double> head0, std::vector<double> head1) {
  AttentionSnapshot s;
  s.modules.push_back(record(2, 0, {"1:0"}, {1.0}));
  s.modules.push_back(record(2, 1, {"1:0"}, {1.0}));
  s.modules.push_back(record(3, 0, {"2:0", "2:1"}, std::move(head0)));
  s.modules.push_back(record(3, 1, {"2:0", "2:1"}, std::move(head1)));
  return s;
}

// Gated stages 2..L+1 with the given counts; the last count is K.
AttentionSnapshot random_snapshot(const std::vector<int>& counts, std::mt19937_64& rng, double scale) {
  AttentionSnapshot s;
  int prev = 1;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const int stage = int(i) + 2;
    for (int j = 0; j < counts[i]; ++j) {
      const Vector<double> z = test::random_vector(prev, rng, scale);
      const Vector<double> a = attention_weights(AttentionModule<double>{z, 1.0});
      AttentionRecord r;
      r.stage = stage;
      r.block = j;
      for (int k = 0; k < prev; ++k) {
        r.sources.push_back(node_id(stage - 1, k));
        r.logits.push_back(z[k]);
        r.weights.push_back(a[k]);
      }
      s.modules.push_back(std::move(r));
    }
    prev = counts[i];
  }
  return s;
}

// Follows every head's chain of first-maximum parents to the input.
std::set<std::string> reachable_oracle(const AttentionSnapshot& s, int head_stage) {
  std::set<std::string> out;
  for (const auto& head : s.modules) {
    if (head.stage != head_stage) continue;
    const AttentionRecord* cur = &head;
    while (true) {
      out.insert(cur->id());
      const auto best = std::max_element(cur->weights.begin(), cur->weights.end()) - cur->weights.begin();
      const std::string parent = cur->sources[std::size_t(best)];
      const AttentionRecord* next = nullptr;
      for (const auto& m : s.modules)
        if (m.id() == parent) next = &m;
      if (!next) {
        out.insert(parent);
        break;
      }
      cur = next;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("retained blocks match a path-following oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> counts;
    const int depth = 1 + int(rng() % 3);
    for (int d = 0; d < depth; ++d) counts.push_back(1 + int(rng() % 4));
    const int K = 2 + int(rng() % 5);
    counts.push_back(K);
    const auto snap = random_snapshot(counts, rng, 2.0);
    const auto tree = extract_tree(snap, K);
    const auto expected = reachable_oracle(snap, depth + 2);
    const auto got = tree.retained();
    CHECK(std::set<std::string>(got.begin(), got.end()) == expected);
    CHECK(tree.is_tree);
    CHECK(tree.leaves().size() == std::size_t(K));
    // Each retained gated node has exactly one parent edge.
    for (const auto& n : tree.nodes) {
      const auto edges = std::count_if(tree.edges.begin(), tree.edges.end(), [&](const TreeEdge& e) { return e.child == n.id; });
      CHECK(edges == (n.reachable && n.gated() ? 1 : 0));
    }
    CHECK(tree.retained_count() <= int(tree.nodes.size()));
  }
}

TEST_CASE("shared trunk and a pruned expert") {
  const auto tree = extract_tree(two_class({0.8, 0.2}, {0.55, 0.45}), 2);
  CHECK(tree.retained() == std::vector<std::string>{"1:0", "2:0", "3:0", "3:1"});
  CHECK_FALSE(tree.find("2:1")->reachable);
  CHECK(tree.edges == std::vector<TreeEdge>{{"2:0", "1:0"}, {"3:0", "2:0"}, {"3:1", "2:0"}});
  const auto report = entropy_report(two_class({0.8, 0.2}, {0.55, 0.45}));
  CHECK(report.class_branch == std::vector<std::string>{"2:0", "2:0"});
  CHECK(report.branches.at("2:0") == std::vector<int>{0, 1});
  CHECK(report.retained_blocks == 4);
  CHECK(report.total_blocks == 5);
}

TEST_CASE("ties resolve to the lowest source") {
  const auto tree = extract_tree(two_class({0.5, 0.5}, {0.5, 0.5}), 2);
  CHECK(tree.find("3:0")->selected == 0);
  CHECK(tree.find("3:1")->selected == 0);
}

TEST_CASE("an empty snapshot yields K unattached leaves") {
  const auto tree = extract_tree(AttentionSnapshot{}, 3);
  CHECK(tree.nodes.size() == 3);
  CHECK(tree.edges.empty());
  CHECK(tree.retained_count() == 3);
  CHECK(tree.leaves() == std::vector<std::string>{"1:0", "1:1", "1:2"});
}

TEST_CASE("DOT rendering of a two-class tree") {
  const auto tree = extract_tree(two_class({0.7, 0.3}, {0.4, 0.6}), 2);
  const std::string table = "<TABLE BORDER=\"0\" CELLBORDER=\"1\" CELLSPACING=\"0\">";
  const std::string expected =
      "digraph neural_tree {\n"
      "  rankdir=BT;\n"
      "  node [shape=plaintext, fontname=\"Helvetica\"];\n"
      "  \"1:0\" [label=<" + table + "<TR><TD>block 1:0</TD></TR></TABLE>>];\n"
      "  \"2:0\" [label=<" + table + "<TR><TD COLSPAN=\"1\">block 2:0</TD></TR><TR><TD BGCOLOR=\"red\">1.000</TD></TR></TABLE>>];\n"
      "  \"2:1\" [label=<" + table + "<TR><TD COLSPAN=\"1\">block 2:1</TD></TR><TR><TD BGCOLOR=\"red\">1.000</TD></TR></TABLE>>];\n"
      "  \"3:0\" [label=<" + table + "<TR><TD COLSPAN=\"2\">class 0</TD></TR><TR><TD BGCOLOR=\"red\">0.700</TD><TD BGCOLOR=\"blue\">0.300</TD></TR></TABLE>>];\n"
      "  \"3:1\" [label=<" + table + "<TR><TD COLSPAN=\"2\">class 1</TD></TR><TR><TD BGCOLOR=\"blue\">0.400</TD><TD BGCOLOR=\"red\">0.600</TD></TR></TABLE>>];\n"
      "  \"2:0\" -> \"1:0\";\n"
      "  \"2:1\" -> \"1:0\";\n"
      "  \"3:0\" -> \"2:0\";\n"
      "  \"3:1\" -> \"2:1\";\n"
      "}\n";
  CHECK(to_dot(tree) == expected);
}

TEST_CASE("DOT declares exactly the retained nodes") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto snap = random_snapshot({3, 4, 5}, rng, 3.0);
    const auto tree = extract_tree(snap, 5);
    const std::string dot = to_dot(tree);
    std::size_t declared = 0;
    for (std::size_t p = dot.find("[label="); p != std::string::npos; p = dot.find("[label=", p + 1)) ++declared;
    CHECK(declared == std::size_t(tree.retained_count()));
    std::size_t arrows = 0;
    for (std::size_t p = dot.find("->"); p != std::string::npos; p = dot.find("->", p + 1)) ++arrows;
    CHECK(arrows == tree.edges.size());
  }
}

TEST_CASE("tree JSON round trip is a fixed point") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto tree = extract_tree(random_snapshot({2, 3, 4}, rng, 2.0), 4);
    const std::string text = to_json(tree);
    const auto back = tree_from_json(text);
    CHECK(to_json(back) == text);
    CHECK(to_dot(back) == to_dot(tree));
  }
  CHECK_THROWS_AS(tree_from_json("{\"nodes\": 3}"), ValidationError);
  CHECK_THROWS_AS(tree_from_json(R"({"num_classes":1,"is_tree":true,"nodes":[],"edges":[{"child":"a","parent":"b"}]})"),
                  ValidationError);
}

TEST_CASE("entropy falls as gates sharpen") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto snap = random_snapshot({4, 4, 3}, rng, 1.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double T : {4.0, 2.0, 1.0, 0.5, 0.1}) {
      AttentionSnapshot s = snap;
      for (auto& m : s.modules) {
        const Vector<double> z = Eigen::Map<const Vector<double>>(m.logits.data(), Eigen::Index(m.logits.size()));
        const Vector<double> a = attention_weights(AttentionModule<double>{z, T});
        m.weights.assign(a.data(), a.data() + a.size());
      }
      const auto r = entropy_report(s);
      CHECK(r.total_entropy <= prev + 1e-12);
      CHECK(r.mean_entropy == doctest::Approx(r.total_entropy / double(s.modules.size())));
      prev = r.total_entropy;
      // Hardening ignores temperature, so the retained set is unchanged.
      CHECK(extract_tree(s, 3).retained() == extract_tree(snap, 3).retained());
    }
  }
}

TEST_CASE("inconsistent snapshots name the offending module") {
  auto msg = [](const AttentionSnapshot& s, int K) -> std::string {
    try {
      extract_tree(s, K);
    } catch (const ValidationError& e) {
      return e.what();
    }
    return "";
  };
  auto off = two_class({0.7, 0.3}, {0.4, 0.4});
  CHECK(msg(off, 2).find("3:1") != std::string::npos);

  auto missing = two_class({0.7, 0.3}, {0.4, 0.6});
  missing.modules[3].sources[1] = "2:7";
  CHECK(msg(missing, 2).find("3:1") != std::string::npos);

  auto backwards = two_class({0.7, 0.3}, {0.4, 0.6});
  backwards.modules[1].sources[0] = "3:0";
  CHECK(msg(backwards, 2).find("2:1") != std::string::npos);

  auto dup = two_class({0.7, 0.3}, {0.4, 0.6});
  dup.modules.push_back(dup.modules[0]);
  CHECK(msg(dup, 2).find("2:0") != std::string::npos);

  CHECK(msg(two_class({0.7, 0.3}, {0.4, 0.6}), 3).find("expected 3") != std::string::npos);
  CHECK_THROWS_AS(extract_tree(AttentionSnapshot{}, 0), ValidationError);
}
