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

#include "kdx/tree.hpp"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <json.hpp>
#include <set>
#include <sstream>

#include "kdx/losses.hpp"

namespace kdx {

using nlohmann::json;

const TreeNode* NeuralTree::find(const std::string& id) const {
  for (const auto& n : nodes)
    if (n.id == id) return &n;
  return nullptr;
}

std::vector<std::string> NeuralTree::retained() const {
  std::vector<std::string> out;
  for (const auto& n : nodes)
    if (n.reachable) out.push_back(n.id);
  return out;
}

int NeuralTree::retained_count() const {
  return int(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.reachable; }));
}

std::vector<std::string> NeuralTree::leaves() const {
  std::vector<std::pair<int, std::string>> l;
  for (const auto& n : nodes)
    if (n.leaf) l.emplace_back(n.block, n.id);
  std::sort(l.begin(), l.end());
  std::vector<std::string> out;
  for (auto& [b, id] : l) out.push_back(id);
  return out;
}

namespace {

bool parse_id(const std::string& id, int& stage, int& block) {
  const auto colon = id.find(':');
  if (colon == std::string::npos) return false;
  try {
    std::size_t a = 0, b = 0;
    stage = std::stoi(id.substr(0, colon), &a);
    block = std::stoi(id.substr(colon + 1), &b);
    return a == colon && b == id.size() - colon - 1;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

NeuralTree extract_tree(const AttentionSnapshot& snapshot, int num_classes) {
  if (num_classes < 1) throw ValidationError("extract_tree: need at least one class");
  NeuralTree tree;
  tree.num_classes = num_classes;

  if (snapshot.modules.empty()) {
    for (int k = 0; k < num_classes; ++k) {
      TreeNode n;
      n.id = node_id(1, k);
      n.stage = 1;
      n.block = k;
      n.leaf = true;
      n.reachable = true;
      tree.nodes.push_back(std::move(n));
    }
    tree.is_tree = false;
    return tree;
  }

  int head_stage = 0, min_stage = snapshot.modules.front().stage;
  for (const auto& m : snapshot.modules) {
    head_stage = std::max(head_stage, m.stage);
    min_stage = std::min(min_stage, m.stage);
  }

  std::map<std::string, TreeNode> by_id;
  for (const auto& m : snapshot.modules) {
    const std::string where = "module " + m.id();
    try {
      AttentionSnapshot one{{m}};
      one.validate();
    } catch (const InvariantViolation& e) {
      throw ValidationError(std::string("extract_tree: ") + e.what());
    }
    if (by_id.count(m.id())) throw ValidationError("extract_tree: duplicate " + where);
    TreeNode n;
    n.id = m.id();
    n.stage = m.stage;
    n.block = m.block;
    n.leaf = m.stage == head_stage;
    n.sources = m.sources;
    n.weights = m.weights;
    n.selected = argmax_lowest<double>(m.weight_vector());
    by_id.emplace(n.id, std::move(n));
  }
  int heads = 0;
  for (const auto& [id, n] : by_id)
    if (n.leaf) {
      if (n.block < 0 || n.block >= num_classes)
        throw ValidationError("extract_tree: head module " + id + " is outside the " + std::to_string(num_classes) +
                              " classes");
      ++heads;
    }
  if (heads != num_classes)
    throw ValidationError("extract_tree: snapshot has " + std::to_string(heads) + " head modules at stage " +
                          std::to_string(head_stage) + ", expected " + std::to_string(num_classes));

  // Sources below the first gated stage are input roots.
  std::map<std::string, TreeNode> roots;
  for (const auto& [id, n] : by_id)
    for (const auto& src : n.sources) {
      int s = 0, b = 0;
      if (!parse_id(src, s, b)) throw ValidationError("extract_tree: module " + id + " has malformed source '" + src + "'");
      if (s >= n.stage)
        throw ValidationError("extract_tree: module " + id + " reads from a later or equal stage '" + src + "'");
      if (by_id.count(src)) continue;
      if (s >= min_stage)
        throw ValidationError("extract_tree: module " + id + " references missing source '" + src + "'");
      TreeNode r;
      r.id = src;
      r.stage = s;
      r.block = b;
      roots.emplace(src, std::move(r));
    }
  by_id.merge(roots);

  std::deque<std::string> queue;
  for (auto& [id, n] : by_id)
    if (n.leaf) {
      n.reachable = true;
      queue.push_back(id);
    }
  while (!queue.empty()) {
    TreeNode& n = by_id.at(queue.front());
    queue.pop_front();
    if (!n.gated()) continue;
    const std::string& parent = n.sources[std::size_t(n.selected)];
    tree.edges.push_back({n.id, parent});
    TreeNode& p = by_id.at(parent);
    if (!p.reachable) {
      p.reachable = true;
      queue.push_back(parent);
    }
  }

  for (auto& [id, n] : by_id) tree.nodes.push_back(std::move(n));
  std::sort(tree.nodes.begin(), tree.nodes.end(), [](const TreeNode& a, const TreeNode& b) {
    return std::tie(a.stage, a.block) < std::tie(b.stage, b.block);
  });
  std::sort(tree.edges.begin(), tree.edges.end(), [](const TreeEdge& a, const TreeEdge& b) {
    return std::tie(a.child, a.parent) < std::tie(b.child, b.parent);
  });
  int retained_roots = 0;
  for (const auto& n : tree.nodes)
    if (n.reachable && !n.gated()) ++retained_roots;
  tree.is_tree = retained_roots == 1;
  return tree;
}

EntropyReport entropy_report(const AttentionSnapshot& snapshot) {
  int head_stage = 0, heads = 0;
  for (const auto& m : snapshot.modules) head_stage = std::max(head_stage, m.stage);
  for (const auto& m : snapshot.modules)
    if (m.stage == head_stage) ++heads;
  return entropy_report(snapshot, std::max(heads, 1));
}

EntropyReport entropy_report(const AttentionSnapshot& snapshot, int num_classes) {
  EntropyReport r;
  for (const auto& m : snapshot.modules) {
    const double h = entropy<double>(m.weight_vector());
    r.per_module.emplace_back(m.id(), h);
    r.total_entropy += h;
  }
  r.mean_entropy = r.per_module.empty() ? 0.0 : r.total_entropy / double(r.per_module.size());
  const NeuralTree tree = extract_tree(snapshot, num_classes);
  r.retained_blocks = tree.retained_count();
  r.total_blocks = int(tree.nodes.size());
  r.is_tree = tree.is_tree;
  for (const auto& leaf : tree.leaves()) {
    const TreeNode* n = tree.find(leaf);
    const std::string branch = n->gated() ? n->sources[std::size_t(n->selected)] : n->id;
    r.branches[branch].push_back(n->block);
    r.class_branch.push_back(branch);
  }
  return r;
}

namespace {

std::string fmt_weight(double w) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", w);
  return buf;
}

}  // namespace

std::string to_dot(const NeuralTree& tree) {
  std::ostringstream os;
  os << "digraph neural_tree {\n";
  os << "  rankdir=BT;\n";
  os << "  node [shape=plaintext, fontname=\"Helvetica\"];\n";
  for (const auto& n : tree.nodes) {
    if (!n.reachable) continue;
    const std::string title = n.leaf ? "class " + std::to_string(n.block) : "block " + n.id;
    os << "  \"" << n.id << "\" [label=<<TABLE BORDER=\"0\" CELLBORDER=\"1\" CELLSPACING=\"0\">";
    if (n.gated()) {
      const int hi = int(std::max_element(n.weights.begin(), n.weights.end()) - n.weights.begin());
      const int lo = int(std::min_element(n.weights.begin(), n.weights.end()) - n.weights.begin());
      os << "<TR><TD COLSPAN=\"" << n.weights.size() << "\">" << title << "</TD></TR><TR>";
      for (std::size_t i = 0; i < n.weights.size(); ++i) {
        os << "<TD";
        if (int(i) == hi)
          os << " BGCOLOR=\"red\"";
        else if (int(i) == lo)
          os << " BGCOLOR=\"blue\"";
        os << ">" << fmt_weight(n.weights[i]) << "</TD>";
      }
      os << "</TR>";
    } else {
      os << "<TR><TD>" << title << "</TD></TR>";
    }
    os << "</TABLE>>];\n";
  }
  for (const auto& e : tree.edges) os << "  \"" << e.child << "\" -> \"" << e.parent << "\";\n";
  os << "}\n";
  return os.str();
}

std::string to_json(const NeuralTree& tree) {
  json nodes = json::array();
  for (const auto& n : tree.nodes)
    nodes.push_back({{"id", n.id},
                     {"stage", n.stage},
                     {"block", n.block},
                     {"leaf", n.leaf},
                     {"reachable", n.reachable},
                     {"sources", n.sources},
                     {"weights", n.weights},
                     {"selected", n.selected}});
  json edges = json::array();
  for (const auto& e : tree.edges) edges.push_back({{"child", e.child}, {"parent", e.parent}});
  json doc = {{"num_classes", tree.num_classes}, {"is_tree", tree.is_tree}, {"nodes", nodes}, {"edges", edges}};
  return doc.dump(1);
}

NeuralTree tree_from_json(const std::string& text) {
  NeuralTree tree;
  try {
    const json doc = json::parse(text);
    tree.num_classes = doc.at("num_classes").get<int>();
    tree.is_tree = doc.at("is_tree").get<bool>();
    for (const auto& j : doc.at("nodes")) {
      TreeNode n;
      n.id = j.at("id").get<std::string>();
      n.stage = j.at("stage").get<int>();
      n.block = j.at("block").get<int>();
      n.leaf = j.at("leaf").get<bool>();
      n.reachable = j.at("reachable").get<bool>();
      n.sources = j.at("sources").get<std::vector<std::string>>();
      n.weights = j.at("weights").get<std::vector<double>>();
      n.selected = j.at("selected").get<int>();
      tree.nodes.push_back(std::move(n));
    }
    for (const auto& j : doc.at("edges"))
      tree.edges.push_back({j.at("child").get<std::string>(), j.at("parent").get<std::string>()});
  } catch (const json::exception& e) {
    throw ValidationError(std::string("tree JSON: ") + e.what());
  }
  std::set<std::string> ids;
  for (const auto& n : tree.nodes) ids.insert(n.id);
  for (const auto& e : tree.edges)
    if (!ids.count(e.child) || !ids.count(e.parent)) throw ValidationError("tree JSON: edge endpoint missing");
  return tree;
}

}  // namespace kdx
