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

#include <map>
#include <string>
#include <vector>

#include "kdx/attention.hpp"

namespace kdx {

struct TreeNode {
  std::string id;
  int stage = 0;
  int block = 0;
  bool leaf = false;       // class head
  bool reachable = false;  // retained after hardening
  std::vector<std::string> sources;
  std::vector<double> weights;  // attention histogram; empty for input roots
  int selected = -1;            // index into sources after hardening

  bool gated() const { return !weights.empty(); }
};

struct TreeEdge {
  std::string child;
  std::string parent;
  friend bool operator==(const TreeEdge&, const TreeEdge&) = default;
};

/// Routing graph of retained blocks after every gate is hardened. Every
/// retained gated node has exactly one retained parent.
struct NeuralTree {
  int num_classes = 0;
  std::vector<TreeNode> nodes;  // all blocks, sorted by (stage, block)
  std::vector<TreeEdge> edges;  // retained child -> selected parent
  bool is_tree = true;          // single retained root

  const TreeNode* find(const std::string& id) const;
  std::vector<std::string> retained() const;
  int retained_count() const;
  /// Ids of the K leaves in class order.
  std::vector<std::string> leaves() const;
};

/// Hardens every gate and walks back from the K heads (the modules of the
/// highest stage). Throws ValidationError naming the offending module when
/// the snapshot is inconsistent.
NeuralTree extract_tree(const AttentionSnapshot& snapshot, int num_classes);

struct EntropyReport {
  std::vector<std::pair<std::string, double>> per_module;
  double mean_entropy = 0.0;
  double total_entropy = 0.0;
  int retained_blocks = 0;
  int total_blocks = 0;
  bool is_tree = true;
  /// Per class: the retained block its head reads from.
  std::vector<std::string> class_branch;
  /// Branch id -> classes attached to it.
  std::map<std::string, std::vector<int>> branches;
};

/// Head count is inferred from the highest stage of the snapshot.
EntropyReport entropy_report(const AttentionSnapshot& snapshot);
EntropyReport entropy_report(const AttentionSnapshot& snapshot, int num_classes);

/// Graphviz digraph of retained nodes. Each gated node shows its weight
/// histogram with the maximum cell red and the minimum cell blue.
std::string to_dot(const NeuralTree& tree);
std::string to_json(const NeuralTree& tree);
NeuralTree tree_from_json(const std::string& text);

}  // namespace kdx
