#pragma once

#include <string>
#include <utility>
#include <vector>

#include "snt/labelmap.hpp"
#include "snt/sha256.hpp"

namespace snt {

// Flat category labels. Index is the label id; entry 0 is the background.
struct LabelSet {
  std::vector<std::string> names;
  std::vector<std::pair<int, int>> flip_pairs;  // lateral (left,right) id pairs
  int background_label = 0;

  int size() const { return static_cast<int>(names.size()); }
  int id_of(const std::string& name) const;
};

struct TreeNode {
  std::string node_id;
  int level = 0;  // root is 0; children of the root are level 1
  bool is_leaf = false;
  std::vector<TreeNode> children;  // virtual nodes only
  std::vector<int> leaf_labels;    // leaf nodes only

  // All label ids reachable from this node, ascending.
  std::vector<int> subtree_labels() const;
};

struct TreeSpec {
  LabelSet label_set;
  TreeNode root;
  int height = 0;  // max level over leaves
};

// Per-node supervision target. Channels 0..I-2 index the node's children (or
// the leaf's labels) in declaration order; channel I-1 is the node-local
// "other" class. Ignore pixels stay kIgnoreLabel.
struct NodeTarget {
  std::string node_id;
  int channels = 0;
  LabelMap target;
};

TreeSpec parse_hierarchy(const std::string& json_text);
TreeSpec parse_hierarchy_file(const std::string& path);

// Returns every invariant violation found (empty means the spec is valid).
std::vector<std::string> validate(const TreeSpec& spec);

// Canonical JSON form; parse(serialize(spec)) is a fixed point.
std::string serialize_hierarchy(const TreeSpec& spec);

Sha256Digest spec_hash(const TreeSpec& spec);

NodeTarget routing_target(const LabelMap& labels, const TreeNode& node, const TreeSpec& spec);
NodeTarget leaf_target(const LabelMap& labels, const TreeNode& leaf, const TreeSpec& spec);

// (leaf node_id, leaf-local channel) for every global label id in order.
std::vector<std::pair<std::string, int>> final_channel_order(const TreeSpec& spec);

// Horizontal mirror plus lateral label swap.
LabelMap flip_labels(const LabelMap& labels, const TreeSpec& spec);

// Cuts the tree at the given height: virtual nodes at that level become
// leaves absorbing their subtree's labels. height must be in [1, spec.height].
TreeSpec truncate_to_height(const TreeSpec& spec, int height);

// Virtual nodes in pre-order (root first) and leaves in pre-order.
std::vector<const TreeNode*> virtual_nodes(const TreeSpec& spec);
std::vector<const TreeNode*> leaf_nodes(const TreeSpec& spec);
const TreeNode* find_node(const TreeSpec& spec, const std::string& node_id);

}  // namespace snt
