#include "snt/hierarchy.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace snt {

using json = nlohmann::json;

int LabelSet::id_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

std::vector<int> TreeNode::subtree_labels() const {
  std::vector<int> out;
  if (is_leaf) {
    out = leaf_labels;
  } else {
    for (const TreeNode& c : children) {
      const auto sub = c.subtree_labels();
      out.insert(out.end(), sub.begin(), sub.end());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

TreeNode parse_node(const json& j, const LabelSet& labels, int level, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": hierarchy node must be an object");
  if (!j.contains("name") || !j.at("name").is_string()) {
    throw ConfigError(path + ": node requires a string \"name\"");
  }
  TreeNode node;
  node.node_id = j.at("name").get<std::string>();
  node.level = level;

  const bool has_children = j.contains("children");
  const bool has_labels = j.contains("labels");
  if (has_children == has_labels) {
    throw ConfigError(path + " (" + node.node_id +
                      "): node must have exactly one of \"children\" or \"labels\"");
  }
  if (has_children) {
    const json& ch = j.at("children");
    if (!ch.is_array() || ch.empty()) {
      throw ConfigError(path + " (" + node.node_id + "): \"children\" must be a non-empty array");
    }
    for (std::size_t i = 0; i < ch.size(); ++i) {
      node.children.push_back(
          parse_node(ch[i], labels, level + 1, path + ".children[" + std::to_string(i) + "]"));
    }
  } else {
    node.is_leaf = true;
    const json& ls = j.at("labels");
    if (!ls.is_array() || ls.empty()) {
      throw ConfigError(path + " (" + node.node_id + "): leaf \"labels\" must be a non-empty array");
    }
    for (const json& l : ls) {
      if (!l.is_string()) throw ConfigError(path + ": leaf labels must be strings");
      const int id = labels.id_of(l.get<std::string>());
      if (id < 0) {
        throw ConfigError(path + " (" + node.node_id + "): unknown label name \"" +
                          l.get<std::string>() + "\"");
      }
      node.leaf_labels.push_back(id);
    }
  }
  return node;
}

void collect_leaves(const TreeNode& n, std::vector<const TreeNode*>& out) {
  if (n.is_leaf) {
    out.push_back(&n);
    return;
  }
  for (const TreeNode& c : n.children) collect_leaves(c, out);
}

void collect_virtual(const TreeNode& n, std::vector<const TreeNode*>& out) {
  if (n.is_leaf) return;
  out.push_back(&n);
  for (const TreeNode& c : n.children) collect_virtual(c, out);
}

int max_leaf_level(const TreeNode& n) {
  if (n.is_leaf) return n.level;
  int m = 0;
  for (const TreeNode& c : n.children) m = std::max(m, max_leaf_level(c));
  return m;
}

json node_to_json(const TreeNode& n, const LabelSet& labels) {
  json j;
  j["name"] = n.node_id;
  if (n.is_leaf) {
    json arr = json::array();
    for (int id : n.leaf_labels) arr.push_back(labels.names[id]);
    j["labels"] = arr;
  } else {
    json arr = json::array();
    for (const TreeNode& c : n.children) arr.push_back(node_to_json(c, labels));
    j["children"] = arr;
  }
  return j;
}

}  // namespace

TreeSpec parse_hierarchy(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed hierarchy document: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("hierarchy document must be a JSON object");

  TreeSpec spec;
  if (!doc.contains("labels") || !doc.at("labels").is_array() || doc.at("labels").empty()) {
    throw ConfigError("\"labels\" must be a non-empty array of strings");
  }
  for (const json& l : doc.at("labels")) {
    if (!l.is_string()) throw ConfigError("\"labels\" entries must be strings");
    spec.label_set.names.push_back(l.get<std::string>());
  }
  {
    std::set<std::string> seen;
    for (const auto& n : spec.label_set.names) {
      if (!seen.insert(n).second) throw ConfigError("duplicate label name \"" + n + "\"");
    }
  }
  spec.label_set.background_label = 0;

  if (doc.contains("flip_pairs")) {
    if (!doc.at("flip_pairs").is_array()) throw ConfigError("\"flip_pairs\" must be an array");
    for (const json& p : doc.at("flip_pairs")) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_string() || !p[1].is_string()) {
        throw ConfigError("flip_pairs entries must be [name,name] arrays");
      }
      const int a = spec.label_set.id_of(p[0].get<std::string>());
      const int b = spec.label_set.id_of(p[1].get<std::string>());
      if (a < 0 || b < 0) {
        throw ConfigError("flip_pairs: unknown label in pair [" + p[0].get<std::string>() + "," +
                          p[1].get<std::string>() + "]");
      }
      if (a == b) throw ConfigError("flip_pairs: pair must name two distinct labels");
      spec.label_set.flip_pairs.emplace_back(a, b);
    }
  }

  if (!doc.contains("tree")) throw ConfigError("hierarchy document requires a \"tree\" object");
  spec.root = parse_node(doc.at("tree"), spec.label_set, 0, "tree");
  if (spec.root.is_leaf) throw ConfigError("tree: root must be a virtual node with children");
  spec.height = max_leaf_level(spec.root);

  const auto violations = validate(spec);
  if (!violations.empty()) {
    std::ostringstream os;
    os << "invalid hierarchy:";
    for (const auto& v : violations) os << "\n  - " << v;
    throw ConfigError(os.str());
  }
  return spec;
}

TreeSpec parse_hierarchy_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open hierarchy file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_hierarchy(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::vector<std::string> validate(const TreeSpec& spec) {
  std::vector<std::string> out;
  const int n_labels = spec.label_set.size();

  if (n_labels == 0) out.push_back("empty label set");
  {
    std::set<std::string> seen;
    for (const auto& n : spec.label_set.names) {
      if (!seen.insert(n).second) out.push_back("duplicate label name \"" + n + "\"");
    }
  }
  for (const auto& [a, b] : spec.label_set.flip_pairs) {
    if (a < 0 || a >= n_labels || b < 0 || b >= n_labels) {
      out.push_back("flip pair references label id outside the label set");
    } else if (a == b) {
      out.push_back("flip pair is reflexive");
    }
  }

  // Leaf coverage: every label id in exactly one leaf.
  std::vector<int> owner(n_labels, -1);
  std::vector<const TreeNode*> leaves;
  collect_leaves(spec.root, leaves);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const TreeNode* leaf = leaves[li];
    if (leaf->leaf_labels.empty()) out.push_back("empty leaf \"" + leaf->node_id + "\"");
    for (int id : leaf->leaf_labels) {
      if (id < 0 || id >= n_labels) {
        out.push_back("leaf \"" + leaf->node_id + "\" references label id " + std::to_string(id) +
                      " outside the label set");
        continue;
      }
      if (owner[id] >= 0) {
        out.push_back("label \"" + spec.label_set.names[id] + "\" assigned to more than one leaf");
      }
      owner[id] = static_cast<int>(li);
    }
  }
  for (int id = 0; id < n_labels; ++id) {
    if (owner[id] < 0) {
      out.push_back("label unassigned: \"" + spec.label_set.names[id] + "\"");
    }
  }

  // Node structure: unique ids, level continuity, virtual arity.
  std::set<std::string> node_ids;
  std::function<void(const TreeNode&)> walk = [&](const TreeNode& n) {
    if (!node_ids.insert(n.node_id).second) {
      out.push_back("duplicate node id \"" + n.node_id + "\"");
    }
    if (!n.is_leaf) {
      if (n.children.size() < 2) {
        out.push_back("virtual node \"" + n.node_id + "\" has fewer than 2 children");
      }
      for (const TreeNode& c : n.children) {
        if (c.level != n.level + 1) {
          out.push_back("level discontinuity at \"" + c.node_id + "\": expected " +
                        std::to_string(n.level + 1) + ", got " + std::to_string(c.level));
        }
        walk(c);
      }
    }
  };
  walk(spec.root);

  if (spec.height < 1) out.push_back("tree height must be >= 1");
  return out;
}

std::string serialize_hierarchy(const TreeSpec& spec) {
  json doc;
  doc["labels"] = spec.label_set.names;
  json pairs = json::array();
  for (const auto& [a, b] : spec.label_set.flip_pairs) {
    pairs.push_back(json::array({spec.label_set.names[a], spec.label_set.names[b]}));
  }
  doc["flip_pairs"] = pairs;
  doc["tree"] = node_to_json(spec.root, spec.label_set);
  return doc.dump(2);
}

Sha256Digest spec_hash(const TreeSpec& spec) { return sha256(serialize_hierarchy(spec)); }

NodeTarget routing_target(const LabelMap& labels, const TreeNode& node, const TreeSpec& spec) {
  if (node.is_leaf) throw ConfigError("routing_target: \"" + node.node_id + "\" is a leaf");
  const int n_labels = spec.label_set.size();
  const int other = static_cast<int>(node.children.size());

  std::vector<int> channel_of(n_labels, other);
  for (std::size_t i = 0; i < node.children.size(); ++i) {
    for (int id : node.children[i].subtree_labels()) channel_of[id] = static_cast<int>(i);
  }

  NodeTarget t;
  t.node_id = node.node_id;
  t.channels = other + 1;
  t.target = LabelMap(labels.h, labels.w);
  for (std::size_t i = 0; i < labels.v.size(); ++i) {
    const std::int32_t lab = labels.v[i];
    if (lab == kIgnoreLabel) {
      t.target.v[i] = kIgnoreLabel;
      continue;
    }
    if (lab < 0 || lab >= n_labels) {
      throw DataError("routing_target: label id " + std::to_string(lab) +
                      " outside the label set (size " + std::to_string(n_labels) + ")");
    }
    t.target.v[i] = channel_of[lab];
  }
  return t;
}

NodeTarget leaf_target(const LabelMap& labels, const TreeNode& leaf, const TreeSpec& spec) {
  if (!leaf.is_leaf) throw ConfigError("leaf_target: \"" + leaf.node_id + "\" is not a leaf");
  const int n_labels = spec.label_set.size();
  const int other = static_cast<int>(leaf.leaf_labels.size());

  std::vector<int> channel_of(n_labels, other);
  for (std::size_t i = 0; i < leaf.leaf_labels.size(); ++i) {
    channel_of[leaf.leaf_labels[i]] = static_cast<int>(i);
  }

  NodeTarget t;
  t.node_id = leaf.node_id;
  t.channels = other + 1;
  t.target = LabelMap(labels.h, labels.w);
  for (std::size_t i = 0; i < labels.v.size(); ++i) {
    const std::int32_t lab = labels.v[i];
    if (lab == kIgnoreLabel) {
      t.target.v[i] = kIgnoreLabel;
      continue;
    }
    if (lab < 0 || lab >= n_labels) {
      throw DataError("leaf_target: label id " + std::to_string(lab) + " outside the label set");
    }
    t.target.v[i] = channel_of[lab];
  }
  return t;
}

std::vector<std::pair<std::string, int>> final_channel_order(const TreeSpec& spec) {
  const int n_labels = spec.label_set.size();
  std::vector<std::pair<std::string, int>> order(n_labels, {"", -1});
  std::vector<const TreeNode*> leaves;
  collect_leaves(spec.root, leaves);
  for (const TreeNode* leaf : leaves) {
    for (std::size_t c = 0; c < leaf->leaf_labels.size(); ++c) {
      order[leaf->leaf_labels[c]] = {leaf->node_id, static_cast<int>(c)};
    }
  }
  for (int id = 0; id < n_labels; ++id) {
    if (order[id].second < 0) {
      throw ConfigError("final_channel_order: label \"" + spec.label_set.names[id] +
                        "\" is not covered by any leaf");
    }
  }
  return order;
}

LabelMap flip_labels(const LabelMap& labels, const TreeSpec& spec) {
  std::vector<std::int32_t> swap(spec.label_set.size());
  for (std::size_t i = 0; i < swap.size(); ++i) swap[i] = static_cast<std::int32_t>(i);
  for (const auto& [a, b] : spec.label_set.flip_pairs) {
    swap[a] = b;
    swap[b] = a;
  }
  LabelMap out(labels.h, labels.w);
  for (int r = 0; r < labels.h; ++r) {
    for (int c = 0; c < labels.w; ++c) {
      const std::int32_t lab = labels.at(r, labels.w - 1 - c);
      out.at(r, c) = (lab == kIgnoreLabel) ? kIgnoreLabel : swap[lab];
    }
  }
  return out;
}

TreeSpec truncate_to_height(const TreeSpec& spec, int height) {
  if (height < 1 || height > spec.height) {
    throw ConfigError("truncate_to_height: height " + std::to_string(height) +
                      " outside [1," + std::to_string(spec.height) + "]");
  }
  TreeSpec out;
  out.label_set = spec.label_set;
  std::function<TreeNode(const TreeNode&)> cut = [&](const TreeNode& n) {
    if (n.is_leaf) return n;
    if (n.level == height) {
      TreeNode leaf;
      leaf.node_id = n.node_id;
      leaf.level = n.level;
      leaf.is_leaf = true;
      leaf.leaf_labels = n.subtree_labels();
      return leaf;
    }
    TreeNode v = n;
    v.children.clear();
    for (const TreeNode& c : n.children) v.children.push_back(cut(c));
    return v;
  };
  out.root = cut(spec.root);
  out.height = max_leaf_level(out.root);
  return out;
}

std::vector<const TreeNode*> virtual_nodes(const TreeSpec& spec) {
  std::vector<const TreeNode*> out;
  collect_virtual(spec.root, out);
  return out;
}

std::vector<const TreeNode*> leaf_nodes(const TreeSpec& spec) {
  std::vector<const TreeNode*> out;
  collect_leaves(spec.root, out);
  return out;
}

const TreeNode* find_node(const TreeSpec& spec, const std::string& node_id) {
  const TreeNode* found = nullptr;
  std::function<void(const TreeNode&)> walk = [&](const TreeNode& n) {
    if (n.node_id == node_id) found = &n;
    for (const TreeNode& c : n.children) walk(c);
  };
  walk(spec.root);
  return found;
}

}  // namespace snt
