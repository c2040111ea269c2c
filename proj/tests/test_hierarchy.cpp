#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "snt/hierarchy.hpp"
#include "snt/rng.hpp"

using namespace snt;

namespace {

TreeSpec load(const std::string& name) {
  return parse_hierarchy_file(std::string(SNT_HIERARCHY_DIR) + "/" + name);
}

LabelMap random_map(int h, int w, int n_labels, Rng& rng) {
  LabelMap m(h, w);
  for (auto& v : m.v) v = rng.uniform_int(0, n_labels - 1);
  return m;
}

}  // namespace

TEST_CASE("parse: Pascal-Person-Part config has height 3 and the seven leaves") {
  TreeSpec spec = load("pascal_person_part.json");
  CHECK(spec.height == 3);
  CHECK(spec.label_set.size() == 7);
  auto leaves = leaf_nodes(spec);
  REQUIRE(leaves.size() == 7);
  std::set<std::string> leaf_labels;
  for (const TreeNode* l : leaves) {
    REQUIRE(l->leaf_labels.size() == 1);
    leaf_labels.insert(spec.label_set.names[l->leaf_labels[0]]);
  }
  CHECK(leaf_labels == std::set<std::string>{"Background", "Head", "Torso", "Upper-arms",
                                             "Lower-arms", "Upper-legs", "Lower-legs"});
  CHECK(virtual_nodes(spec).size() == 3);  // root + two internal routing nodes
}

TEST_CASE("parse: LIP config has 20 labels, 6 leaves, height 3") {
  TreeSpec spec = load("lip.json");
  CHECK(spec.label_set.size() == 20);
  CHECK(leaf_nodes(spec).size() == 6);
  CHECK(spec.height == 3);
}

TEST_CASE("parse: all shipped configs are valid") {
  for (const char* name :
       {"lip.json", "cihp.json", "pascal_person_part.json", "toy7.json", "mhpv2.json"}) {
    TreeSpec spec = load(name);
    CHECK(validate(spec).empty());
  }
  CHECK(load("mhpv2.json").height == 5);
  CHECK(load("mhpv2.json").label_set.size() == 59);
}

TEST_CASE("parse: a label listed in two leaves is rejected") {
  const std::string doc = R"({
    "labels": ["bg", "a", "b"],
    "tree": {"name": "root", "children": [
      {"name": "l0", "labels": ["bg", "a"]},
      {"name": "l1", "labels": ["a", "b"]}
    ]}
  })";
  CHECK_THROWS_WITH_AS(parse_hierarchy(doc), doctest::Contains("more than one leaf"), ConfigError);
}

TEST_CASE("parse: unknown label name is rejected with field context") {
  const std::string doc = R"({
    "labels": ["bg", "a"],
    "tree": {"name": "root", "children": [
      {"name": "l0", "labels": ["bg"]},
      {"name": "l1", "labels": ["axe"]}
    ]}
  })";
  CHECK_THROWS_WITH_AS(parse_hierarchy(doc), doctest::Contains("children[1]"), ConfigError);
}

TEST_CASE("validate: missing label and level discontinuity are reported together") {
  TreeSpec spec = load("lip.json");
  // Hand-damage the parsed spec: drop Face from the head leaf, break a level.
  TreeNode& human = spec.root.children[1];
  TreeNode& head = human.children[0];
  head.leaf_labels.erase(std::find(head.leaf_labels.begin(), head.leaf_labels.end(),
                                   spec.label_set.id_of("Face")));
  human.children[1].level = 5;
  auto violations = validate(spec);
  REQUIRE(!violations.empty());
  bool saw_unassigned = false, saw_level = false;
  for (const auto& v : violations) {
    if (v.find("label unassigned") != std::string::npos && v.find("Face") != std::string::npos) {
      saw_unassigned = true;
    }
    if (v.find("level discontinuity") != std::string::npos) saw_level = true;
  }
  CHECK(saw_unassigned);
  CHECK(saw_level);
}

TEST_CASE("routing_target: root covers every label, so no pixel maps to other") {
  TreeSpec spec = load("lip.json");
  Rng rng(3);
  LabelMap labels = random_map(8, 8, 20, rng);
  NodeTarget t = routing_target(labels, spec.root, spec);
  CHECK(t.channels == 3);  // two children + other
  for (auto v : t.target.v) CHECK(v < 2);
}

TEST_CASE("routing_target: membership at the human node sends background to other") {
  TreeSpec spec = load("lip.json");
  const TreeNode* human = find_node(spec, "human");
  REQUIRE(human != nullptr);
  LabelMap labels(2, 2);
  labels.at(0, 0) = spec.label_set.id_of("Hair");
  labels.at(0, 1) = spec.label_set.id_of("Face");
  labels.at(1, 0) = spec.label_set.id_of("Coat");
  labels.at(1, 1) = spec.label_set.id_of("Background");
  NodeTarget t = routing_target(labels, *human, spec);
  CHECK(t.channels == 3);
  CHECK(t.target.at(0, 0) == 0);  // head child
  CHECK(t.target.at(0, 1) == 0);
  CHECK(t.target.at(1, 0) == 1);  // body child
  CHECK(t.target.at(1, 1) == 2);  // other (background lives outside this subtree)
}

TEST_CASE("leaf_target: LIP head leaf indexes hair/face, routes coat/pants to other") {
  TreeSpec spec = load("lip.json");
  const TreeNode* head = find_node(spec, "head");
  REQUIRE(head != nullptr);
  LabelMap labels(2, 2);
  labels.at(0, 0) = spec.label_set.id_of("Hair");
  labels.at(0, 1) = spec.label_set.id_of("Face");
  labels.at(1, 0) = spec.label_set.id_of("Coat");
  labels.at(1, 1) = spec.label_set.id_of("Pants");
  NodeTarget t = leaf_target(labels, *head, spec);
  CHECK(t.channels == 5);         // Hat,Hair,Sunglasses,Face + other
  CHECK(t.target.at(0, 0) == 1);  // Hair
  CHECK(t.target.at(0, 1) == 3);  // Face
  CHECK(t.target.at(1, 0) == 4);  // other
  CHECK(t.target.at(1, 1) == 4);
}

TEST_CASE("leaf_target: shoes leaf puts left-shoe at channel 1, face at other") {
  TreeSpec spec = load("lip.json");
  const TreeNode* shoes = find_node(spec, "shoes");
  REQUIRE(shoes != nullptr);
  LabelMap labels(1, 2);
  labels.at(0, 0) = spec.label_set.id_of("Left-shoe");
  labels.at(0, 1) = spec.label_set.id_of("Face");
  NodeTarget t = leaf_target(labels, *shoes, spec);
  CHECK(t.target.at(0, 0) == 1);
  CHECK(t.target.at(0, 1) == 3);
}

TEST_CASE("leaf_target: per-leaf channel histograms match a direct recount") {
  TreeSpec spec = load("lip.json");
  Rng rng(17);
  LabelMap labels = random_map(16, 16, 20, rng);
  for (const TreeNode* leaf : leaf_nodes(spec)) {
    NodeTarget t = leaf_target(labels, *leaf, spec);
    std::vector<int> hist(t.channels, 0);
    for (auto v : t.target.v) ++hist[v];

    std::vector<int> ref(t.channels, 0);
    for (auto lab : labels.v) {
      int ch = t.channels - 1;
      for (std::size_t i = 0; i < leaf->leaf_labels.size(); ++i) {
        if (leaf->leaf_labels[i] == lab) ch = static_cast<int>(i);
      }
      ++ref[ch];
    }
    CHECK(hist == ref);
  }
}

TEST_CASE("routing_target: per-pixel child assignments partition the image") {
  TreeSpec spec = load("mhpv2.json");
  Rng rng(23);
  LabelMap labels = random_map(12, 12, spec.label_set.size(), rng);
  for (const TreeNode* node : virtual_nodes(spec)) {
    NodeTarget t = routing_target(labels, *node, spec);
    for (auto v : t.target.v) {
      CHECK(v >= 0);
      CHECK(v < t.channels);
    }
  }
}

TEST_CASE("consistency across levels: child assignment propagates to a leaf") {
  TreeSpec spec = load("lip.json");
  Rng rng(29);
  LabelMap labels = random_map(10, 10, 20, rng);
  // For every pixel assigned to child c at node n, some descendant leaf of c
  // must give it a non-other channel.
  for (const TreeNode* node : virtual_nodes(spec)) {
    NodeTarget t = routing_target(labels, *node, spec);
    for (std::size_t p = 0; p < labels.v.size(); ++p) {
      const int ch = t.target.v[p];
      if (ch >= static_cast<int>(node->children.size())) continue;  // other
      const TreeNode& child = node->children[ch];
      // Walk to the leaf that owns this pixel's label.
      bool found = false;
      std::function<void(const TreeNode&)> walk = [&](const TreeNode& n) {
        if (n.is_leaf) {
          for (std::size_t i = 0; i < n.leaf_labels.size(); ++i) {
            if (n.leaf_labels[i] == labels.v[p]) found = true;
          }
          return;
        }
        for (const TreeNode& c : n.children) walk(c);
      };
      walk(child);
      CHECK(found);
    }
  }
}

TEST_CASE("final_channel_order: PPP has 7 entries with background first") {
  TreeSpec spec = load("pascal_person_part.json");
  auto order = final_channel_order(spec);
  REQUIRE(order.size() == 7);
  CHECK(order[0].first == "background");
  CHECK(order[0].second == 0);
}

TEST_CASE("final_channel_order: LIP has 20 entries forming a bijection") {
  TreeSpec spec = load("lip.json");
  auto order = final_channel_order(spec);
  REQUIRE(order.size() == 20);
  std::set<std::pair<std::string, int>> unique(order.begin(), order.end());
  CHECK(unique.size() == 20);
  // Spot-check a few against the config: label 1 = Hat -> head leaf channel 0;
  // label 3 = Glove -> arms leaf channel 2.
  CHECK(order[1] == std::pair<std::string, int>{"head", 0});
  CHECK(order[3] == std::pair<std::string, int>{"arms", 2});
}

TEST_CASE("final_channel_order: permuting leaf declaration order changes nothing") {
  TreeSpec spec = load("lip.json");
  TreeSpec permuted = spec;
  TreeNode* body = nullptr;
  for (auto& c : permuted.root.children) {
    if (c.node_id == "human") {
      for (auto& cc : c.children) {
        if (cc.node_id == "body") body = &cc;
      }
    }
  }
  REQUIRE(body != nullptr);
  std::reverse(body->children.begin(), body->children.end());
  CHECK(final_channel_order(spec) == final_channel_order(permuted));
}

TEST_CASE("flip_labels: double flip is the identity") {
  TreeSpec spec = load("toy7.json");
  Rng rng(31);
  LabelMap labels = random_map(9, 13, 7, rng);
  CHECK(flip_labels(flip_labels(labels, spec), spec) == labels);
}

TEST_CASE("flip_labels: all-background map mirrors to itself") {
  TreeSpec spec = load("toy7.json");
  LabelMap labels(6, 6, 0);
  CHECK(flip_labels(labels, spec) == labels);
}

TEST_CASE("flip_labels: a left-shoe pixel lands as right-shoe at the mirrored column") {
  TreeSpec spec = load("lip.json");
  LabelMap labels(5, 8, 0);
  labels.at(2, 3) = spec.label_set.id_of("Left-shoe");
  LabelMap flipped = flip_labels(labels, spec);
  CHECK(flipped.at(2, 8 - 1 - 3) == spec.label_set.id_of("Right-shoe"));
}

TEST_CASE("serialize: parse -> serialize -> parse is a fixed point") {
  for (const char* name : {"lip.json", "pascal_person_part.json", "toy7.json", "mhpv2.json"}) {
    TreeSpec spec = load(name);
    const std::string text = serialize_hierarchy(spec);
    TreeSpec again = parse_hierarchy(text);
    CHECK(serialize_hierarchy(again) == text);
    CHECK(spec_hash(again) == spec_hash(spec));
  }
}

TEST_CASE("truncate_to_height: cut virtual nodes absorb their subtree labels") {
  TreeSpec spec = load("toy7.json");
  TreeSpec h1 = truncate_to_height(spec, 1);
  CHECK(h1.height == 1);
  auto leaves = leaf_nodes(h1);
  REQUIRE(leaves.size() == 2);
  CHECK(leaves[1]->node_id == "figure");
  CHECK(leaves[1]->leaf_labels == std::vector<int>{1, 2, 3, 4, 5, 6});
  CHECK(validate(h1).empty());
  CHECK(final_channel_order(h1).size() == 7);

  TreeSpec h2 = truncate_to_height(spec, 2);
  CHECK(h2.height == 2);
  CHECK(leaf_nodes(h2).size() == 3);
  CHECK(validate(h2).empty());
}
