#include <doctest.h>

#include <set>

#include "fixtures.hpp"
#include "forge/executor.hpp"
#include "forge/passes.hpp"

using namespace forge;
using nlohmann::json;

namespace {

std::vector<std::string> targets_of(const Graph& g) { return passes::identify_targets(g).targets; }

std::set<std::set<std::string>> group_sets(const std::vector<passes::MaskGroup>& groups) {
  std::set<std::set<std::string>> out;
  for (const auto& grp : groups) out.insert({grp.members.begin(), grp.members.end()});
  return out;
}

const passes::MaskGroup& group_with(const std::vector<passes::MaskGroup>& groups, const std::string& member) {
  for (const auto& grp : groups) {
    if (std::find(grp.members.begin(), grp.members.end(), member) != grp.members.end()) return grp;
  }
  throw std::runtime_error("no group holds " + member);
}

// Two convolutions concatenated, then a 1x1 conv and an Add with a third conv.
json concat_json(int extra_out) {
  json doc = json::parse(R"({
    "inputs": [{"id": "x", "channels": 2, "height": 5, "width": 5}],
    "nodes": [
      {"id": "a", "kind": "Conv2d", "params": {"out_channels": 3, "kernel": 3, "padding": 1}},
      {"id": "b", "kind": "Conv2d", "params": {"out_channels": 4, "kernel": 1}},
      {"id": "cat", "kind": "Concat"},
      {"id": "c", "kind": "Conv2d", "params": {"out_channels": 7, "kernel": 1}},
      {"id": "sum", "kind": "Add"},
      {"id": "gap", "kind": "GlobalAvgPool"},
      {"id": "flat", "kind": "Flatten"},
      {"id": "fc", "kind": "Linear", "params": {"out_features": 2}}
    ],
    "edges": [["x", "a"], ["x", "b"], ["a", "cat", 0], ["b", "cat", 1], ["x", "c"],
              ["cat", "sum", 0], ["c", "sum", 1], ["sum", "gap"], ["gap", "flat"], ["flat", "fc"]],
    "outputs": ["fc"]})");
  doc["nodes"][3]["params"]["out_channels"] = extra_out;
  return doc;
}

}  // namespace

TEST_CASE("targets are the weighted layers minus exclusions") {
  const Graph g = graph_from_json(train::builtin_seed("seed_cnn"));
  CHECK(targets_of(g) == std::vector<std::string>{"conv1", "conv2", "conv3", "fc"});
  const std::vector<std::string> rules{"Linear", "conv2", "nothing"};
  const auto sel = passes::identify_targets(g, rules);
  CHECK(sel.targets == std::vector<std::string>{"conv1", "conv3"});
  REQUIRE(sel.warnings.size() == 1);
  CHECK(sel.warnings[0].find("nothing") != std::string::npos);
}

TEST_CASE("mask sharing on the depthwise and residual-add fixture") {
  const Graph g = graph_from_json(testing::residual_json());
  const auto groups = passes::share_masks(g, targets_of(g));
  CHECK(group_sets(groups) == std::set<std::set<std::string>>{{"conv3x3", "dw"}, {"pw_a", "pw_b"}, {"fc"}});
  CHECK_FALSE(group_with(groups, "dw").frozen);
  CHECK(group_with(groups, "dw").size == 8);
  CHECK_FALSE(group_with(groups, "pw_b").frozen);
  CHECK(group_with(groups, "pw_b").size == 6);
  CHECK(group_with(groups, "fc").frozen);
  CHECK(group_with(groups, "fc").frozen_reason.find("output") != std::string::npos);
}

TEST_CASE("concatenation keeps operand groups apart") {
  const Graph g = graph_from_json(concat_json(7));
  const auto res = passes::analyze_sharing(g, targets_of(g));
  const auto& cat = res.layouts.at("cat");
  REQUIRE(cat.segments.size() == 2);
  CHECK(cat.segments[0].channels == 3);
  CHECK(cat.segments[1].channels == 4);
  CHECK(cat.width() == 7);
  CHECK(res.group_of.at("a") != res.group_of.at("b"));
  // Adding a concatenation to a single conv cannot be expressed as shared masks.
  CHECK(group_with(res.groups, "a").frozen);
  CHECK(group_with(res.groups, "c").frozen);
  CHECK(group_with(res.groups, "c").frozen_reason.find("Add") != std::string::npos);
}

TEST_CASE("flatten multiplies the channel layout") {
  const Graph g = graph_from_json(testing::residual_json());
  const auto res = passes::analyze_sharing(g, targets_of(g));
  const auto& flat = res.layouts.at("flat");
  REQUIRE(flat.segments.size() == 1);
  CHECK(flat.segments[0].multiplier == 36);
  CHECK(flat.width() == 6 * 36);
}

TEST_CASE("layers fed by the graph input or excluded stay frozen") {
  const json doc = json::parse(R"({
    "inputs": [{"id": "x", "channels": 3, "height": 4, "width": 4}],
    "nodes": [{"id": "dw", "kind": "DepthwiseConv2d", "params": {"kernel": 3, "padding": 1}},
              {"id": "pw", "kind": "Conv2d", "params": {"out_channels": 5, "kernel": 1}},
              {"id": "gap", "kind": "GlobalAvgPool"}, {"id": "flat", "kind": "Flatten"},
              {"id": "fc", "kind": "Linear", "params": {"out_features": 2}}],
    "edges": [["x", "dw"], ["dw", "pw"], ["pw", "gap"], ["gap", "flat"], ["flat", "fc"]],
    "outputs": ["fc"]})");
  const Graph g = graph_from_json(doc);
  const auto groups = passes::share_masks(g, targets_of(g));
  CHECK(group_with(groups, "dw").frozen);
  CHECK(group_with(groups, "dw").frozen_reason.find("input") != std::string::npos);
  CHECK_FALSE(group_with(groups, "pw").frozen);

  const std::vector<std::string> rules{"pw"};
  const auto sel = passes::identify_targets(g, rules);
  const auto res = passes::analyze_sharing(g, sel.targets);
  CHECK(res.group_of.count("pw") == 0);
}

TEST_CASE("grouped convolutions that are not depthwise are rejected") {
  const json doc = json::parse(R"({
    "inputs": [{"id": "x", "channels": 4, "height": 4, "width": 4}],
    "nodes": [{"id": "g", "kind": "Conv2d", "params": {"out_channels": 4, "kernel": 1, "groups": 2}}],
    "edges": [["x", "g"]], "outputs": ["g"]})");
  const Graph g = graph_from_json(doc);
  CHECK_THROWS_AS((void)passes::share_masks(g, targets_of(g)), GraphError);
}

TEST_CASE("shape calculators link each node to its channel source") {
  Graph g = graph_from_json(testing::residual_json());
  const auto res = passes::analyze_sharing(g, targets_of(g));
  const auto table = passes::attach_shape_calculators(g, res);
  CHECK(g.node("conv3x3").annotations.at("shape_calc") == "mask");
  CHECK(g.node("dw").annotations.at("shape_calc") == "mask");
  CHECK(g.node("flat").annotations.at("shape_calc") == "multiply:36");
  CHECK(table.at("pw_a") == table.at("pw_b"));

  const int first = res.group_of.at("conv3x3"), second = res.group_of.at("pw_a");
  const auto eff = passes::evaluate_calculators(g, table, [&](int grp) {
    if (grp == first) return Tensor::scalar(5);
    if (grp == second) return Tensor::scalar(2);
    return Tensor::scalar(4);
  });
  CHECK(eff.at("conv3x3").item() == 5);
  CHECK(eff.at("dw").item() == 5);
  CHECK(eff.at("add").item() == 2);
  CHECK(eff.at("flat").item() == 72);
  CHECK(eff.at("fc").item() == 4);
}

TEST_CASE("BatchNorm folding preserves eval outputs") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Graph g = testing::conv_bn_fixture(rng, static_cast<std::uint64_t>(trial));
    const auto folded = passes::fold_bn(g);
    CHECK(folded.folded == std::vector<std::string>{"bn"});
    CHECK_FALSE(folded.graph.has_node("bn"));
    const Tensor x = testing::input_for(g, 3, rng);
    CHECK(testing::max_abs_diff(run(g, x), run(folded.graph, x)) < 1e-5);

    const Graph back = passes::unfold_bn(folded.graph);
    REQUIRE(back.has_node("bn"));
    for (const char* w : {"gamma", "beta", "running_mean", "running_var"}) {
      CHECK(testing::max_abs_diff(back.node("bn").weight(w), g.node("bn").weight(w)) < 1e-5);
    }
    CHECK(testing::max_abs_diff(back.node("conv").weight("weight"), g.node("conv").weight("weight")) < 1e-5);
    CHECK(back.node("conv").has_weight("bias") == g.node("conv").has_weight("bias"));
    CHECK(testing::max_abs_diff(run(back, x), run(g, x)) < 1e-5);
  }
}

TEST_CASE("BatchNorm folding matches the closed form") {
  std::mt19937_64 rng(3);
  const Graph g = testing::conv_bn_fixture(rng, 1);
  const auto folded = passes::fold_bn(g).graph;
  const Node& bn = g.node("bn");
  const Node& conv = g.node("conv");
  const Tensor& w = conv.weight("weight");
  const std::int64_t per = w.numel() / w.dim(0);
  for (std::int64_t c = 0; c < w.dim(0); ++c) {
    const double s = bn.weight("gamma").at(c) / std::sqrt(bn.weight("running_var").at(c) + 1e-5);
    for (std::int64_t i = 0; i < per; ++i) {
      CHECK(folded.node("conv").weight("weight").at(c * per + i) == doctest::Approx(s * w.at(c * per + i)).epsilon(1e-5));
    }
    const double b = conv.has_weight("bias") ? conv.weight("bias").at(c) : 0.0;
    const double want = s * (b - bn.weight("running_mean").at(c)) + bn.weight("beta").at(c);
    CHECK(folded.node("conv").weight("bias").at(c) == doctest::Approx(want).epsilon(1e-5));
  }
}

TEST_CASE("BatchNorm that does not follow a weighted layer stays") {
  const json doc = json::parse(R"({
    "inputs": [{"id": "x", "channels": 2, "height": 4, "width": 4}],
    "nodes": [{"id": "c", "kind": "Conv2d", "params": {"out_channels": 2, "kernel": 1}},
              {"id": "r", "kind": "ReLU"}, {"id": "bn", "kind": "BatchNorm"}],
    "edges": [["x", "c"], ["c", "r"], ["r", "bn"]], "outputs": ["bn"]})");
  const Graph g = graph_from_json(doc);
  CHECK_FALSE(passes::has_foldable_bn(g));
  const auto res = passes::fold_bn(g);
  CHECK(res.folded.empty());
  REQUIRE(res.warnings.size() == 1);
  CHECK(res.warnings[0].find("ReLU") != std::string::npos);
}

TEST_CASE("pruned export equals the graph with removed channels zeroed") {
  Graph g = graph_from_json(testing::residual_json(), 5);
  const auto res = passes::analyze_sharing(g, targets_of(g));
  const int first = res.group_of.at("conv3x3"), second = res.group_of.at("pw_a");
  const std::map<int, std::vector<std::int64_t>> kept{{first, {0, 2, 3, 7}}, {second, {1, 4}}};
  const Graph pruned = passes::export_pruned(g, res, kept);

  CHECK(pruned.node("conv3x3").weight("weight").shape() == Shape{4, 3, 3, 3});
  CHECK(pruned.node("dw").weight("weight").shape() == Shape{4, 1, 3, 3});
  CHECK(pruned.node("pw_a").weight("weight").shape() == Shape{2, 4, 1, 1});
  CHECK(pruned.node("fc").weight("weight").shape() == Shape{4, 2 * 36});
  CHECK(count_parameters(pruned) == (4 * 27 + 4) + (4 * 9 + 4) + 2 * (2 * 4 + 2) + (4 * 72 + 4));

  // Oracle: zero the dropped output channels of every group member.
  Graph zeroed = g;
  auto zero_out = [&](const std::string& id, const std::vector<std::int64_t>& keep) {
    Node& n = zeroed.node(id);
    for (auto& [name, t] : n.weights) {
      const std::int64_t per = t.numel() / t.dim(0);
      for (std::int64_t c = 0; c < t.dim(0); ++c) {
        if (std::find(keep.begin(), keep.end(), c) != keep.end()) continue;
        for (std::int64_t i = 0; i < per; ++i) t.mutable_values()[c * per + i] = 0;
      }
    }
  };
  for (const char* id : {"conv3x3", "dw"}) zero_out(id, kept.at(first));
  for (const char* id : {"pw_a", "pw_b"}) zero_out(id, kept.at(second));
  std::mt19937_64 rng(8);
  const Tensor x = testing::input_for(g, 4, rng);
  CHECK(testing::max_abs_diff(run(zeroed, x), run(pruned, x)) < 1e-5);

  const auto report = passes::channel_report(g, pruned);
  CHECK(report[0]["id"] == "conv3x3");
  CHECK(report[0]["kept"] == 4);
  CHECK(report[0]["total"] == 8);
}

TEST_CASE("pruning a group to nothing is an error") {
  const Graph g = graph_from_json(testing::residual_json(), 5);
  const auto res = passes::analyze_sharing(g, targets_of(g));
  const std::map<int, std::vector<std::int64_t>> kept{{res.group_of.at("pw_a"), {}}};
  CHECK_THROWS_AS((void)passes::export_pruned(g, res, kept), GraphError);
}

TEST_CASE("supernet export keeps only the chosen branch") {
  const Graph g = graph_from_json(train::builtin_seed("supernet_cnn"), 4);
  const Graph out = passes::export_supernet(g, [](const Node& c) { return c.id == "sn2" ? 1 : 2; });
  CHECK_FALSE(out.has_node("sn2"));
  CHECK(out.has_node("sn2.b1.dw"));
  CHECK_FALSE(out.has_node("sn2.b0.conv"));
  CHECK(out.node("sn2.b1.dw").branch_of.empty());
  CHECK(out.has_node("sn3.b2.conv"));

  // The exported graph computes what the supernet computes with one-hot choices.
  Graph hard = g;
  hard.node("sn2").weights["theta"] = Tensor(Shape{3}, std::vector<Real>{0, 1, 0});
  hard.node("sn3").weights["theta"] = Tensor(Shape{3}, std::vector<Real>{0, 0, 1});
  ExecOptions discrete;
  discrete.discrete = true;
  std::mt19937_64 rng(2);
  const Tensor x = testing::input_for(g, 2, rng);
  CHECK(testing::max_abs_diff(run(hard, x, discrete), run(out, x)) == 0);
  CHECK_THROWS_AS((void)passes::export_supernet(g, [](const Node&) { return 3; }), GraphError);
}

TEST_CASE("cleanup removes identities and dead nodes") {
  const json doc = json::parse(R"({
    "inputs": [{"id": "x", "channels": 1, "height": 4, "width": 4}],
    "nodes": [{"id": "id", "kind": "Identity"}, {"id": "r", "kind": "ReLU"}, {"id": "dead", "kind": "ReLU"}],
    "edges": [["x", "id"], ["id", "r"], ["x", "dead"]], "outputs": ["r"]})");
  Graph g = graph_from_json(doc);
  passes::cleanup(g);
  CHECK_FALSE(g.has_node("id"));
  CHECK_FALSE(g.has_node("dead"));
  CHECK(g.producers("r") == std::vector<std::string>{"x"});
}
