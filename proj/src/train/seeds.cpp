#include <fstream>

#include "forge/experiment.hpp"
#include "forge/graph_io.hpp"

FORGE_NAMESPACE_BEGIN
namespace train {

using nlohmann::json;

namespace {

json conv(const std::string& id, int out, int kernel) {
  return {{"id", id},
          {"kind", "Conv2d"},
          {"params", {{"out_channels", out}, {"kernel", kernel}, {"padding", kernel / 2}, {"bias", false}}}};
}

json node(const std::string& id, const std::string& kind, json params = json::object()) {
  return {{"id", id}, {"kind", kind}, {"params", std::move(params)}};
}

// conv, BatchNorm, ReLU
void block(json& nodes, json& edges, std::string& prev, const std::string& tag, int out, int kernel) {
  nodes.push_back(conv("conv" + tag, out, kernel));
  nodes.push_back(node("bn" + tag, "BatchNorm"));
  nodes.push_back(node("relu" + tag, "ReLU"));
  edges.push_back({prev, "conv" + tag});
  edges.push_back({"conv" + tag, "bn" + tag});
  edges.push_back({"bn" + tag, "relu" + tag});
  prev = "relu" + tag;
}

void link(json& nodes, json& edges, std::string& prev, json n) {
  const auto id = n["id"].get<std::string>();
  nodes.push_back(std::move(n));
  edges.push_back({prev, id});
  prev = id;
}

json supernet_block(const std::string& id, int out) {
  json branches = json::array();
  branches.push_back({conv("conv", out, 3), node("bn", "BatchNorm"), node("relu", "ReLU")});
  branches.push_back({node("dw", "DepthwiseConv2d", {{"kernel", 3}, {"padding", 1}, {"bias", false}}),
                      node("bn_dw", "BatchNorm"), node("relu_dw", "ReLU"), conv("pw", out, 1), node("bn", "BatchNorm"),
                      node("relu", "ReLU")});
  branches.push_back({conv("conv", out, 1), node("bn", "BatchNorm"), node("relu", "ReLU")});
  return {{"id", id}, {"kind", "SuperNet"}, {"supernet_branches", branches}};
}

json head(json nodes, json edges, std::string prev, int classes) {
  link(nodes, edges, prev, node("gap", "GlobalAvgPool"));
  link(nodes, edges, prev, node("flat", "Flatten"));
  link(nodes, edges, prev, node("fc", "Linear", {{"out_features", classes}}));
  return {{"inputs", json::array({{{"id", "x"}, {"channels", 1}, {"height", 16}, {"width", 16}}})},
          {"nodes", std::move(nodes)},
          {"edges", std::move(edges)},
          {"outputs", json::array({"fc"})}};
}

}  // namespace

const std::vector<std::string>& builtin_seed_names() {
  static const std::vector<std::string> names{"tiny_cnn", "seed_cnn", "supernet_cnn"};
  return names;
}

json builtin_seed(const std::string& name, int classes) {
  json nodes = json::array(), edges = json::array();
  std::string prev = "x";
  if (name == "tiny_cnn") {
    block(nodes, edges, prev, "1", 8, 3);
    link(nodes, edges, prev, node("pool1", "MaxPool", {{"kernel", 2}}));
    block(nodes, edges, prev, "2", 16, 3);
  } else if (name == "seed_cnn") {
    block(nodes, edges, prev, "1", 16, 3);
    link(nodes, edges, prev, node("pool1", "MaxPool", {{"kernel", 2}}));
    block(nodes, edges, prev, "2", 32, 3);
    link(nodes, edges, prev, node("pool2", "MaxPool", {{"kernel", 2}}));
    block(nodes, edges, prev, "3", 64, 3);
  } else if (name == "supernet_cnn") {
    block(nodes, edges, prev, "1", 16, 3);
    link(nodes, edges, prev, node("pool1", "MaxPool", {{"kernel", 2}}));
    link(nodes, edges, prev, supernet_block("sn2", 32));
    link(nodes, edges, prev, node("pool2", "MaxPool", {{"kernel", 2}}));
    link(nodes, edges, prev, supernet_block("sn3", 64));
  } else {
    throw ConfigError("unknown builtin seed '" + name + "' (expected tiny_cnn, seed_cnn or supernet_cnn)");
  }
  return head(std::move(nodes), std::move(edges), prev, classes);
}

Graph load_seed(const std::string& spec, std::uint64_t seed, int classes) {
  const std::string prefix = "builtin:";
  if (spec.rfind(prefix, 0) == 0) return graph_from_json(builtin_seed(spec.substr(prefix.size()), classes), seed);
  std::ifstream in(spec);
  if (!in) throw ConfigError("cannot open seed graph " + spec);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("seed graph " + spec + ": " + e.what());
  }
  return graph_from_json(doc, seed);
}

}  // namespace train
FORGE_NAMESPACE_END
