#pragma once

#include <random>
#include <string>

#include "forge/experiment.hpp"
#include "forge/graph_io.hpp"

namespace forge::testing {

inline Tensor uniform_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (auto& v : t.mutable_values()) v = static_cast<Real>(d(rng));
  return t;
}

/// Gives every BatchNorm non-trivial affine parameters and running statistics.
inline void randomize_bn(Graph& g, std::mt19937_64& rng) {
  for (const auto& id : g.node_ids()) {
    Node& n = g.node(id);
    if (n.kind != OpKind::BatchNorm) continue;
    const Shape s{n.param("channels")};
    n.weights["gamma"] = uniform_tensor(s, rng, 0.5, 1.5).set_requires_grad(true);
    n.weights["beta"] = uniform_tensor(s, rng, -0.5, 0.5).set_requires_grad(true);
    n.weights["running_mean"] = uniform_tensor(s, rng, -0.5, 0.5);
    n.weights["running_var"] = uniform_tensor(s, rng, 0.5, 2.0);
  }
}

/// Input -> conv or depthwise conv -> BatchNorm -> ReLU with random geometry.
inline Graph conv_bn_fixture(std::mt19937_64& rng, std::uint64_t seed) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int cin = pick(1, 4), h = pick(5, 9), w = pick(5, 9), k = pick(0, 1) == 0 ? 1 : 3;
  const bool depthwise = pick(0, 3) == 0;
  nlohmann::json conv{{"id", "conv"},
                      {"kind", depthwise ? "DepthwiseConv2d" : "Conv2d"},
                      {"params", {{"kernel", k}, {"padding", k / 2}, {"stride", pick(1, 2)}, {"bias", pick(0, 1)}}}};
  if (!depthwise) conv["params"]["out_channels"] = pick(1, 6);
  using nlohmann::json;
  const json doc{
      {"inputs", json::array({{{"id", "x"}, {"channels", cin}, {"height", h}, {"width", w}}})},
      {"nodes", json::array({conv, {{"id", "bn"}, {"kind", "BatchNorm"}}, {{"id", "relu"}, {"kind", "ReLU"}}})},
      {"edges", json::array({json::array({"x", "conv"}), json::array({"conv", "bn"}), json::array({"bn", "relu"})})},
      {"outputs", json::array({"relu"})}};
  Graph g = graph_from_json(doc, seed);
  randomize_bn(g, rng);
  return g;
}

/// 3x3 conv -> depthwise conv -> two parallel 1x1 convs -> Add -> Flatten -> Linear.
inline nlohmann::json residual_json() {
  return nlohmann::json::parse(R"({
    "inputs": [{"id": "x", "channels": 3, "height": 6, "width": 6}],
    "nodes": [
      {"id": "conv3x3", "kind": "Conv2d", "params": {"out_channels": 8, "kernel": 3, "padding": 1}},
      {"id": "dw", "kind": "DepthwiseConv2d", "params": {"kernel": 3, "padding": 1}},
      {"id": "pw_a", "kind": "Conv2d", "params": {"out_channels": 6, "kernel": 1}},
      {"id": "pw_b", "kind": "Conv2d", "params": {"out_channels": 6, "kernel": 1}},
      {"id": "add", "kind": "Add"},
      {"id": "flat", "kind": "Flatten"},
      {"id": "fc", "kind": "Linear", "params": {"out_features": 4}}
    ],
    "edges": [["x", "conv3x3"], ["conv3x3", "dw"], ["dw", "pw_a"], ["dw", "pw_b"],
              ["pw_a", "add", 0], ["pw_b", "add", 1], ["add", "flat"], ["flat", "fc"]],
    "outputs": ["fc"]
  })");
}

/// Builtin seed with random BatchNorm statistics, so that folding is not a no-op.
inline Graph seed_fixture(const std::string& name, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph g = graph_from_json(train::builtin_seed(name), seed);
  randomize_bn(g, rng);
  return g;
}

[[nodiscard]] inline Tensor input_for(const Graph& g, std::int64_t batch, std::mt19937_64& rng) {
  const Node& in = g.node(g.inputs().front());
  return uniform_tensor({batch, in.param("channels"), in.param("height"), in.param("width")}, rng, -1.0, 1.0);
}

[[nodiscard]] inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double d = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(static_cast<double>(a.at(i) - b.at(i))));
  return d;
}

}  // namespace forge::testing
