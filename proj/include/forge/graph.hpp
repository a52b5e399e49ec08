#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "forge/tensor.hpp"

FORGE_NAMESPACE_BEGIN

enum class OpKind {
  Input,
  Output,
  Conv2d,
  DepthwiseConv2d,
  Linear,
  BatchNorm,
  ReLU,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  Add,
  Concat,
  Flatten,
  Identity,
  SuperNetCombiner,
};

[[nodiscard]] std::string_view kind_name(OpKind kind);
/// Throws ConfigError for unknown names.
[[nodiscard]] OpKind parse_kind(std::string_view name);

/// Conv2d, DepthwiseConv2d or Linear.
[[nodiscard]] bool is_weighted(OpKind kind);

/// Named weights with value semantics: copying the map clones every tensor.
class WeightMap : public std::map<std::string, Tensor> {
 public:
  WeightMap() = default;
  WeightMap(const WeightMap& other);
  WeightMap& operator=(const WeightMap& other);
  WeightMap(WeightMap&&) noexcept = default;
  WeightMap& operator=(WeightMap&&) noexcept = default;
  ~WeightMap() = default;
};

/// BatchNorm parameters absorbed into a Conv/Linear node.
struct FoldedBN {
  std::string bn_id;
  std::vector<Real> gamma, beta, mean, var;
  Real eps = Real(1e-5);
  Real momentum = Real(0.1);
  bool had_bias = false;
};

/// Fixed-precision weight quantization of an exported node.
struct WeightQuant {
  int bits = 8;
  int bias_bits = 32;  // 32 keeps the bias in float
};

/// Fixed-precision PACT quantization applied to a node's output.
struct ActQuant {
  int bits = 8;
  Real alpha = Real(8);
};

struct Node {
  std::string id;
  OpKind kind = OpKind::Identity;
  std::map<std::string, double> params;
  WeightMap weights;
  std::optional<FoldedBN> folded_bn;
  std::optional<WeightQuant> weight_quant;
  std::optional<ActQuant> act_quant;
  // Supernet membership: combiner id and branch index, empty for plain nodes.
  std::string branch_of;
  int branch_index = -1;
  // Free-form annotations written by passes.
  std::map<std::string, std::string> annotations;

  [[nodiscard]] bool has_param(const std::string& key) const { return params.count(key) != 0; }
  [[nodiscard]] std::int64_t param(const std::string& key) const;
  [[nodiscard]] std::int64_t param_or(const std::string& key, std::int64_t fallback) const;
  [[nodiscard]] const Tensor& weight(const std::string& name) const;
  [[nodiscard]] bool has_weight(const std::string& name) const { return weights.count(name) != 0; }
};

struct Edge {
  std::string src;
  std::string dst;
  int slot = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Directed acyclic graph of layers. Copies are deep, including weights.
class Graph {
 public:
  Node& add_node(Node node);
  void connect(const std::string& src, const std::string& dst, int slot = 0);
  void disconnect(const std::string& src, const std::string& dst);
  /// Removes a node together with every edge touching it.
  void remove_node(const std::string& id);
  /// Redirects every consumer of `from` to read `to` instead.
  void replace_uses(const std::string& from, const std::string& to);

  [[nodiscard]] bool has_node(const std::string& id) const { return nodes_.count(id) != 0; }
  [[nodiscard]] Node& node(const std::string& id);
  [[nodiscard]] const Node& node(const std::string& id) const;
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Node ids in insertion order.
  [[nodiscard]] const std::vector<std::string>& node_ids() const { return order_; }
  [[nodiscard]] const std::vector<Edge>& edges() const { return edges_; }

  /// Producers of `id` ordered by input slot.
  [[nodiscard]] std::vector<std::string> producers(const std::string& id) const;
  /// Distinct consumers of `id` in edge order.
  [[nodiscard]] std::vector<std::string> consumers(const std::string& id) const;

  /// Kahn's algorithm; ties resolved by insertion order. Throws on cycles.
  [[nodiscard]] std::vector<std::string> topo_order() const;

  /// Ids of Input and Output nodes in insertion order.
  [[nodiscard]] std::vector<std::string> inputs() const;
  [[nodiscard]] std::vector<std::string> outputs() const;

  /// Structural checks: acyclic, contiguous input slots, per-kind arity.
  void validate() const;

 private:
  std::map<std::string, Node> nodes_;
  std::vector<std::string> order_;
  std::vector<Edge> edges_;
};

/// Per-node output shape with a leading batch axis of `batch`.
using ShapeMap = std::map<std::string, Shape>;
[[nodiscard]] ShapeMap infer_shapes(const Graph& g, std::int64_t batch = 1);

/// Creates or re-creates the weights of a weighted/BN node from its params,
/// He-normal for conv/linear kernels, deterministic in (seed, node id).
void init_weights(Node& node, std::uint64_t seed);

/// Brute-force count of every weight and bias element held by Conv2d,
/// DepthwiseConv2d and Linear nodes.
[[nodiscard]] std::int64_t count_parameters(const Graph& g);

FORGE_NAMESPACE_END
