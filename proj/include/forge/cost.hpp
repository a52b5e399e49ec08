#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "forge/graph.hpp"

FORGE_NAMESPACE_BEGIN
namespace cost {

/// Geometry and bitwidths of one node under canonical names, each a scalar
/// tensor. Search methods substitute differentiable effective values.
///
/// Names: out_channels, in_channels, group_in_channels, kernel_h, kernel_w,
/// kernel_size, stride, padding, groups, out_height, out_width, in_features,
/// out_features, has_bias, weight_bits, bias_bits, in_bits, out_bits.
/// Linear layers report a 1x1 kernel and a 1x1 output so that conv formulas
/// apply unchanged.
using ParamBag = std::map<std::string, Tensor>;

/// Reads bag[name]; throws ConfigError naming the missing entry.
[[nodiscard]] const Tensor& get(const ParamBag& bag, const std::string& name);

using CostFn = std::function<Tensor(const ParamBag& bag, const nlohmann::json& args)>;

/// Named cost functions. Starts with the builtins "params", "params_bytes"
/// and "macs"; library users may add their own.
class Registry {
 public:
  Registry();
  void add(const std::string& name, CostFn fn);
  [[nodiscard]] bool has(const std::string& name) const { return fns_.count(name) != 0; }
  [[nodiscard]] const CostFn& get(const std::string& name) const;

 private:
  std::map<std::string, CostFn> fns_;
};

struct Rule {
  std::optional<OpKind> kind;              // any kind when empty
  std::map<std::string, double> attrs;     // node params that must match exactly
  std::string cost;
  nlohmann::json args = nlohmann::json::object();
};

enum class Default { Zero, Error };

class CostSpec {
 public:
  CostSpec(std::string name, std::vector<Rule> rules, Default fallback, const Registry& registry = Registry());

  /// "params", "params_bytes" or "macs" applied to Conv2d, DepthwiseConv2d
  /// and Linear; every other node costs zero.
  static CostSpec builtin(const std::string& name);
  static CostSpec from_json(const nlohmann::json& doc, const Registry& registry = Registry());
  /// Builtin name or path to a JSON spec file.
  static CostSpec load(const std::string& name_or_path, const Registry& registry = Registry());

  [[nodiscard]] const std::string& name() const { return name_; }
  /// First matching rule, or null.
  [[nodiscard]] const Rule* match(const Node& n) const;
  /// Cost of one node; zero or ConfigError when no rule matches.
  [[nodiscard]] Tensor evaluate(const Node& n, const ParamBag& bag) const;

 private:
  std::string name_;
  std::vector<Rule> rules_;
  std::vector<CostFn> fns_;
  Default fallback_;
};

/// Bag of a node with static extents and annotated bitwidths (32 when
/// unquantized).
[[nodiscard]] ParamBag static_bag(const Graph& g, const Node& n, const ShapeMap& shapes);

using BagFn = std::function<ParamBag(const Node&)>;

/// Sum of per-node costs. Nodes inside supernet branches contribute through
/// the expected cost of their combiner.
[[nodiscard]] Tensor graph_cost(const Graph& g, const CostSpec& spec, const BagFn& bag);
/// graph_cost with static bags.
[[nodiscard]] Tensor get_cost(const Graph& g, const CostSpec& spec);

/// One regularization term: lambda * cost, or lambda * max(0, cost - budget)
/// when a budget is set.
struct Term {
  std::string cost;
  double lambda = 0;
  std::optional<double> budget;
};

/// task_loss + sum of terms. Terms with lambda == 0 are skipped entirely.
[[nodiscard]] Tensor combine_costs(const Tensor& task_loss, const std::map<std::string, Tensor>& costs,
                                   std::span<const Term> terms);

}  // namespace cost
FORGE_NAMESPACE_END
