#pragma once

#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "forge/graph.hpp"

FORGE_NAMESPACE_BEGIN

struct ExecOptions {
  bool training = false;
  /// Replace every soft architectural choice by its argmax: combiners forward
  /// only the selected branch and precision mixtures collapse to one bitwidth.
  bool discrete = false;
  /// Source of Gumbel noise in training mode; no noise when null.
  std::mt19937_64* rng = nullptr;
  Real tau = 1;
  bool check_finite = true;
  /// When set, receives the output tensor of every node.
  std::map<std::string, Tensor>* trace = nullptr;
};

/// Customization points used by the search methods. The base implementation
/// applies fixed-precision annotations (WeightQuant, ActQuant) and the
/// softmax combiner, which is the behavior of a plain graph.
class ExecHooks {
 public:
  virtual ~ExecHooks() = default;
  /// Tensor actually used for weight `name` of node `n`.
  [[nodiscard]] virtual Tensor weight(const Node& n, const std::string& name, const Tensor& w,
                                      const ExecOptions& opt) const;
  /// Post-processing of the output of node `n`.
  [[nodiscard]] virtual Tensor output(const Node& n, const Tensor& y, const ExecOptions& opt) const;
  [[nodiscard]] virtual Tensor combine(const Node& n, std::span<const Tensor> branches,
                                       const ExecOptions& opt) const;
};

/// Evaluates the graph in topological order; returns one tensor per Output
/// node. Inputs are matched to Input nodes in insertion order.
[[nodiscard]] std::vector<Tensor> execute(const Graph& g, std::span<const Tensor> inputs,
                                          const ExecOptions& opt = {}, const ExecHooks* hooks = nullptr);

/// Single-input, single-output convenience wrapper.
[[nodiscard]] Tensor run(const Graph& g, const Tensor& input, const ExecOptions& opt = {},
                         const ExecHooks* hooks = nullptr);

FORGE_NAMESPACE_END
