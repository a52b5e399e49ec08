#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "forge/checkpoint.hpp"
#include "forge/cost.hpp"
#include "forge/executor.hpp"

FORGE_NAMESPACE_BEGIN

/// A DNAS method attached to a graph: execution hooks, architectural
/// parameters, effective cost bags and the export rewrite.
class SearchMethod : public ExecHooks {
 public:
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual std::vector<Tensor> arch_parameters() const { return {}; }
  /// Trainable quantizer parameters that the weight optimizer updates.
  [[nodiscard]] virtual std::vector<Tensor> extra_weight_parameters() const { return {}; }
  [[nodiscard]] virtual Tensor get_cost(const Graph& g, const cost::CostSpec& spec) const;
  /// Plain graph with every search structure removed. `report` receives a
  /// method-specific JSON summary when non-null.
  [[nodiscard]] virtual Graph export_graph(const Graph& g, nlohmann::json* report) const;
  /// Architectural state under "<method>.<owner>.<tensor>" names.
  [[nodiscard]] virtual ArrayMap state() const { return {}; }
  void load_state(const ArrayMap& arrays);
};

/// The seed graph without search: plain execution, static costs.
class PlainMethod final : public SearchMethod {
 public:
  [[nodiscard]] std::string name() const override { return "none"; }
};

class SearchableModel {
 public:
  SearchableModel(Graph graph, std::unique_ptr<SearchMethod> method);

  [[nodiscard]] Tensor forward(const Tensor& x, const ExecOptions& opt) const;
  /// Every trainable graph weight plus method-owned quantizer parameters.
  [[nodiscard]] std::vector<Tensor> weight_parameters() const;
  [[nodiscard]] std::vector<Tensor> arch_parameters() const { return method_->arch_parameters(); }
  [[nodiscard]] Tensor get_cost(const cost::CostSpec& spec) const { return method_->get_cost(graph_, spec); }
  [[nodiscard]] Graph export_graph(nlohmann::json* report = nullptr) const {
    return method_->export_graph(graph_, report);
  }
  /// Graph weights and architectural state in one map.
  [[nodiscard]] ArrayMap state() const;

  [[nodiscard]] const Graph& graph() const { return graph_; }
  [[nodiscard]] Graph& graph() { return graph_; }
  [[nodiscard]] const SearchMethod& method() const { return *method_; }
  [[nodiscard]] SearchMethod& method() { return *method_; }

 private:
  Graph graph_;
  std::unique_ptr<SearchMethod> method_;
};

[[nodiscard]] SearchableModel make_plain(Graph g);

FORGE_NAMESPACE_END
