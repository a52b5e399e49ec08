#pragma once

#include "forge/search.hpp"

FORGE_NAMESPACE_BEGIN
namespace supernet {

/// Searches over the branches of every combiner in the graph.
class SupernetMethod final : public SearchMethod {
 public:
  explicit SupernetMethod(const Graph& g);

  [[nodiscard]] std::string name() const override { return "supernet"; }
  [[nodiscard]] std::vector<Tensor> arch_parameters() const override { return thetas_; }
  [[nodiscard]] Graph export_graph(const Graph& g, nlohmann::json* report) const override;
  [[nodiscard]] ArrayMap state() const override;

 private:
  std::vector<std::string> combiners_;
  std::vector<Tensor> thetas_;
};

/// Requires at least one SuperNetCombiner in `seed`.
[[nodiscard]] SearchableModel make_supernet(const Graph& seed);

}  // namespace supernet
FORGE_NAMESPACE_END
