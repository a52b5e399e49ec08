#include "forge/search.hpp"

#include <algorithm>

#include "forge/graph_io.hpp"
#include "forge/passes.hpp"

FORGE_NAMESPACE_BEGIN

Tensor SearchMethod::get_cost(const Graph& g, const cost::CostSpec& spec) const { return cost::get_cost(g, spec); }

Graph SearchMethod::export_graph(const Graph& g, nlohmann::json* report) const {
  Graph out = g;
  passes::cleanup(out);
  if (report != nullptr) *report = nlohmann::json{{"method", name()}};
  return out;
}

void SearchMethod::load_state(const ArrayMap& arrays) {
  for (auto& [name, t] : state()) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ConfigError("checkpoint lacks search state '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("search state '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                       to_string(t.shape()));
    }
    Tensor dst = t;
    std::copy(it->second.values().begin(), it->second.values().end(), dst.mutable_values().begin());
  }
}

SearchableModel::SearchableModel(Graph graph, std::unique_ptr<SearchMethod> method)
    : graph_(std::move(graph)), method_(std::move(method)) {
  if (!method_) throw ConfigError("searchable model needs a method");
}

Tensor SearchableModel::forward(const Tensor& x, const ExecOptions& opt) const {
  return run(graph_, x, opt, method_.get());
}

std::vector<Tensor> SearchableModel::weight_parameters() const {
  std::vector<Tensor> out;
  const auto arch = method_->arch_parameters();
  auto is_arch = [&](const Tensor& t) {
    return std::any_of(arch.begin(), arch.end(), [&](const Tensor& a) { return a.impl() == t.impl(); });
  };
  for (const auto& id : graph_.node_ids()) {
    for (const auto& [name, t] : graph_.node(id).weights) {
      if (t.defined() && t.requires_grad() && !is_arch(t)) out.push_back(t);
    }
  }
  for (const auto& t : method_->extra_weight_parameters()) out.push_back(t);
  return out;
}

ArrayMap SearchableModel::state() const {
  ArrayMap arrays = graph_weights(graph_);
  for (const auto& [k, v] : method_->state()) arrays[k] = v;
  return arrays;
}

SearchableModel make_plain(Graph g) {
  g.validate();
  return SearchableModel(std::move(g), std::make_unique<PlainMethod>());
}

FORGE_NAMESPACE_END
