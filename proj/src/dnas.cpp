#include "forge/dnas.hpp"

#include "forge/passes.hpp"
#include "forge/supernet.hpp"

FORGE_NAMESPACE_BEGIN
namespace supernet {

SupernetMethod::SupernetMethod(const Graph& g) {
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    if (n.kind != OpKind::SuperNetCombiner) continue;
    combiners_.push_back(id);
    thetas_.push_back(n.weight("theta"));
  }
  if (combiners_.empty()) throw GraphError("supernet search needs at least one SuperNet node in the graph");
}

Graph SupernetMethod::export_graph(const Graph& g, nlohmann::json* report) const {
  nlohmann::json choices = nlohmann::json::array();
  Graph out = passes::export_supernet(g, [&](const Node& n) {
    const int k = select(n.weight("theta"));
    choices.push_back({{"node", n.id}, {"branch", k}, {"theta", std::vector<Real>(n.weight("theta").values().begin(), n.weight("theta").values().end())}});
    return k;
  });
  if (report != nullptr) *report = {{"method", "supernet"}, {"choices", choices}};
  return out;
}

ArrayMap SupernetMethod::state() const {
  ArrayMap out;
  for (std::size_t i = 0; i < combiners_.size(); ++i) out["supernet." + combiners_[i] + ".theta"] = thetas_[i];
  return out;
}

SearchableModel make_supernet(const Graph& seed) {
  Graph g = seed;
  auto method = std::make_unique<SupernetMethod>(g);
  return SearchableModel(std::move(g), std::move(method));
}

}  // namespace supernet
FORGE_NAMESPACE_END
