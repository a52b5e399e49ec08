#include "forge/pit.hpp"

#include <algorithm>

#include "forge/ops.hpp"

FORGE_NAMESPACE_BEGIN
namespace pit {

Tensor binarize(const ChannelMask& mask) {
  if (mask.frozen) return Tensor(mask.theta.shape(), Real{1});
  Tensor h = ops::heaviside_ste(mask.theta, mask.threshold);
  const auto hv = h.values();
  if (std::any_of(hv.begin(), hv.end(), [](Real v) { return v != 0; })) return h;
  const auto tv = mask.theta.values();
  const auto best = std::max_element(tv.begin(), tv.end()) - tv.begin();
  Tensor keep(mask.theta.shape());
  keep.mutable_values()[best] = 1;
  return ops::add(h, keep);
}

Tensor masked_weight(const Tensor& w, const ChannelMask& mask) {
  if (w.rank() < 1 || w.dim(0) != mask.theta.numel()) {
    throw ShapeError("masked_weight: weight " + to_string(w.shape()) + " has no output axis of " +
                     std::to_string(mask.theta.numel()) + " channels");
  }
  return ops::mul_channels(w, binarize(mask));
}

Tensor effective_channel_count(const ChannelMask& mask) { return ops::sum(binarize(mask)); }

std::vector<std::int64_t> kept_channels(const ChannelMask& mask) {
  std::vector<std::int64_t> out;
  const Tensor b = binarize(mask);
  const auto h = b.values();
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i] != 0) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

PitMethod::PitMethod(Graph& g, const Options& opt) {
  for (const auto& id : g.node_ids()) {
    const Node& n = g.node(id);
    if (n.weight_quant || n.act_quant) {
      throw GraphError("channel search cannot attach to quantized node '" + id +
                       "'; methods compose by export, not by stacking");
    }
  }
  auto folded = passes::fold_bn(g);
  g = std::move(folded.graph);
  folded_ = std::move(folded.folded);
  warnings_ = std::move(folded.warnings);
  auto sel = passes::identify_targets(g, opt.exclude);
  warnings_.insert(warnings_.end(), sel.warnings.begin(), sel.warnings.end());
  sharing_ = passes::analyze_sharing(g, sel.targets);
  calculators_ = passes::attach_shape_calculators(g, sharing_);
  shapes_ = infer_shapes(g);
  for (const auto& grp : sharing_.groups) {
    if (grp.members.empty()) throw GraphError("mask group " + std::to_string(grp.id) + " has no members");
    ChannelMask m;
    m.group = grp.id;
    m.frozen = grp.frozen;
    m.theta = Tensor(Shape{grp.size}, opt.theta_init).set_requires_grad(!grp.frozen);
    masks_.push_back(std::move(m));
  }
}

Tensor PitMethod::weight(const Node& n, const std::string& name, const Tensor& w, const ExecOptions& opt) const {
  auto it = sharing_.group_of.find(n.id);
  if (it == sharing_.group_of.end()) return ExecHooks::weight(n, name, w, opt);
  const ChannelMask& m = masks_[static_cast<std::size_t>(it->second)];
  if (m.frozen) return w;
  return masked_weight(w, m);
}

std::vector<Tensor> PitMethod::arch_parameters() const {
  std::vector<Tensor> out;
  for (const auto& m : masks_) {
    if (!m.frozen) out.push_back(m.theta);
  }
  return out;
}

std::map<std::string, Tensor> PitMethod::effective_extents(const Graph& g) const {
  return passes::evaluate_calculators(g, calculators_, [&](int grp) {
    return effective_channel_count(masks_[static_cast<std::size_t>(grp)]);
  });
}

Tensor PitMethod::get_cost(const Graph& g, const cost::CostSpec& spec) const {
  const auto eff = effective_extents(g);
  return cost::graph_cost(g, spec, [&](const Node& n) {
    cost::ParamBag bag = cost::static_bag(g, n, shapes_);
    const auto prods = g.producers(n.id);
    const Tensor& out = eff.at(n.id);
    bag["out_channels"] = bag["out_features"] = out;
    if (!prods.empty()) {
      const Tensor& in = eff.at(prods[0]);
      bag["in_channels"] = bag["in_features"] = in;
      const bool depthwise = n.kind == OpKind::DepthwiseConv2d ||
                             (n.kind == OpKind::Conv2d && n.param_or("groups", 1) > 1);
      if (!depthwise) bag["group_in_channels"] = in;
    }
    return bag;
  });
}

Graph PitMethod::export_graph(const Graph& g, nlohmann::json* report) const {
  std::map<int, std::vector<std::int64_t>> kept;
  for (const auto& m : masks_) kept[m.group] = kept_channels(m);
  Graph out = passes::export_pruned(g, sharing_, kept);
  if (report != nullptr) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& grp : sharing_.groups) {
      groups.push_back({{"id", grp.id},
                        {"members", grp.members},
                        {"size", grp.size},
                        {"kept", kept.at(grp.id).size()},
                        {"frozen", grp.frozen},
                        {"frozen_reason", grp.frozen_reason}});
    }
    *report = {{"method", "pit"},
               {"groups", groups},
               {"folded_bn", folded_},
               {"layers", passes::channel_report(g, out)},
               {"warnings", warnings_}};
  }
  return out;
}

ArrayMap PitMethod::state() const {
  ArrayMap out;
  for (const auto& m : masks_) out["pit." + std::to_string(m.group) + ".theta"] = m.theta;
  return out;
}

SearchableModel make_pit(const Graph& seed, const Options& opt) {
  Graph g = seed;
  auto method = std::make_unique<PitMethod>(g, opt);
  return SearchableModel(std::move(g), std::move(method));
}

}  // namespace pit
FORGE_NAMESPACE_END
