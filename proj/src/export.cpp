#include <algorithm>
#include <numeric>
#include <set>

#include "forge/passes.hpp"
#include "forge/supernet.hpp"

FORGE_NAMESPACE_BEGIN
namespace passes {

namespace {

using Index = std::vector<std::int64_t>;

Index iota(std::int64_t n) {
  Index v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), std::int64_t{0});
  return v;
}

Tensor take(const Tensor& t, std::int64_t axis, const Index& idx) {
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= t.dim(d);
  for (std::int64_t d = axis + 1; d < t.rank(); ++d) inner *= t.dim(d);
  const std::int64_t extent = t.dim(axis);
  Shape shape = t.shape();
  shape[axis] = static_cast<std::int64_t>(idx.size());
  std::vector<Real> out;
  out.reserve(static_cast<std::size_t>(outer * idx.size() * inner));
  const auto v = t.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (auto i : idx) {
      const auto* src = v.data() + (o * extent + i) * inner;
      out.insert(out.end(), src, src + inner);
    }
  }
  Tensor r(std::move(shape), std::move(out));
  r.set_requires_grad(t.requires_grad());
  return r;
}

std::vector<Real> take(const std::vector<Real>& v, const Index& idx) {
  std::vector<Real> out;
  for (auto i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

std::int64_t out_extent(const Node& n) {
  switch (n.kind) {
    case OpKind::Conv2d:
      return n.param("out_channels");
    case OpKind::DepthwiseConv2d:
      return n.param("channels");
    case OpKind::Linear:
      return n.param("out_features");
    default:
      return 0;
  }
}

}  // namespace

void cleanup(Graph& g) {
  for (const auto& id : std::vector<std::string>(g.node_ids())) {
    const Node& n = g.node(id);
    if (n.kind != OpKind::Identity) continue;
    const auto prods = g.producers(id);
    if (prods.size() != 1) continue;
    g.disconnect(prods[0], id);
    g.replace_uses(id, prods[0]);
    g.remove_node(id);
  }
  std::set<std::string> live;
  std::vector<std::string> stack = g.outputs();
  while (!stack.empty()) {
    auto id = stack.back();
    stack.pop_back();
    if (!live.insert(id).second) continue;
    for (const auto& p : g.producers(id)) stack.push_back(p);
  }
  for (const auto& id : std::vector<std::string>(g.node_ids())) {
    if (!live.count(id) && g.node(id).kind != OpKind::Input) g.remove_node(id);
  }
}

Graph export_supernet(const Graph& src, const std::function<int(const Node&)>& choose) {
  Graph g = src;
  for (const auto& cid : src.topo_order()) {
    if (src.node(cid).kind != OpKind::SuperNetCombiner) continue;
    const int k = choose(src.node(cid));
    const auto prods = g.producers(cid);
    if (k < 0 || k >= static_cast<int>(prods.size())) {
      throw GraphError("supernet '" + cid + "': selected branch " + std::to_string(k) + " out of range");
    }
    g.replace_uses(cid, prods[static_cast<std::size_t>(k)]);
    g.remove_node(cid);
    for (const auto& id : std::vector<std::string>(g.node_ids())) {
      Node& n = g.node(id);
      if (n.branch_of != cid) continue;
      if (n.branch_index == k) {
        n.branch_of.clear();
        n.branch_index = -1;
      } else {
        g.remove_node(id);
      }
    }
  }
  cleanup(g);
  g.validate();
  return g;
}

Graph export_pruned(const Graph& src, const SharingResult& sharing, const std::map<int, Index>& kept) {
  Graph g = src;
  const auto shapes = infer_shapes(src);
  std::map<std::string, Index> out_idx;

  for (const auto& id : src.topo_order()) {
    Node& n = g.node(id);
    const auto prods = src.producers(id);
    const Index* in = prods.empty() ? nullptr : &out_idx.at(prods[0]);
    auto in_full = [&] { return in != nullptr && static_cast<std::int64_t>(in->size()) == shapes.at(prods[0])[1]; };
    auto own_keep = [&](std::int64_t total) {
      auto it = sharing.group_of.find(id);
      if (it != sharing.group_of.end()) {
        auto k = kept.find(it->second);
        if (k != kept.end()) {
          if (k->second.empty()) {
            throw GraphError("mask group " + std::to_string(it->second) + " keeps no channel");
          }
          return k->second;
        }
      }
      return iota(total);
    };
    auto slice_bias = [&](const Index& keep) {
      if (n.has_weight("bias")) n.weights["bias"] = take(n.weights["bias"], 0, keep);
      if (n.folded_bn) {
        auto& f = *n.folded_bn;
        f.gamma = take(f.gamma, keep);
        f.beta = take(f.beta, keep);
        f.mean = take(f.mean, keep);
        f.var = take(f.var, keep);
      }
    };

    Index out;
    const bool grouped = n.kind == OpKind::Conv2d && n.param_or("groups", 1) > 1;
    switch (n.kind) {
      case OpKind::Input:
        out = iota(shapes.at(id)[1]);
        break;
      case OpKind::DepthwiseConv2d:
        out = *in;
        if (!in_full()) {
          n.weights["weight"] = take(n.weights["weight"], 0, out);
          slice_bias(out);
        }
        n.params["channels"] = static_cast<double>(out.size());
        break;
      case OpKind::Conv2d:
      case OpKind::Linear: {
        if (grouped) {
          out = *in;
          if (!in_full()) {
            n.weights["weight"] = take(n.weights["weight"], 0, out);
            slice_bias(out);
          }
          n.params["in_channels"] = n.params["out_channels"] = n.params["groups"] = static_cast<double>(out.size());
          break;
        }
        out = own_keep(shapes.at(id)[1]);
        Tensor w = n.weights["weight"];
        if (static_cast<std::int64_t>(out.size()) != w.dim(0)) {
          w = take(w, 0, out);
          slice_bias(out);
        }
        if (!in_full()) w = take(w, 1, *in);
        n.weights["weight"] = w;
        const bool conv = n.kind == OpKind::Conv2d;
        n.params[conv ? "out_channels" : "out_features"] = static_cast<double>(out.size());
        n.params[conv ? "in_channels" : "in_features"] = static_cast<double>(in->size());
        break;
      }
      case OpKind::BatchNorm:
        out = *in;
        if (!in_full()) {
          for (const char* name : {"gamma", "beta", "running_mean", "running_var"}) {
            n.weights[name] = take(n.weights[name], 0, out);
          }
        }
        n.params["channels"] = static_cast<double>(out.size());
        break;
      case OpKind::Flatten: {
        const Shape& s = shapes.at(prods[0]);
        std::int64_t k = 1;
        for (std::size_t d = 2; d < s.size(); ++d) k *= s[d];
        for (auto c : *in) {
          for (std::int64_t j = 0; j < k; ++j) out.push_back(c * k + j);
        }
        break;
      }
      case OpKind::Concat: {
        std::int64_t offset = 0;
        for (const auto& p : prods) {
          for (auto c : out_idx.at(p)) out.push_back(offset + c);
          offset += shapes.at(p)[1];
        }
        break;
      }
      case OpKind::Add:
        out = *in;
        for (const auto& p : prods) {
          if (out_idx.at(p) != out) {
            throw GraphError("Add '" + id + "': operands keep different channels after pruning");
          }
        }
        break;
      case OpKind::SuperNetCombiner:
        throw GraphError("cannot prune a graph that still contains supernet '" + id + "'");
      default:
        out = *in;
        break;
    }
    out_idx[id] = std::move(out);
  }
  cleanup(g);
  g.validate();
  (void)infer_shapes(g);
  return g;
}

nlohmann::json channel_report(const Graph& before, const Graph& after) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& id : before.topo_order()) {
    const Node& n = before.node(id);
    if (!is_weighted(n.kind)) continue;
    nlohmann::json row{{"id", id}, {"kind", std::string(kind_name(n.kind))}, {"total", out_extent(n)}};
    row["kept"] = after.has_node(id) ? out_extent(after.node(id)) : 0;
    layers.push_back(std::move(row));
  }
  return layers;
}

}  // namespace passes
FORGE_NAMESPACE_END
