#include <cmath>

#include "forge/passes.hpp"

FORGE_NAMESPACE_BEGIN
namespace passes {

namespace {

std::int64_t out_channels(const Node& n) { return n.weight("weight").dim(0); }

// Reason the BatchNorm cannot be folded, empty when it can.
std::string fold_blocker(const Graph& g, const Node& bn) {
  const auto prods = g.producers(bn.id);
  if (prods.size() != 1) return "has no single producer";
  const Node& p = g.node(prods[0]);
  if (!is_weighted(p.kind)) return "follows " + std::string(kind_name(p.kind)) + " '" + p.id + "', not a Conv/Linear";
  if (g.consumers(p.id).size() != 1) return "producer '" + p.id + "' also feeds other nodes";
  if (p.folded_bn) return "producer '" + p.id + "' already absorbed a BatchNorm";
  if (p.weight_quant) return "producer '" + p.id + "' is quantized";
  if (out_channels(p) != bn.weight("gamma").numel()) return "channel count differs from '" + p.id + "'";
  return {};
}

}  // namespace

bool has_foldable_bn(const Graph& g) {
  for (const auto& id : g.node_ids()) {
    const Node& n = g.node(id);
    if (n.kind == OpKind::BatchNorm && fold_blocker(g, n).empty()) return true;
  }
  return false;
}

FoldResult fold_bn(const Graph& src) {
  FoldResult res{src, {}, {}};
  Graph& g = res.graph;
  for (const auto& id : src.topo_order()) {
    const Node& bn = g.node(id);
    if (bn.kind != OpKind::BatchNorm) continue;
    if (auto why = fold_blocker(g, bn); !why.empty()) {
      res.warnings.push_back("BatchNorm '" + id + "' left in place: " + why);
      continue;
    }
    const std::string pid = g.producers(id)[0];
    Node& p = g.node(pid);

    FoldedBN rec;
    rec.bn_id = id;
    auto vec = [&](const char* name) {
      const auto v = bn.weight(name).values();
      return std::vector<Real>(v.begin(), v.end());
    };
    rec.gamma = vec("gamma");
    rec.beta = vec("beta");
    rec.mean = vec("running_mean");
    rec.var = vec("running_var");
    if (bn.has_param("eps")) rec.eps = static_cast<Real>(bn.params.at("eps"));
    if (bn.has_param("momentum")) rec.momentum = static_cast<Real>(bn.params.at("momentum"));
    rec.had_bias = p.has_weight("bias");

    const std::int64_t cout = out_channels(p);
    Tensor& w = p.weights["weight"];
    const std::int64_t per = w.numel() / cout;
    auto wv = w.mutable_values();
    if (!rec.had_bias) p.weights["bias"] = Tensor(Shape{cout}).set_requires_grad(w.requires_grad());
    auto bv = p.weights["bias"].mutable_values();
    for (std::int64_t c = 0; c < cout; ++c) {
      const Real s = rec.gamma[c] / std::sqrt(rec.var[c] + rec.eps);
      for (std::int64_t i = 0; i < per; ++i) wv[c * per + i] *= s;
      bv[c] = (bv[c] - rec.mean[c]) * s + rec.beta[c];
    }
    p.params["bias"] = 1;
    p.folded_bn = std::move(rec);

    g.replace_uses(id, pid);
    g.remove_node(id);
    res.folded.push_back(id);
  }
  return res;
}

Graph unfold_bn(const Graph& src) {
  Graph g = src;
  for (const auto& pid : src.topo_order()) {
    Node& p = g.node(pid);
    if (!p.folded_bn) continue;
    const FoldedBN rec = *p.folded_bn;
    const std::int64_t cout = out_channels(p);
    Tensor& w = p.weights["weight"];
    const std::int64_t per = w.numel() / cout;
    auto wv = w.mutable_values();
    auto bv = p.weights.at("bias").mutable_values();
    for (std::int64_t c = 0; c < cout; ++c) {
      const Real s = rec.gamma[c] / std::sqrt(rec.var[c] + rec.eps);
      if (s == 0) throw NumericError("cannot unfold BatchNorm into '" + pid + "': gamma is zero on channel " + std::to_string(c));
      for (std::int64_t i = 0; i < per; ++i) wv[c * per + i] /= s;
      bv[c] = (bv[c] - rec.beta[c]) / s + rec.mean[c];
    }
    if (!rec.had_bias) {
      p.weights.erase("bias");
      p.params["bias"] = 0;
    }
    p.folded_bn.reset();

    Node bn;
    bn.id = rec.bn_id.empty() || g.has_node(rec.bn_id) ? pid + ".bn" : rec.bn_id;
    bn.kind = OpKind::BatchNorm;
    bn.params["channels"] = static_cast<double>(cout);
    bn.params["eps"] = rec.eps;
    bn.params["momentum"] = rec.momentum;
    bn.branch_of = p.branch_of;
    bn.branch_index = p.branch_index;
    auto vec = [](const std::vector<Real>& v, bool trainable) {
      return Tensor(Shape{static_cast<std::int64_t>(v.size())}, v).set_requires_grad(trainable);
    };
    bn.weights["gamma"] = vec(rec.gamma, true);
    bn.weights["beta"] = vec(rec.beta, true);
    bn.weights["running_mean"] = vec(rec.mean, false);
    bn.weights["running_var"] = vec(rec.var, false);
    const std::string bid = bn.id;
    g.add_node(std::move(bn));
    g.replace_uses(pid, bid);
    g.connect(pid, bid, 0);
  }
  return g;
}

}  // namespace passes
FORGE_NAMESPACE_END
