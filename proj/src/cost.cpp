#include "forge/cost.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "forge/ops.hpp"
#include "forge/supernet.hpp"

FORGE_NAMESPACE_BEGIN
namespace cost {

namespace {

Tensor num(double v) { return Tensor::scalar(static_cast<Real>(v)); }
Tensor mul(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }

Tensor weight_count(const ParamBag& b) {
  return mul(mul(get(b, "out_channels"), get(b, "group_in_channels")), mul(get(b, "kernel_h"), get(b, "kernel_w")));
}

Tensor bias_count(const ParamBag& b) { return mul(get(b, "has_bias"), get(b, "out_channels")); }

Tensor builtin_params(const ParamBag& b, const nlohmann::json&) { return ops::add(weight_count(b), bias_count(b)); }

Tensor builtin_bytes(const ParamBag& b, const nlohmann::json&) {
  Tensor bits = ops::add(mul(weight_count(b), get(b, "weight_bits")), mul(bias_count(b), get(b, "bias_bits")));
  return ops::mul_scalar(bits, Real(0.125));
}

Tensor builtin_macs(const ParamBag& b, const nlohmann::json&) {
  return mul(weight_count(b), mul(get(b, "out_height"), get(b, "out_width")));
}

}  // namespace

const Tensor& get(const ParamBag& bag, const std::string& name) {
  auto it = bag.find(name);
  if (it == bag.end()) throw ConfigError("cost parameter bag has no entry '" + name + "'");
  return it->second;
}

Registry::Registry() {
  fns_["params"] = builtin_params;
  fns_["params_bytes"] = builtin_bytes;
  fns_["macs"] = builtin_macs;
}

void Registry::add(const std::string& name, CostFn fn) { fns_[name] = std::move(fn); }

const CostFn& Registry::get(const std::string& name) const {
  auto it = fns_.find(name);
  if (it == fns_.end()) throw ConfigError("unknown cost function '" + name + "'");
  return it->second;
}

CostSpec::CostSpec(std::string name, std::vector<Rule> rules, Default fallback, const Registry& registry)
    : name_(std::move(name)), rules_(std::move(rules)), fallback_(fallback) {
  for (const auto& r : rules_) fns_.push_back(registry.get(r.cost));
}

CostSpec CostSpec::builtin(const std::string& name) {
  Registry reg;
  if (name != "params" && name != "params_bytes" && name != "macs") {
    throw ConfigError("unknown builtin cost '" + name + "' (expected params, params_bytes or macs)");
  }
  std::vector<Rule> rules;
  for (OpKind k : {OpKind::Conv2d, OpKind::DepthwiseConv2d, OpKind::Linear}) {
    rules.push_back(Rule{k, {}, name, nlohmann::json::object()});
  }
  return CostSpec(name, std::move(rules), Default::Zero, reg);
}

CostSpec CostSpec::from_json(const nlohmann::json& doc, const Registry& registry) {
  if (!doc.is_object()) throw ConfigError("cost spec must be a JSON object");
  const auto def = doc.value("default", std::string("zero"));
  if (def != "zero" && def != "error") throw ConfigError("cost spec default must be 'zero' or 'error'");
  std::vector<Rule> rules;
  for (const auto& r : doc.value("rules", nlohmann::json::array())) {
    Rule rule;
    if (r.contains("match")) {
      const auto& m = r["match"];
      if (m.contains("kind")) rule.kind = parse_kind(m["kind"].get<std::string>());
      if (m.contains("attrs")) {
        for (const auto& [k, v] : m["attrs"].items()) rule.attrs[k] = v.get<double>();
      }
    }
    rule.cost = r.at("cost").get<std::string>();
    rule.args = r.value("args", nlohmann::json::object());
    rules.push_back(std::move(rule));
  }
  return CostSpec(doc.value("name", std::string("custom")), std::move(rules),
                  def == "zero" ? Default::Zero : Default::Error, registry);
}

CostSpec CostSpec::load(const std::string& name_or_path, const Registry& registry) {
  if (!std::filesystem::exists(name_or_path)) return builtin(name_or_path);
  std::ifstream in(name_or_path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cost spec " + name_or_path + ": " + e.what());
  }
  return from_json(doc, registry);
}

const Rule* CostSpec::match(const Node& n) const {
  for (const auto& r : rules_) {
    if (r.kind && *r.kind != n.kind) continue;
    bool ok = true;
    for (const auto& [k, v] : r.attrs) {
      auto it = n.params.find(k);
      ok = ok && it != n.params.end() && it->second == v;
    }
    if (ok) return &r;
  }
  return nullptr;
}

Tensor CostSpec::evaluate(const Node& n, const ParamBag& bag) const {
  const Rule* r = match(n);
  if (r == nullptr) {
    if (fallback_ == Default::Error) {
      throw ConfigError("cost spec '" + name_ + "' has no rule for node '" + n.id + "' (" +
                        std::string(kind_name(n.kind)) + ")");
    }
    return num(0);
  }
  return fns_[static_cast<std::size_t>(r - rules_.data())](bag, r->args);
}

ParamBag static_bag(const Graph& g, const Node& n, const ShapeMap& shapes) {
  ParamBag b;
  const Shape& out = shapes.at(n.id);
  const auto prods = g.producers(n.id);
  const Shape in = prods.empty() ? out : shapes.at(prods[0]);
  const bool spatial = out.size() == 4;
  const std::int64_t cin = in.size() > 1 ? in[1] : 1;
  const std::int64_t cout = out.size() > 1 ? out[1] : 1;

  std::int64_t kernel = 1, groups = 1;
  if (n.kind == OpKind::Conv2d || n.kind == OpKind::DepthwiseConv2d || n.kind == OpKind::MaxPool ||
      n.kind == OpKind::AvgPool) {
    kernel = n.param_or("kernel", 1);
  }
  if (n.kind == OpKind::Conv2d) groups = n.param_or("groups", 1);
  if (n.kind == OpKind::DepthwiseConv2d) groups = cin;

  b["out_channels"] = num(static_cast<double>(cout));
  b["in_channels"] = num(static_cast<double>(cin));
  b["group_in_channels"] = num(static_cast<double>(cin / groups));
  b["kernel_h"] = b["kernel_w"] = b["kernel_size"] = num(static_cast<double>(kernel));
  b["stride"] = num(static_cast<double>(n.param_or("stride", n.kind == OpKind::MaxPool ? kernel : 1)));
  b["padding"] = num(static_cast<double>(n.param_or("padding", 0)));
  b["groups"] = num(static_cast<double>(groups));
  b["out_height"] = num(spatial ? static_cast<double>(out[2]) : 1.0);
  b["out_width"] = num(spatial ? static_cast<double>(out[3]) : 1.0);
  b["in_features"] = num(static_cast<double>(cin));
  b["out_features"] = num(static_cast<double>(cout));
  b["has_bias"] = num(n.has_weight("bias") ? 1.0 : 0.0);

  int wbits = 32, bbits = 32, ibits = 32, obits = 32;
  if (n.weight_quant) {
    wbits = n.weight_quant->bits;
    bbits = n.weight_quant->bias_bits;
  }
  if (!prods.empty() && g.node(prods[0]).act_quant) ibits = g.node(prods[0]).act_quant->bits;
  if (n.act_quant) obits = n.act_quant->bits;
  b["weight_bits"] = num(wbits);
  b["bias_bits"] = num(bbits);
  b["in_bits"] = num(ibits);
  b["out_bits"] = num(obits);
  return b;
}

Tensor graph_cost(const Graph& g, const CostSpec& spec, const BagFn& bag) {
  Tensor total = num(0);
  // branch costs per combiner, one accumulator per branch
  std::map<std::string, std::vector<Tensor>> branch;
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    if (n.kind == OpKind::SuperNetCombiner) {
      branch[id].resize(static_cast<std::size_t>(n.weight("theta").numel()));
    }
  }
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    Tensor c = spec.match(n) != nullptr ? spec.evaluate(n, bag(n)) : spec.evaluate(n, {});
    if (!n.branch_of.empty()) {
      auto& slot = branch.at(n.branch_of).at(static_cast<std::size_t>(n.branch_index));
      slot = slot.defined() ? ops::add(slot, c) : c;
    } else {
      total = ops::add(total, c);
    }
  }
  for (auto& [cid, costs] : branch) {
    for (auto& c : costs) {
      if (!c.defined()) c = num(0);
    }
    total = ops::add(total, supernet::expected_branch_cost(g.node(cid).weight("theta"), costs));
  }
  return total;
}

Tensor get_cost(const Graph& g, const CostSpec& spec) {
  const auto shapes = infer_shapes(g);
  return graph_cost(g, spec, [&](const Node& n) { return static_bag(g, n, shapes); });
}

Tensor combine_costs(const Tensor& task_loss, const std::map<std::string, Tensor>& costs, std::span<const Term> terms) {
  Tensor total = task_loss;
  for (const auto& t : terms) {
    auto it = costs.find(t.cost);
    if (it == costs.end()) throw ConfigError("no cost named '" + t.cost + "' was computed");
    const Real v = it->second.item();
    if (!std::isfinite(v)) throw NumericError("cost '" + t.cost + "' is not finite");
    if (t.lambda == 0) continue;
    Tensor c = it->second;
    if (t.budget) c = ops::relu(ops::add_scalar(c, static_cast<Real>(-*t.budget)));
    total = ops::add(total, ops::mul_scalar(c, static_cast<Real>(t.lambda)));
  }
  return total;
}

}  // namespace cost
FORGE_NAMESPACE_END
