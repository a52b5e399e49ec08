#include "forge/mps.hpp"

#include <algorithm>

#include "forge/ops.hpp"
#include "forge/passes.hpp"

FORGE_NAMESPACE_BEGIN
namespace mps {

namespace {

Tensor quantize(const Tensor& t, const PrecisionChoice& c, int bits) {
  if (c.role == Role::Weight) return ops::fake_quant_weight_minmax(t, bits);
  return ops::fake_quant_act_pact(t, bits, c.alpha);
}

void check_bits(const std::vector<int>& bits) {
  if (bits.empty()) throw ConfigError("mixed-precision search needs a non-empty bitwidth set");
  for (int b : bits) {
    if (b < 2) throw ConfigError("bitwidth " + std::to_string(b) + " is below the minimum of 2");
  }
}

Tensor new_logits(std::size_t n) { return Tensor(Shape{static_cast<std::int64_t>(n)}).set_requires_grad(true); }

}  // namespace

Tensor effective_tensor(const Tensor& t, const PrecisionChoice& choice, bool discrete, int min_bits) {
  check_bits(choice.bits);
  if (discrete) return quantize(t, choice, std::max(finalize(choice), min_bits));
  std::vector<Tensor> variants;
  for (int b : choice.bits) variants.push_back(quantize(t, choice, std::max(b, min_bits)));
  return ops::weighted_sum(variants, ops::softmax(choice.theta));
}

Tensor effective_bitwidth(const PrecisionChoice& choice, int min_bits) {
  check_bits(choice.bits);
  std::vector<Real> bits;
  for (int b : choice.bits) bits.push_back(static_cast<Real>(std::max(b, min_bits)));
  return ops::dot(ops::softmax(choice.theta), Tensor(Shape{static_cast<std::int64_t>(bits.size())}, bits));
}

int finalize(const PrecisionChoice& choice) {
  check_bits(choice.bits);
  const auto v = choice.theta.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best] || (v[i] == v[best] && choice.bits[i] > choice.bits[best])) best = i;
  }
  return choice.bits[best];
}

MpsMethod::MpsMethod(const Graph& g, const Options& opt) {
  check_bits(opt.bits);
  if (!(opt.alpha_init > 0)) throw ConfigError("PACT alpha must be initialized to a positive value");
  for (const auto& id : g.node_ids()) {
    if (g.node(id).kind == OpKind::SuperNetCombiner) {
      throw GraphError("mixed-precision search cannot attach to supernet '" + id + "'; export it first");
    }
  }
  if (passes::has_foldable_bn(g)) {
    throw GraphError("mixed-precision search needs folded BatchNorm layers; run the fold_bn pass first");
  }
  shapes_ = infer_shapes(g);
  auto sel = passes::identify_targets(g, opt.exclude);
  warnings_ = sel.warnings;

  for (const auto& t : sel.targets) {
    PrecisionChoice c;
    c.owner = t + ".weight";
    c.role = Role::Weight;
    c.bits = opt.bits;
    c.theta = new_logits(opt.bits.size());
    c.members = {t};
    weight_index_[t] = weights_.size();
    weights_.push_back(std::move(c));
  }

  // Activation quantizers sit on producer outputs; operands of one Add or
  // Concat share theirs.
  std::map<std::string, std::string> parent;
  auto find = [&](std::string x) {
    while (parent.at(x) != x) x = parent.at(x);
    return x;
  };
  auto touch = [&](const std::string& x) { parent.emplace(x, x); };
  for (const auto& t : sel.targets) touch(g.producers(t).at(0));
  for (const auto& id : g.topo_order()) {
    const OpKind k = g.node(id).kind;
    if (k != OpKind::Add && k != OpKind::Concat) continue;
    const auto prods = g.producers(id);
    for (const auto& p : prods) touch(p);
    for (const auto& p : prods) {
      const auto a = find(prods[0]), b = find(p);
      if (a != b) parent[b] = a;
    }
  }
  std::map<std::string, std::size_t> root_choice;
  for (const auto& id : g.topo_order()) {
    if (!parent.count(id)) continue;
    const auto root = find(id);
    auto it = root_choice.find(root);
    if (it == root_choice.end()) {
      PrecisionChoice c;
      c.owner = id + ".act";
      c.role = Role::Activation;
      c.bits = opt.bits;
      c.theta = new_logits(opt.bits.size());
      c.alpha = Tensor::scalar(opt.alpha_init).set_requires_grad(true);
      it = root_choice.emplace(root, acts_.size()).first;
      acts_.push_back(std::move(c));
    }
    acts_[it->second].members.push_back(id);
    act_index_[id] = it->second;
  }
}

const PrecisionChoice* MpsMethod::activation_of(const std::string& node) const {
  auto it = act_index_.find(node);
  return it == act_index_.end() ? nullptr : &acts_[it->second];
}

const PrecisionChoice* MpsMethod::weight_of(const std::string& node) const {
  auto it = weight_index_.find(node);
  return it == weight_index_.end() ? nullptr : &weights_[it->second];
}

Tensor MpsMethod::weight(const Node& n, const std::string& name, const Tensor& w, const ExecOptions& opt) const {
  const PrecisionChoice* c = weight_of(n.id);
  if (c == nullptr) return w;
  return effective_tensor(w, *c, opt.discrete, name == "bias" ? kMinBiasBits : 0);
}

Tensor MpsMethod::output(const Node& n, const Tensor& y, const ExecOptions& opt) const {
  const PrecisionChoice* c = activation_of(n.id);
  if (c == nullptr) return y;
  return effective_tensor(y, *c, opt.discrete);
}

std::vector<Tensor> MpsMethod::arch_parameters() const {
  std::vector<Tensor> out;
  for (const auto& c : weights_) out.push_back(c.theta);
  for (const auto& c : acts_) out.push_back(c.theta);
  return out;
}

std::vector<Tensor> MpsMethod::extra_weight_parameters() const {
  std::vector<Tensor> out;
  for (const auto& c : acts_) out.push_back(c.alpha);
  return out;
}

Tensor MpsMethod::get_cost(const Graph& g, const cost::CostSpec& spec) const {
  return cost::graph_cost(g, spec, [&](const Node& n) {
    cost::ParamBag bag = cost::static_bag(g, n, shapes_);
    if (const auto* c = weight_of(n.id)) {
      bag["weight_bits"] = effective_bitwidth(*c);
      bag["bias_bits"] = effective_bitwidth(*c, kMinBiasBits);
    }
    const auto prods = g.producers(n.id);
    if (!prods.empty()) {
      if (const auto* c = activation_of(prods[0])) bag["in_bits"] = effective_bitwidth(*c);
    }
    if (const auto* c = activation_of(n.id)) bag["out_bits"] = effective_bitwidth(*c);
    return bag;
  });
}

Graph MpsMethod::export_graph(const Graph& g, nlohmann::json* report) const {
  Graph out = g;
  nlohmann::json wrep = nlohmann::json::array(), arep = nlohmann::json::array();
  for (const auto& c : weights_) {
    const int bits = finalize(c);
    Node& n = out.node(c.members.front());
    n.weight_quant = WeightQuant{bits, std::max(bits, kMinBiasBits)};
    wrep.push_back({{"node", n.id},
                    {"bits", bits},
                    {"bias_bits", n.weight_quant->bias_bits},
                    {"scale", ops::minmax_scale(n.weight("weight").values(), bits)}});
  }
  for (const auto& c : acts_) {
    const int bits = finalize(c);
    const Real alpha = c.alpha.item();
    for (const auto& m : c.members) out.node(m).act_quant = ActQuant{bits, alpha};
    arep.push_back({{"owner", c.owner},
                    {"members", c.members},
                    {"bits", bits},
                    {"alpha", alpha},
                    {"scale", alpha / static_cast<Real>((std::int64_t{1} << bits) - 1)}});
  }
  passes::cleanup(out);
  if (report != nullptr) {
    *report = {{"method", "mps"}, {"weights", wrep}, {"activations", arep}, {"warnings", warnings_}};
  }
  return out;
}

ArrayMap MpsMethod::state() const {
  ArrayMap out;
  for (const auto& c : weights_) out["mps." + c.owner + ".theta"] = c.theta;
  for (const auto& c : acts_) {
    out["mps." + c.owner + ".theta"] = c.theta;
    out["mps." + c.owner + ".alpha"] = c.alpha;
  }
  return out;
}

SearchableModel make_mps(const Graph& seed, const Options& opt) {
  Graph g = opt.fold ? passes::fold_bn(seed).graph : seed;
  auto method = std::make_unique<MpsMethod>(g, opt);
  return SearchableModel(std::move(g), std::move(method));
}

double checkpoint_bytes(const Graph& exported, const ArrayMap& arrays) {
  double bits = 0;
  for (const auto& id : exported.node_ids()) {
    const Node& n = exported.node(id);
    if (!is_weighted(n.kind)) continue;
    const int wb = n.weight_quant ? n.weight_quant->bits : 32;
    const int bb = n.weight_quant ? n.weight_quant->bias_bits : 32;
    if (auto it = arrays.find(id + ".weight"); it != arrays.end()) bits += static_cast<double>(it->second.numel()) * wb;
    if (auto it = arrays.find(id + ".bias"); it != arrays.end()) bits += static_cast<double>(it->second.numel()) * bb;
  }
  return bits / 8;
}

}  // namespace mps
FORGE_NAMESPACE_END
