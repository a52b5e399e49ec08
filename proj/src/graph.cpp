#include "forge/graph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <queue>
#include <random>
#include <set>

FORGE_NAMESPACE_BEGIN

namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 15> kKindNames{{
    {OpKind::Input, "Input"},
    {OpKind::Output, "Output"},
    {OpKind::Conv2d, "Conv2d"},
    {OpKind::DepthwiseConv2d, "DepthwiseConv2d"},
    {OpKind::Linear, "Linear"},
    {OpKind::BatchNorm, "BatchNorm"},
    {OpKind::ReLU, "ReLU"},
    {OpKind::MaxPool, "MaxPool"},
    {OpKind::AvgPool, "AvgPool"},
    {OpKind::GlobalAvgPool, "GlobalAvgPool"},
    {OpKind::Add, "Add"},
    {OpKind::Concat, "Concat"},
    {OpKind::Flatten, "Flatten"},
    {OpKind::Identity, "Identity"},
    {OpKind::SuperNetCombiner, "SuperNetCombiner"},
}};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string edge_name(const std::string& src, const std::string& dst) {
  return "edge " + src + " -> " + dst;
}

}  // namespace

std::string_view kind_name(OpKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "?";
}

OpKind parse_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw ConfigError("unknown op kind '" + std::string(name) + "'");
}

bool is_weighted(OpKind kind) {
  return kind == OpKind::Conv2d || kind == OpKind::DepthwiseConv2d || kind == OpKind::Linear;
}

WeightMap::WeightMap(const WeightMap& other) : std::map<std::string, Tensor>() {
  for (const auto& [k, v] : other) emplace(k, v.defined() ? v.clone() : Tensor{});
}

WeightMap& WeightMap::operator=(const WeightMap& other) {
  if (this != &other) {
    WeightMap copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::int64_t Node::param(const std::string& key) const {
  auto it = params.find(key);
  if (it == params.end()) {
    throw GraphError("node '" + id + "' (" + std::string(kind_name(kind)) + ") lacks parameter '" + key + "'");
  }
  return static_cast<std::int64_t>(std::llround(it->second));
}

std::int64_t Node::param_or(const std::string& key, std::int64_t fallback) const {
  auto it = params.find(key);
  return it == params.end() ? fallback : static_cast<std::int64_t>(std::llround(it->second));
}

const Tensor& Node::weight(const std::string& name) const {
  auto it = weights.find(name);
  if (it == weights.end() || !it->second.defined()) {
    throw GraphError("node '" + id + "' is missing weight '" + name + "'");
  }
  return it->second;
}

// ---------------------------------------------------------------------------

Node& Graph::add_node(Node node) {
  if (node.id.empty()) throw GraphError("node id must not be empty");
  if (has_node(node.id)) throw GraphError("duplicate node id '" + node.id + "'");
  order_.push_back(node.id);
  auto id = node.id;
  return nodes_.emplace(id, std::move(node)).first->second;
}

void Graph::connect(const std::string& src, const std::string& dst, int slot) {
  if (!has_node(src)) throw GraphError("edge source '" + src + "' does not exist");
  if (!has_node(dst)) throw GraphError("edge target '" + dst + "' does not exist");
  for (const auto& e : edges_) {
    if (e.dst == dst && e.slot == slot) {
      throw GraphError("input slot " + std::to_string(slot) + " of '" + dst + "' already connected");
    }
  }
  edges_.push_back({src, dst, slot});
}

void Graph::disconnect(const std::string& src, const std::string& dst) {
  std::erase_if(edges_, [&](const Edge& e) { return e.src == src && e.dst == dst; });
}

void Graph::remove_node(const std::string& id) {
  if (!has_node(id)) throw GraphError("cannot remove unknown node '" + id + "'");
  std::erase_if(edges_, [&](const Edge& e) { return e.src == id || e.dst == id; });
  std::erase(order_, id);
  nodes_.erase(id);
}

void Graph::replace_uses(const std::string& from, const std::string& to) {
  for (auto& e : edges_) {
    if (e.src == from) e.src = to;
  }
}

Node& Graph::node(const std::string& id) {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw GraphError("unknown node '" + id + "'");
  return it->second;
}

const Node& Graph::node(const std::string& id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw GraphError("unknown node '" + id + "'");
  return it->second;
}

std::vector<std::string> Graph::producers(const std::string& id) const {
  std::vector<const Edge*> in;
  for (const auto& e : edges_) {
    if (e.dst == id) in.push_back(&e);
  }
  std::sort(in.begin(), in.end(), [](const Edge* a, const Edge* b) { return a->slot < b->slot; });
  std::vector<std::string> out;
  for (const auto* e : in) out.push_back(e->src);
  return out;
}

std::vector<std::string> Graph::consumers(const std::string& id) const {
  std::vector<std::string> out;
  for (const auto& e : edges_) {
    if (e.src == id && std::find(out.begin(), out.end(), e.dst) == out.end()) out.push_back(e.dst);
  }
  return out;
}

std::vector<std::string> Graph::topo_order() const {
  std::map<std::string, std::size_t> rank;
  for (std::size_t i = 0; i < order_.size(); ++i) rank[order_[i]] = i;
  std::map<std::string, int> indegree;
  for (const auto& id : order_) indegree[id] = 0;
  for (const auto& e : edges_) ++indegree[e.dst];

  using Item = std::pair<std::size_t, std::string>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> ready;
  for (const auto& id : order_) {
    if (indegree[id] == 0) ready.emplace(rank[id], id);
  }
  std::vector<std::string> out;
  while (!ready.empty()) {
    auto [r, id] = ready.top();
    ready.pop();
    out.push_back(id);
    for (const auto& e : edges_) {
      if (e.src == id && --indegree[e.dst] == 0) ready.emplace(rank[e.dst], e.dst);
    }
  }
  if (out.size() != order_.size()) throw GraphError("graph contains a cycle");
  return out;
}

std::vector<std::string> Graph::inputs() const {
  std::vector<std::string> out;
  for (const auto& id : order_) {
    if (nodes_.at(id).kind == OpKind::Input) out.push_back(id);
  }
  return out;
}

std::vector<std::string> Graph::outputs() const {
  std::vector<std::string> out;
  for (const auto& id : order_) {
    if (nodes_.at(id).kind == OpKind::Output) out.push_back(id);
  }
  return out;
}

void Graph::validate() const {
  (void)topo_order();
  if (inputs().empty()) throw GraphError("graph has no Input node");
  if (outputs().empty()) throw GraphError("graph has no Output node");
  for (const auto& id : order_) {
    const Node& n = nodes_.at(id);
    std::set<int> slots;
    for (const auto& e : edges_) {
      if (e.dst == id) slots.insert(e.slot);
    }
    const int arity = static_cast<int>(slots.size());
    if (!slots.empty() && (*slots.begin() != 0 || *slots.rbegin() != arity - 1)) {
      throw GraphError("node '" + id + "' has non-contiguous input slots");
    }
    auto want = [&](bool ok, const std::string& what) {
      if (!ok) {
        throw GraphError("node '" + id + "' (" + std::string(kind_name(n.kind)) + ") expects " + what +
                         ", has " + std::to_string(arity) + " connected inputs");
      }
    };
    switch (n.kind) {
      case OpKind::Input:
        want(arity == 0, "no inputs");
        break;
      case OpKind::Add:
      case OpKind::Concat:
        want(arity >= 2, "at least 2 inputs");
        break;
      case OpKind::SuperNetCombiner:
        want(arity >= 1 && arity == n.param_or("branches", arity), "one input per branch");
        break;
      default:
        want(arity == 1, "exactly 1 input");
    }
  }
}

// ---------------------------------------------------------------------------

ShapeMap infer_shapes(const Graph& g, std::int64_t batch) {
  ShapeMap shapes;
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    const auto prods = g.producers(id);
    auto in = [&](std::size_t i) -> const Shape& { return shapes.at(prods.at(i)); };
    auto fail = [&](const std::string& msg) -> ShapeError {
      const std::string where = prods.empty() ? "node " + id : edge_name(prods[0], id);
      return ShapeError(where + " (" + std::string(kind_name(n.kind)) + "): " + msg);
    };
    auto need_rank = [&](std::size_t r) {
      if (in(0).size() != r) {
        throw fail("expects rank-" + std::to_string(r) + " input, got " + to_string(in(0)));
      }
    };
    auto need_channels = [&](const char* key) {
      if (n.has_param(key) && n.param(key) != in(0)[1]) {
        throw fail(std::string(key) + "=" + std::to_string(n.param(key)) + " but input is " + to_string(in(0)));
      }
    };
    auto spatial = [&](std::int64_t extent, std::int64_t k, std::int64_t s, std::int64_t p) {
      const std::int64_t o = (extent + 2 * p - k) / s + 1;
      if (extent + 2 * p < k || o <= 0) {
        throw fail("kernel " + std::to_string(k) + " does not fit input " + to_string(in(0)));
      }
      return o;
    };

    Shape out;
    switch (n.kind) {
      case OpKind::Input:
        if (n.has_param("features")) {
          out = {batch, n.param("features")};
        } else {
          out = {batch, n.param("channels"), n.param("height"), n.param("width")};
        }
        for (auto e : out) {
          if (e <= 0) throw fail("input extents must be positive");
        }
        break;
      case OpKind::Conv2d:
      case OpKind::DepthwiseConv2d: {
        need_rank(4);
        const bool dw = n.kind == OpKind::DepthwiseConv2d;
        need_channels(dw ? "channels" : "in_channels");
        const auto k = n.param("kernel"), s = n.param_or("stride", 1), p = n.param_or("padding", 0);
        const auto groups = dw ? in(0)[1] : n.param_or("groups", 1);
        if (in(0)[1] % groups != 0) throw fail("input channels not divisible by groups");
        const auto cout = dw ? in(0)[1] : n.param("out_channels");
        if (cout % groups != 0) throw fail("output channels not divisible by groups");
        out = {in(0)[0], cout, spatial(in(0)[2], k, s, p), spatial(in(0)[3], k, s, p)};
        break;
      }
      case OpKind::Linear:
        need_rank(2);
        need_channels("in_features");
        out = {in(0)[0], n.param("out_features")};
        break;
      case OpKind::BatchNorm:
        if (in(0).size() != 2 && in(0).size() != 4) throw fail("expects rank 2 or 4, got " + to_string(in(0)));
        need_channels("channels");
        out = in(0);
        break;
      case OpKind::MaxPool:
      case OpKind::AvgPool: {
        need_rank(4);
        const auto k = n.param("kernel"), s = n.param_or("stride", k);
        out = {in(0)[0], in(0)[1], spatial(in(0)[2], k, s, 0), spatial(in(0)[3], k, s, 0)};
        break;
      }
      case OpKind::GlobalAvgPool:
        need_rank(4);
        out = {in(0)[0], in(0)[1], 1, 1};
        break;
      case OpKind::Flatten: {
        if (in(0).size() < 2) throw fail("needs a batch axis");
        std::int64_t f = 1;
        for (std::size_t d = 1; d < in(0).size(); ++d) f *= in(0)[d];
        out = {in(0)[0], f};
        break;
      }
      case OpKind::Add:
      case OpKind::SuperNetCombiner:
        for (std::size_t i = 1; i < prods.size(); ++i) {
          if (in(i) != in(0)) {
            const std::string what = n.kind == OpKind::Add ? "inconsistent Add operand shapes" : "branch output shapes differ";
            throw ShapeError(edge_name(prods[i], id) + ": " + what + ": " + prods[0] + " gives " +
                             to_string(in(0)) + ", " + prods[i] + " gives " + to_string(in(i)));
          }
        }
        out = in(0);
        break;
      case OpKind::Concat:
        out = in(0);
        for (std::size_t i = 1; i < prods.size(); ++i) {
          const Shape& s = in(i);
          bool ok = s.size() == out.size() && s.size() >= 2;
          for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == 1 || s[d] == out[d];
          if (!ok) {
            throw ShapeError(edge_name(prods[i], id) + ": inconsistent Concat operand shapes: " + prods[0] +
                             " gives " + to_string(in(0)) + ", " + prods[i] + " gives " + to_string(s));
          }
          out[1] += s[1];
        }
        break;
      case OpKind::ReLU:
      case OpKind::Identity:
      case OpKind::Output:
        out = in(0);
        break;
    }
    shapes[id] = std::move(out);
  }
  return shapes;
}

void init_weights(Node& n, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ fnv1a(n.id));
  auto he = [&](Shape shape, std::int64_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_values()) v = static_cast<Real>(dist(rng));
    return t.set_requires_grad(true);
  };
  auto zeros = [](std::int64_t c, bool trainable) { return Tensor(Shape{c}).set_requires_grad(trainable); };
  auto bias = [&](std::int64_t c) {
    if (n.param_or("bias", 1) != 0) n.weights["bias"] = zeros(c, true);
  };

  n.weights.clear();
  switch (n.kind) {
    case OpKind::Conv2d: {
      const auto cin = n.param("in_channels"), cout = n.param("out_channels"), k = n.param("kernel");
      const auto g = n.param_or("groups", 1);
      n.weights["weight"] = he({cout, cin / g, k, k}, cin / g * k * k);
      bias(cout);
      break;
    }
    case OpKind::DepthwiseConv2d: {
      const auto c = n.param("channels"), k = n.param("kernel");
      n.weights["weight"] = he({c, 1, k, k}, k * k);
      bias(c);
      break;
    }
    case OpKind::Linear: {
      const auto f = n.param("in_features"), o = n.param("out_features");
      n.weights["weight"] = he({o, f}, f);
      bias(o);
      break;
    }
    case OpKind::BatchNorm: {
      const auto c = n.param("channels");
      n.weights["gamma"] = Tensor(Shape{c}, Real{1}).set_requires_grad(true);
      n.weights["beta"] = zeros(c, true);
      n.weights["running_mean"] = zeros(c, false);
      n.weights["running_var"] = Tensor(Shape{c}, Real{1});
      break;
    }
    case OpKind::SuperNetCombiner:
      n.weights["theta"] = zeros(n.param("branches"), true);
      break;
    default:
      break;
  }
}

std::int64_t count_parameters(const Graph& g) {
  std::int64_t total = 0;
  for (const auto& id : g.node_ids()) {
    const Node& n = g.node(id);
    if (!is_weighted(n.kind)) continue;
    for (const char* name : {"weight", "bias"}) {
      auto it = n.weights.find(name);
      if (it != n.weights.end() && it->second.defined()) total += it->second.numel();
    }
  }
  return total;
}

FORGE_NAMESPACE_END
