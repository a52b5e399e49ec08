#include "forge/graph_io.hpp"

#include <fstream>
#include <sstream>

FORGE_NAMESPACE_BEGIN

using nlohmann::json;

namespace {

std::map<std::string, double> parse_params(const json& j, const std::string& id) {
  std::map<std::string, double> params;
  if (!j.contains("params")) return params;
  if (!j["params"].is_object()) throw ConfigError("node '" + id + "': params must be an object");
  for (const auto& [k, v] : j["params"].items()) {
    if (v.is_boolean()) {
      params[k] = v.get<bool>() ? 1.0 : 0.0;
    } else if (v.is_number()) {
      params[k] = v.get<double>();
    } else {
      throw ConfigError("node '" + id + "': parameter '" + k + "' must be numeric");
    }
  }
  return params;
}

std::vector<Real> to_reals(const json& j) {
  std::vector<Real> out;
  for (const auto& v : j) out.push_back(static_cast<Real>(v.get<double>()));
  return out;
}

Node parse_node(const json& j) {
  if (!j.is_object() || !j.contains("id") || !j.contains("kind")) {
    throw ConfigError("every node needs an 'id' and a 'kind': " + j.dump());
  }
  Node n;
  n.id = j["id"].get<std::string>();
  n.kind = parse_kind(j["kind"].get<std::string>());
  n.params = parse_params(j, n.id);
  if (j.contains("branch_of")) {
    n.branch_of = j["branch_of"].get<std::string>();
    n.branch_index = j.value("branch_index", -1);
  }
  if (j.contains("folded_bn")) {
    const auto& f = j["folded_bn"];
    FoldedBN rec;
    rec.bn_id = f.value("bn_id", std::string{});
    rec.gamma = to_reals(f.at("gamma"));
    rec.beta = to_reals(f.at("beta"));
    rec.mean = to_reals(f.at("mean"));
    rec.var = to_reals(f.at("var"));
    rec.eps = static_cast<Real>(f.value("eps", 1e-5));
    rec.momentum = static_cast<Real>(f.value("momentum", 0.1));
    rec.had_bias = f.value("had_bias", false);
    n.folded_bn = std::move(rec);
  }
  if (j.contains("weight_quant")) {
    n.weight_quant = WeightQuant{j["weight_quant"].at("bits").get<int>(),
                                 j["weight_quant"].value("bias_bits", 32)};
  }
  if (j.contains("act_quant")) {
    n.act_quant = ActQuant{j["act_quant"].at("bits").get<int>(),
                           static_cast<Real>(j["act_quant"].at("alpha").get<double>())};
  }
  if (j.contains("annotations")) {
    for (const auto& [k, v] : j["annotations"].items()) n.annotations[k] = v.get<std::string>();
  }
  return n;
}

struct Supernet {
  std::string id;
  std::vector<std::vector<json>> branches;
};

// Fills in_channels / channels / in_features from the producer shapes.
void complete_params(Graph& g) {
  const auto shapes = infer_shapes(g);
  for (const auto& id : g.node_ids()) {
    Node& n = g.node(id);
    const auto prods = g.producers(id);
    if (prods.empty()) continue;
    const Shape& in = shapes.at(prods[0]);
    switch (n.kind) {
      case OpKind::Conv2d:
        if (!n.has_param("in_channels")) n.params["in_channels"] = static_cast<double>(in[1]);
        break;
      case OpKind::DepthwiseConv2d:
      case OpKind::BatchNorm:
        if (!n.has_param("channels")) n.params["channels"] = static_cast<double>(in[1]);
        break;
      case OpKind::Linear:
        if (!n.has_param("in_features")) n.params["in_features"] = static_cast<double>(in[1]);
        break;
      default:
        break;
    }
  }
}

}  // namespace

Graph graph_from_json(const json& doc, std::uint64_t seed) {
  if (!doc.is_object() || !doc.contains("nodes")) throw ConfigError("graph description needs a 'nodes' list");
  Graph g;
  std::map<std::string, Supernet> supernets;

  if (doc.contains("inputs")) {
    for (const auto& in : doc["inputs"]) {
      if (in.is_object()) {
        json node = in;
        node["kind"] = "Input";
        if (!node.contains("params")) {
          json params = json::object();
          for (const char* k : {"channels", "height", "width", "features"}) {
            if (in.contains(k)) params[k] = in[k];
          }
          node["params"] = params;
        }
        g.add_node(parse_node(node));
      }
    }
  }

  for (const auto& j : doc["nodes"]) {
    if (j.value("kind", std::string{}) == "SuperNet") {
      Supernet sn{j.at("id").get<std::string>(), {}};
      if (!j.contains("supernet_branches") || j["supernet_branches"].empty()) {
        throw ConfigError("supernet '" + sn.id + "' needs a non-empty 'supernet_branches' list");
      }
      for (const auto& branch : j["supernet_branches"]) {
        if (!branch.is_array()) throw ConfigError("supernet '" + sn.id + "': each branch must be a list of nodes");
        sn.branches.emplace_back(branch.begin(), branch.end());
      }
      Node comb;
      comb.id = sn.id;
      comb.kind = OpKind::SuperNetCombiner;
      comb.params["branches"] = static_cast<double>(sn.branches.size());
      g.add_node(std::move(comb));
      for (std::size_t b = 0; b < sn.branches.size(); ++b) {
        std::string prev;
        auto& chain = sn.branches[b];
        if (chain.empty()) chain.push_back(json{{"id", "identity"}, {"kind", "Identity"}});
        for (const auto& bj : chain) {
          Node n = parse_node(bj);
          n.id = sn.id + ".b" + std::to_string(b) + "." + n.id;
          n.branch_of = sn.id;
          n.branch_index = static_cast<int>(b);
          const std::string nid = n.id;
          g.add_node(std::move(n));
          if (!prev.empty()) g.connect(prev, nid, 0);
          prev = nid;
        }
        g.connect(prev, sn.id, static_cast<int>(b));
      }
      supernets.emplace(sn.id, std::move(sn));
    } else {
      g.add_node(parse_node(j));
    }
  }

  for (const auto& e : doc.value("edges", json::array())) {
    if (!e.is_array() || e.size() < 2) throw ConfigError("edge must be [src, dst, slot]: " + e.dump());
    const auto src = e[0].get<std::string>(), dst = e[1].get<std::string>();
    const int slot = e.size() > 2 ? e[2].get<int>() : 0;
    if (auto it = supernets.find(dst); it != supernets.end()) {
      const auto& sn = it->second;
      for (std::size_t b = 0; b < sn.branches.size(); ++b) {
        g.connect(src, sn.id + ".b" + std::to_string(b) + "." + sn.branches[b].front().at("id").get<std::string>(), 0);
      }
    } else {
      g.connect(src, dst, slot);
    }
  }

  if (doc.contains("outputs")) {
    int k = 0;
    for (const auto& o : doc["outputs"]) {
      const auto id = o.get<std::string>();
      if (!g.has_node(id)) throw ConfigError("output '" + id + "' is not a node");
      if (g.node(id).kind != OpKind::Output) {
        Node out;
        out.id = k == 0 ? "output" : "output" + std::to_string(k);
        out.kind = OpKind::Output;
        g.add_node(std::move(out));
        g.connect(id, k == 0 ? "output" : "output" + std::to_string(k));
      }
      ++k;
    }
  }

  g.validate();
  complete_params(g);
  (void)infer_shapes(g);
  for (const auto& id : g.node_ids()) {
    Node& n = g.node(id);
    if (n.weights.empty()) init_weights(n, seed);
  }
  return g;
}

Graph parse_graph(std::string_view text, std::uint64_t seed) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("graph description is not valid JSON: ") + e.what());
  }
  return graph_from_json(doc, seed);
}

json graph_to_json(const Graph& g) {
  json doc;
  doc["inputs"] = g.inputs();
  doc["outputs"] = g.outputs();
  json nodes = json::array();
  for (const auto& id : g.node_ids()) {
    const Node& n = g.node(id);
    json j;
    j["id"] = n.id;
    j["kind"] = std::string(kind_name(n.kind));
    j["params"] = json::object();
    for (const auto& [k, v] : n.params) j["params"][k] = v;
    if (!n.branch_of.empty()) {
      j["branch_of"] = n.branch_of;
      j["branch_index"] = n.branch_index;
    }
    if (n.folded_bn) {
      const auto& f = *n.folded_bn;
      j["folded_bn"] = {{"bn_id", f.bn_id}, {"gamma", f.gamma}, {"beta", f.beta}, {"mean", f.mean},
                        {"var", f.var},     {"eps", f.eps},     {"momentum", f.momentum},
                        {"had_bias", f.had_bias}};
    }
    if (n.weight_quant) j["weight_quant"] = {{"bits", n.weight_quant->bits}, {"bias_bits", n.weight_quant->bias_bits}};
    if (n.act_quant) j["act_quant"] = {{"bits", n.act_quant->bits}, {"alpha", n.act_quant->alpha}};
    if (!n.annotations.empty()) j["annotations"] = n.annotations;
    nodes.push_back(std::move(j));
  }
  doc["nodes"] = std::move(nodes);
  json edges = json::array();
  for (const auto& e : g.edges()) edges.push_back(json::array({e.src, e.dst, e.slot}));
  doc["edges"] = std::move(edges);
  return doc;
}

ArrayMap graph_weights(const Graph& g) {
  ArrayMap out;
  for (const auto& id : g.node_ids()) {
    for (const auto& [name, t] : g.node(id).weights) {
      if (t.defined()) out.emplace(id + "." + name, t);
    }
  }
  return out;
}

void assign_weights(Graph& g, const ArrayMap& arrays) {
  for (const auto& id : g.node_ids()) {
    for (auto& [name, t] : g.node(id).weights) {
      const auto key = id + "." + name;
      auto it = arrays.find(key);
      if (it == arrays.end()) throw ConfigError("checkpoint lacks array '" + key + "'");
      if (t.defined() && it->second.shape() != t.shape()) {
        throw ShapeError("checkpoint array '" + key + "' has shape " + to_string(it->second.shape()) +
                         ", graph expects " + to_string(t.shape()));
      }
      const bool trainable = t.defined() && t.requires_grad();
      t = it->second.clone();
      t.set_requires_grad(trainable);
    }
  }
}

std::filesystem::path weights_path(const std::filesystem::path& graph_json) {
  auto p = graph_json;
  p.replace_extension(".dnft");
  return p;
}

void save_graph(const Graph& g, const std::filesystem::path& graph_json, const json& extra,
                const ArrayMap& extra_arrays) {
  json doc = graph_to_json(g);
  if (extra.is_object()) {
    for (const auto& [k, v] : extra.items()) doc[k] = v;
  }
  if (graph_json.has_parent_path()) std::filesystem::create_directories(graph_json.parent_path());
  std::ofstream out(graph_json);
  if (!out) throw ConfigError("cannot write " + graph_json.string());
  out << doc.dump(1) << '\n';
  ArrayMap arrays = graph_weights(g);
  for (const auto& [k, v] : extra_arrays) arrays[k] = v;
  write_checkpoint(weights_path(graph_json), arrays);
}

Graph load_graph(const std::filesystem::path& graph_json) {
  std::ifstream in(graph_json);
  if (!in) throw ConfigError("cannot open graph file " + graph_json.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Graph g = parse_graph(ss.str());
  const auto wp = weights_path(graph_json);
  if (std::filesystem::exists(wp)) assign_weights(g, read_checkpoint(wp));
  return g;
}

FORGE_NAMESPACE_END
