#include "forge/passes.hpp"

#include <algorithm>
#include <numeric>

#include "forge/ops.hpp"

FORGE_NAMESPACE_BEGIN
namespace passes {

TargetSelection identify_targets(const Graph& g, std::span<const std::string> exclude) {
  TargetSelection sel;
  std::vector<bool> used(exclude.size(), false);
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    if (!is_weighted(n.kind)) continue;
    bool excluded = false;
    for (std::size_t r = 0; r < exclude.size(); ++r) {
      if (exclude[r] == id || exclude[r] == kind_name(n.kind)) {
        used[r] = true;
        excluded = true;
      }
    }
    if (!excluded) sel.targets.push_back(id);
  }
  for (std::size_t r = 0; r < exclude.size(); ++r) {
    if (!used[r]) sel.warnings.push_back("exclusion rule '" + exclude[r] + "' matched no layer");
  }
  return sel;
}

std::int64_t ChannelLayout::width() const {
  std::int64_t w = 0;
  for (const auto& s : segments) w += s.channels * s.multiplier;
  return w;
}

namespace {

class UnionFind {
 public:
  int make(std::int64_t size, std::string frozen_reason) {
    parent_.push_back(static_cast<int>(parent_.size()));
    size_.push_back(size);
    reason_.push_back(std::move(frozen_reason));
    owner_.emplace_back();
    return parent_.back();
  }

  int find(int x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }

  void unite(int a, int b, const std::string& where) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (size_[a] != size_[b]) {
      throw GraphError("mask sharing at '" + where + "': group of '" + owner_[a] + "' has " +
                       std::to_string(size_[a]) + " channels, group of '" + owner_[b] + "' has " +
                       std::to_string(size_[b]));
    }
    if (b < a) std::swap(a, b);
    parent_[b] = a;
    if (reason_[a].empty()) reason_[a] = reason_[b];
    if (owner_[a].empty()) owner_[a] = owner_[b];
  }

  void freeze(int x, const std::string& reason) {
    x = find(x);
    if (reason_[x].empty()) reason_[x] = reason;
  }

  void set_owner(int x, const std::string& id) {
    x = find(x);
    if (owner_[x].empty()) owner_[x] = id;
  }

  std::int64_t size(int x) { return size_[find(x)]; }
  const std::string& reason(int x) { return reason_[find(x)]; }

 private:
  std::vector<int> parent_;
  std::vector<std::int64_t> size_;
  std::vector<std::string> reason_;
  std::vector<std::string> owner_;
};

bool same_structure(const ChannelLayout& a, const ChannelLayout& b) {
  if (a.segments.size() != b.segments.size()) return false;
  for (std::size_t i = 0; i < a.segments.size(); ++i) {
    if (a.segments[i].channels != b.segments[i].channels ||
        a.segments[i].multiplier != b.segments[i].multiplier) {
      return false;
    }
  }
  return true;
}

}  // namespace

SharingResult analyze_sharing(const Graph& g, std::span<const std::string> targets) {
  const auto shapes = infer_shapes(g);
  const auto is_target = [&](const std::string& id) {
    return std::find(targets.begin(), targets.end(), id) != targets.end();
  };

  UnionFind uf;
  std::map<std::string, ChannelLayout> layouts;
  std::map<std::string, int> member_group;
  std::vector<std::string> member_order;

  auto add_member = [&](const std::string& id, int grp) {
    member_group[id] = grp;
    member_order.push_back(id);
    uf.set_owner(grp, id);
  };

  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    const auto prods = g.producers(id);
    const Shape& out = shapes.at(id);
    ChannelLayout lay;
    auto input_layout = [&]() -> const ChannelLayout& { return layouts.at(prods.at(0)); };

    bool depthwise = n.kind == OpKind::DepthwiseConv2d;
    if (n.kind == OpKind::Conv2d) {
      const auto groups = n.param_or("groups", 1);
      if (groups > 1) {
        if (groups == out[1] && groups == shapes.at(prods[0])[1]) {
          depthwise = true;
        } else {
          throw GraphError("grouped convolution '" + id + "' with " + std::to_string(groups) +
                           " groups is not supported by channel search");
        }
      }
    }

    if (n.kind == OpKind::SuperNetCombiner) {
      throw GraphError("channel search cannot analyze supernet combiner '" + id +
                       "'; export the supernet first");
    }
    if (n.kind == OpKind::Input) {
      const int grp = uf.make(out[1], "graph input '" + id + "'");
      uf.set_owner(grp, id);
      lay.segments.push_back({grp, out[1], 1});
    } else if (depthwise) {
      lay = input_layout();
      if (is_target(id) && lay.segments.size() == 1 && lay.segments[0].multiplier == 1) {
        add_member(id, lay.segments[0].group);
      }
    } else if (n.kind == OpKind::Conv2d || n.kind == OpKind::Linear) {
      const bool target = is_target(id);
      const int grp = uf.make(out[1], target ? "" : "excluded layer '" + id + "'");
      uf.set_owner(grp, id);
      if (target) add_member(id, grp);
      lay.segments.push_back({grp, out[1], 1});
    } else if (n.kind == OpKind::Flatten) {
      const Shape& in = shapes.at(prods[0]);
      std::int64_t k = 1;
      for (std::size_t d = 2; d < in.size(); ++d) k *= in[d];
      lay = input_layout();
      for (auto& s : lay.segments) s.multiplier *= k;
    } else if (n.kind == OpKind::Concat) {
      for (const auto& p : prods) {
        const auto& pl = layouts.at(p);
        lay.segments.insert(lay.segments.end(), pl.segments.begin(), pl.segments.end());
      }
    } else if (n.kind == OpKind::Add) {
      lay = input_layout();
      bool aligned = true;
      for (const auto& p : prods) aligned = aligned && same_structure(layouts.at(p), lay);
      if (aligned) {
        for (const auto& p : prods) {
          const auto& pl = layouts.at(p);
          for (std::size_t i = 0; i < pl.segments.size(); ++i) {
            uf.unite(lay.segments[i].group, pl.segments[i].group, id);
          }
        }
      } else {
        for (const auto& p : prods) {
          for (const auto& s : layouts.at(p).segments) {
            uf.freeze(s.group, "Add '" + id + "' mixes differently concatenated operands");
          }
        }
      }
    } else {
      lay = input_layout();
      if (n.kind == OpKind::Output) {
        for (const auto& s : lay.segments) uf.freeze(s.group, "reaches graph output '" + id + "'");
      }
    }
    layouts[id] = std::move(lay);
  }

  // Number groups by their first member in topological order.
  SharingResult res;
  std::map<int, int> public_id;
  for (const auto& m : member_order) {
    const int root = uf.find(member_group[m]);
    auto [it, fresh] = public_id.emplace(root, static_cast<int>(public_id.size()));
    if (fresh) {
      MaskGroup mg;
      mg.id = it->second;
      mg.size = uf.size(root);
      mg.frozen = !uf.reason(root).empty();
      mg.frozen_reason = uf.reason(root);
      res.groups.push_back(std::move(mg));
    }
    auto& mg = res.groups[it->second];
    const Node& n = g.node(m);
    const auto channels = shapes.at(m)[1];
    if (channels != mg.size) {
      throw GraphError("mask group " + std::to_string(mg.id) + ": '" + m + "' has " + std::to_string(channels) +
                       " channels, '" + mg.members.front() + "' has " + std::to_string(mg.size));
    }
    (void)n;
    mg.members.push_back(m);
    res.group_of[m] = it->second;
  }
  for (auto& [id, lay] : layouts) {
    for (auto& s : lay.segments) {
      auto it = public_id.find(uf.find(s.group));
      s.group = it == public_id.end() ? -1 : it->second;
    }
  }
  res.layouts = std::move(layouts);
  return res;
}

std::vector<MaskGroup> share_masks(const Graph& g, std::span<const std::string> targets) {
  return analyze_sharing(g, targets).groups;
}

// ---------------------------------------------------------------------------

std::string_view transform_name(ShapeCalculator::Transform t) {
  using T = ShapeCalculator::Transform;
  switch (t) {
    case T::Identity:
      return "identity";
    case T::MultiplyByK:
      return "multiply";
    case T::SumOfInputs:
      return "sum";
    case T::Constant:
      return "constant";
    case T::MaskGroup:
      return "mask";
  }
  return "?";
}

CalculatorTable attach_shape_calculators(Graph& g, const SharingResult& sharing) {
  using T = ShapeCalculator::Transform;
  const auto shapes = infer_shapes(g);
  CalculatorTable table;
  std::map<int, std::shared_ptr<ShapeCalculator>> group_calc;
  // The node whose calculator actually defines the extent seen at `id`.
  std::map<std::string, std::string> defining;

  for (const auto& id : g.topo_order()) {
    Node& n = g.node(id);
    const auto prods = g.producers(id);
    std::shared_ptr<ShapeCalculator> calc;
    auto link_of = [&](const std::string& p) { return defining.at(p); };

    if (auto it = sharing.group_of.find(id); it != sharing.group_of.end()) {
      auto& shared = group_calc[it->second];
      if (!shared) {
        shared = std::make_shared<ShapeCalculator>();
        shared->transform = T::MaskGroup;
        shared->group = it->second;
        shared->constant = shapes.at(id)[1];
      }
      calc = shared;
      defining[id] = id;
    } else if (n.kind == OpKind::Input || n.kind == OpKind::Conv2d || n.kind == OpKind::Linear) {
      const bool grouped_dw = n.kind == OpKind::Conv2d && n.param_or("groups", 1) > 1;
      if (grouped_dw) {
        calc = std::make_shared<ShapeCalculator>();
        calc->transform = T::Identity;
        calc->links = {link_of(prods.at(0))};
        defining[id] = calc->links[0];
      } else {
        calc = std::make_shared<ShapeCalculator>();
        calc->transform = T::Constant;
        calc->constant = shapes.at(id)[1];
        defining[id] = id;
      }
    } else if (n.kind == OpKind::Flatten) {
      const Shape& in = shapes.at(prods.at(0));
      calc = std::make_shared<ShapeCalculator>();
      calc->transform = T::MultiplyByK;
      calc->links = {link_of(prods[0])};
      calc->k = 1;
      for (std::size_t d = 2; d < in.size(); ++d) calc->k *= in[d];
      defining[id] = id;
    } else if (n.kind == OpKind::Concat) {
      calc = std::make_shared<ShapeCalculator>();
      calc->transform = T::SumOfInputs;
      for (const auto& p : prods) calc->links.push_back(link_of(p));
      defining[id] = id;
    } else {
      if (prods.empty()) throw GraphError("node '" + id + "' has no channel-defining predecessor");
      calc = std::make_shared<ShapeCalculator>();
      calc->transform = T::Identity;
      calc->links = {link_of(prods[0])};
      defining[id] = calc->links[0];
    }

    std::string links;
    for (const auto& l : calc->links) links += (links.empty() ? "" : ",") + l;
    n.annotations["channel_source"] = calc->transform == T::Identity ? links : defining[id];
    n.annotations["shape_calc"] = std::string(transform_name(calc->transform));
    if (calc->transform == T::MultiplyByK) n.annotations["shape_calc"] += ":" + std::to_string(calc->k);
    if (calc->transform == T::MaskGroup) n.annotations["mask_group"] = std::to_string(calc->group);
    table[id] = std::move(calc);
  }
  return table;
}

std::map<std::string, Tensor> evaluate_calculators(const Graph& g, const CalculatorTable& table,
                                                   const std::function<Tensor(int group)>& group_count) {
  using T = ShapeCalculator::Transform;
  std::map<std::string, Tensor> eff;
  std::map<int, Tensor> per_group;
  for (const auto& id : g.topo_order()) {
    const auto& calc = *table.at(id);
    Tensor v;
    switch (calc.transform) {
      case T::Constant:
        v = Tensor::scalar(static_cast<Real>(calc.constant));
        break;
      case T::MaskGroup: {
        auto it = per_group.find(calc.group);
        if (it == per_group.end()) it = per_group.emplace(calc.group, group_count(calc.group)).first;
        v = it->second;
        break;
      }
      case T::Identity:
        v = eff.at(calc.links.at(0));
        break;
      case T::MultiplyByK:
        v = ops::mul_scalar(eff.at(calc.links.at(0)), static_cast<Real>(calc.k));
        break;
      case T::SumOfInputs:
        v = eff.at(calc.links.at(0));
        for (std::size_t i = 1; i < calc.links.size(); ++i) v = ops::add(v, eff.at(calc.links[i]));
        break;
    }
    eff[id] = std::move(v);
  }
  return eff;
}

}  // namespace passes
FORGE_NAMESPACE_END
