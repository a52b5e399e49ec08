#include "forge/executor.hpp"

#include <cmath>

#include "forge/ops.hpp"
#include "forge/supernet.hpp"

FORGE_NAMESPACE_BEGIN

Tensor ExecHooks::weight(const Node& n, const std::string& name, const Tensor& w, const ExecOptions&) const {
  if (!n.weight_quant) return w;
  const int bits = name == "bias" ? n.weight_quant->bias_bits : n.weight_quant->bits;
  return bits >= 32 ? w : ops::fake_quant_weight_minmax(w, bits);
}

Tensor ExecHooks::output(const Node& n, const Tensor& y, const ExecOptions&) const {
  if (!n.act_quant) return y;
  return ops::fake_quant_act_pact(y, n.act_quant->bits, Tensor::scalar(n.act_quant->alpha));
}

Tensor ExecHooks::combine(const Node& n, std::span<const Tensor> branches, const ExecOptions& opt) const {
  return supernet::combine(branches, n.weight("theta"), opt);
}

namespace {

void check_finite(const Node& n, const Tensor& t) {
  for (Real v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value in the output of node '" + n.id + "' (" +
                         std::string(kind_name(n.kind)) + ")");
    }
  }
}

Tensor eval_node(const Node& n, const std::vector<Tensor>& in, const ExecOptions& opt, const ExecHooks& hooks) {
  auto weights = [&](Tensor& w, Tensor& b) {
    w = hooks.weight(n, "weight", n.weight("weight"), opt);
    if (n.has_weight("bias")) b = hooks.weight(n, "bias", n.weight("bias"), opt);
  };
  switch (n.kind) {
    case OpKind::Input:
      return in.at(0);
    case OpKind::Conv2d:
    case OpKind::DepthwiseConv2d: {
      Tensor w, b;
      weights(w, b);
      ops::Conv2dOptions co;
      co.stride = n.param_or("stride", 1);
      co.padding = n.param_or("padding", 0);
      co.groups = n.kind == OpKind::DepthwiseConv2d ? in[0].dim(1) : n.param_or("groups", 1);
      return ops::conv2d(in[0], w, b, co);
    }
    case OpKind::Linear: {
      Tensor w, b;
      weights(w, b);
      return ops::linear(in[0], w, b);
    }
    case OpKind::BatchNorm: {
      ops::BatchNormState st;
      st.gamma = n.weight("gamma");
      st.beta = n.weight("beta");
      st.running_mean = n.weight("running_mean");
      st.running_var = n.weight("running_var");
      if (n.has_param("eps")) st.eps = static_cast<Real>(n.params.at("eps"));
      if (n.has_param("momentum")) st.momentum = static_cast<Real>(n.params.at("momentum"));
      return ops::batchnorm(in[0], st, opt.training);
    }
    case OpKind::ReLU:
      return ops::relu(in[0]);
    case OpKind::MaxPool:
      return ops::maxpool2d(in[0], n.param("kernel"), n.param_or("stride", n.param("kernel")));
    case OpKind::AvgPool:
      return ops::avgpool2d(in[0], n.param("kernel"), n.param_or("stride", n.param("kernel")));
    case OpKind::GlobalAvgPool:
      return ops::global_avgpool(in[0]);
    case OpKind::Add: {
      Tensor acc = ops::add(in[0], in[1]);
      for (std::size_t i = 2; i < in.size(); ++i) acc = ops::add(acc, in[i]);
      return acc;
    }
    case OpKind::Concat:
      return ops::concat(in, 1);
    case OpKind::Flatten:
      return ops::flatten(in[0]);
    case OpKind::Identity:
    case OpKind::Output:
      return in[0];
    case OpKind::SuperNetCombiner:
      return hooks.combine(n, in, opt);
  }
  throw GraphError("unhandled node kind");
}

}  // namespace

std::vector<Tensor> execute(const Graph& g, std::span<const Tensor> inputs, const ExecOptions& opt,
                            const ExecHooks* hooks) {
  static const ExecHooks kPlain;
  const ExecHooks& h = hooks != nullptr ? *hooks : kPlain;
  const auto input_ids = g.inputs();
  if (inputs.size() != input_ids.size()) {
    throw ShapeError("graph has " + std::to_string(input_ids.size()) + " inputs, " +
                     std::to_string(inputs.size()) + " tensors given");
  }
  std::map<std::string, Tensor> values;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Node& n = g.node(input_ids[i]);
    Shape want = n.has_param("features") ? Shape{n.param("features")}
                                         : Shape{n.param("channels"), n.param("height"), n.param("width")};
    Shape got(inputs[i].shape().begin() + (inputs[i].rank() > 0 ? 1 : 0), inputs[i].shape().end());
    if (got != want) {
      throw ShapeError("input '" + n.id + "' expects [N," + to_string(want).substr(1) + ", got " +
                       to_string(inputs[i].shape()));
    }
  }

  std::size_t next_input = 0;
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    std::vector<Tensor> in;
    if (n.kind == OpKind::Input) {
      in.push_back(inputs[next_input++]);
    } else {
      for (const auto& p : g.producers(id)) in.push_back(values.at(p));
    }
    Tensor y = eval_node(n, in, opt, h);
    if (n.kind != OpKind::Output) y = h.output(n, y, opt);
    if (opt.check_finite) check_finite(n, y);
    if (opt.trace != nullptr) (*opt.trace)[id] = y;
    values[id] = std::move(y);
  }

  std::vector<Tensor> outs;
  for (const auto& id : g.outputs()) outs.push_back(values.at(id));
  return outs;
}

Tensor run(const Graph& g, const Tensor& input, const ExecOptions& opt, const ExecHooks* hooks) {
  auto outs = execute(g, std::span<const Tensor>(&input, 1), opt, hooks);
  if (outs.size() != 1) throw GraphError("run() needs exactly one Output node");
  return outs[0];
}

FORGE_NAMESPACE_END
