#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "forge/cost.hpp"
#include "forge/ops.hpp"

using namespace forge;
using nlohmann::json;

namespace {

double value(const cost::ParamBag& b, const std::string& name) { return cost::get(b, name).item(); }

cost::ParamBag bag_of(const Graph& g, const std::string& id) { return cost::static_bag(g, g.node(id), infer_shapes(g)); }

}  // namespace

TEST_CASE("static bags describe geometry under canonical names") {
  const Graph g = graph_from_json(testing::residual_json(), 1);
  const auto conv = bag_of(g, "conv3x3");
  CHECK(value(conv, "out_channels") == 8);
  CHECK(value(conv, "in_channels") == 3);
  CHECK(value(conv, "group_in_channels") == 3);
  CHECK(value(conv, "kernel_size") == 3);
  CHECK(value(conv, "padding") == 1);
  CHECK(value(conv, "out_height") == 6);
  CHECK(value(conv, "has_bias") == 1);
  CHECK(value(conv, "weight_bits") == 32);

  const auto dw = bag_of(g, "dw");
  CHECK(value(dw, "groups") == 8);
  CHECK(value(dw, "group_in_channels") == 1);

  const auto fc = bag_of(g, "fc");
  CHECK(value(fc, "in_features") == 216);
  CHECK(value(fc, "out_features") == 4);
  CHECK(value(fc, "kernel_h") == 1);
  CHECK(value(fc, "out_width") == 1);

  CHECK_THROWS_AS((void)cost::get(fc, "latency"), ConfigError);
}

TEST_CASE("bitwidths come from quantization annotations") {
  Graph g = graph_from_json(testing::residual_json(), 1);
  g.node("pw_a").weight_quant = WeightQuant{4, 8};
  g.node("dw").act_quant = ActQuant{2, 3.0};
  const auto b = bag_of(g, "pw_a");
  CHECK(value(b, "weight_bits") == 4);
  CHECK(value(b, "bias_bits") == 8);
  CHECK(value(b, "in_bits") == 2);
  CHECK(value(b, "out_bits") == 32);
}

TEST_CASE("builtin costs by hand") {
  const Graph g = graph_from_json(testing::residual_json(), 1);
  // conv 8*3*9+8, dw 8*9+8, two 1x1 convs 6*8+6, fc 216*4+4
  const double params = 224 + 80 + 2 * 54 + 868;
  CHECK(cost::get_cost(g, cost::CostSpec::builtin("params")).item() == params);
  CHECK(static_cast<double>(count_parameters(g)) == params);
  CHECK(cost::get_cost(g, cost::CostSpec::builtin("params_bytes")).item() == 4 * params);
  // 6x6 outputs for every conv
  const double macs = 36 * (216 + 72 + 2 * 48) + 864;
  CHECK(cost::get_cost(g, cost::CostSpec::builtin("macs")).item() == macs);
  CHECK_THROWS_AS((void)cost::CostSpec::builtin("latency"), ConfigError);
}

TEST_CASE("custom specs match on kind and attributes") {
  const Graph g = graph_from_json(testing::residual_json(), 1);
  cost::Registry reg;
  reg.add("channels", [](const cost::ParamBag& b, const json& args) {
    return ops::mul_scalar(cost::get(b, "out_channels"), static_cast<Real>(args.value("factor", 1.0)));
  });
  json doc = json::parse(R"({
    "name": "pointwise",
    "rules": [{"match": {"kind": "Conv2d", "attrs": {"kernel": 1}}, "cost": "channels", "args": {"factor": 2}},
              {"match": {"kind": "Linear"}, "cost": "params"}]})");
  const auto spec = cost::CostSpec::from_json(doc, reg);
  CHECK(spec.name() == "pointwise");
  CHECK(spec.match(g.node("conv3x3")) == nullptr);
  REQUIRE(spec.match(g.node("pw_b")) != nullptr);
  CHECK(spec.match(g.node("pw_b"))->cost == "channels");
  CHECK(cost::get_cost(g, spec).item() == 2 * 6 * 2 + 868);

  doc["default"] = "error";
  CHECK_THROWS_AS((void)cost::get_cost(g, cost::CostSpec::from_json(doc, reg)), ConfigError);
  doc["default"] = "maybe";
  CHECK_THROWS_AS((void)cost::CostSpec::from_json(doc, reg), ConfigError);
  doc["default"] = "zero";
  CHECK_THROWS_AS((void)cost::CostSpec::from_json(doc), ConfigError);
  doc["rules"][0]["match"]["kind"] = "Teleport";
  CHECK_THROWS((void)cost::CostSpec::from_json(doc, reg));
}

TEST_CASE("cost specs load from a file or a builtin name") {
  const auto path = std::filesystem::temp_directory_path() / "forge_cost_spec.json";
  {
    std::ofstream out(path);
    out << R"({"name": "linear_only", "rules": [{"match": {"kind": "Linear"}, "cost": "macs"}]})";
  }
  const Graph g = graph_from_json(testing::residual_json(), 1);
  CHECK(cost::get_cost(g, cost::CostSpec::load(path.string())).item() == 864);
  CHECK(cost::CostSpec::load("macs").name() == "macs");
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  CHECK_THROWS_AS((void)cost::CostSpec::load(path.string()), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("regularization terms") {
  const Tensor loss = Tensor::scalar(Real(1.5));
  const std::map<std::string, Tensor> costs{{"params", Tensor::scalar(10)}, {"macs", Tensor::scalar(200)}};
  std::vector<cost::Term> terms{{"params", 0.5, std::nullopt}, {"macs", 0.01, std::nullopt}};
  CHECK(cost::combine_costs(loss, costs, terms).item() == doctest::Approx(1.5 + 5 + 2));

  terms = {{"params", 0.5, 4.0}};
  CHECK(cost::combine_costs(loss, costs, terms).item() == doctest::Approx(1.5 + 3));
  terms = {{"params", 0.5, 12.0}};
  CHECK(cost::combine_costs(loss, costs, terms).item() == doctest::Approx(1.5));

  terms = {{"params", 0.0, std::nullopt}};
  CHECK(cost::combine_costs(loss, costs, terms).impl() == loss.impl());

  terms = {{"latency", 1.0, std::nullopt}};
  CHECK_THROWS_AS((void)cost::combine_costs(loss, costs, terms), ConfigError);
  terms = {{"params", 1.0, std::nullopt}};
  const std::map<std::string, Tensor> bad{{"params", Tensor::scalar(std::numeric_limits<Real>::infinity())}};
  CHECK_THROWS_AS((void)cost::combine_costs(loss, bad, terms), NumericError);
}

TEST_CASE("a budget passes no gradient while the cost is under it") {
  Tensor c = Tensor::scalar(3).set_requires_grad(true);
  const std::vector<cost::Term> terms{{"params", 2.0, 5.0}};
  cost::combine_costs(Tensor::scalar(0), {{"params", c}}, terms).backward();
  CHECK((!c.has_grad() || c.grad()[0] == 0));

  Tensor d = Tensor::scalar(7).set_requires_grad(true);
  cost::combine_costs(Tensor::scalar(0), {{"params", d}}, terms).backward();
  REQUIRE(d.has_grad());
  CHECK(d.grad()[0] == doctest::Approx(2));
}
