#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "forge/experiment.hpp"
#include "forge/ops.hpp"

using namespace forge;
using namespace forge::train;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

Tensor param(std::vector<Real> w, std::vector<Real> g) {
  const auto n = static_cast<std::int64_t>(w.size());
  Tensor t = Tensor(Shape{n}, std::move(w)).set_requires_grad(true);
  Tensor dot = ops::dot(t, Tensor(Shape{n}, std::move(g)));
  dot.backward();
  return t;
}

std::vector<int> class_counts(const Dataset& d) {
  std::vector<int> c(static_cast<std::size_t>(d.classes));
  for (int y : d.labels) ++c.at(static_cast<std::size_t>(y));
  return c;
}

ParetoRecord record(double lambda, double acc, double bytes) {
  ParetoRecord r;
  r.lambda = lambda;
  r.chain = "pit";
  r.accuracy = acc;
  r.params = bytes / 4;
  r.params_bytes = bytes;
  r.macs = 10 * bytes;
  r.export_path = "pit_lambda" + format_lambda(lambda) + ".json";
  return r;
}

}  // namespace

TEST_CASE("datasets are deterministic and balanced") {
  const SplitSizes sizes{61, 20, 20};
  for (const auto& name : dataset_names()) {
    const Splits a = generate_dataset(name, 7, sizes);
    const Splits b = generate_dataset(name, 7, sizes);
    CHECK(testing::max_abs_diff(a.train.images, b.train.images) == 0);
    CHECK(a.train.labels == b.train.labels);
    CHECK(a.train.images.shape() == Shape{61, 1, 16, 16});
    CHECK(a.test.size() == 20);
    const auto counts = class_counts(a.train);
    CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
    const Splits c = generate_dataset(name, 8, sizes);
    CHECK(testing::max_abs_diff(a.train.images, c.train.images) > 0);
  }
  CHECK(generate_dataset("shapes16", 1, sizes).train.classes == 3);
  CHECK_THROWS_AS((void)generate_dataset("mnist", 1), ConfigError);
  CHECK_THROWS_AS((void)generate_dataset("rings", 1, {0, 1, 1}), ConfigError);
}

TEST_CASE("batches gather rows in index order") {
  const Splits s = generate_dataset("rings", 3, {10, 2, 2});
  const std::vector<std::int64_t> idx{4, 1, 7};
  const Tensor b = s.train.batch(idx, 1, 3);
  CHECK(b.shape() == Shape{2, 1, 16, 16});
  CHECK(b.at(0) == s.train.images.at(256));
  CHECK(b.at(256 + 5) == s.train.images.at(7 * 256 + 5));
  CHECK(s.train.batch_labels(idx, 0, 2) == std::vector<int>{s.train.labels[4], s.train.labels[1]});
}

TEST_CASE("SGD with momentum") {
  Tensor p = param({1, 2}, {0.5, -1});
  Optimizer opt({p}, {OptimKind::Sgd, Real(0.1), Real(0.9)});
  opt.step();
  CHECK(p.at(0) == doctest::Approx(1 - 0.05));
  CHECK(p.at(1) == doctest::Approx(2 + 0.1));
  // Same gradient again: velocity 0.9 g + g
  opt.step();
  CHECK(p.at(0) == doctest::Approx(0.95 - 0.1 * 1.9 * 0.5));
  opt.zero_grad();
  CHECK(!p.has_grad());
  opt.step();
  CHECK(p.at(0) == doctest::Approx(0.95 - 0.1 * 1.9 * 0.5));
  CHECK_THROWS_AS(Optimizer({p}, {OptimKind::Sgd, Real(0)}), ConfigError);
}

TEST_CASE("Adam takes a learning-rate sized first step") {
  Tensor p = param({1, 2, 3}, {0.5, -4, 1e-3});
  Optimizer opt({p}, {OptimKind::Adam, Real(0.01)});
  opt.step();
  // bias-corrected m / sqrt(v) is sign(g) after one step
  CHECK(p.at(0) == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(p.at(1) == doctest::Approx(2.01).epsilon(1e-6));
  CHECK(p.at(2) == doctest::Approx(2.99).epsilon(1e-4));
  opt.step();
  // Second step with the same gradient: m_hat = g, v_hat = g^2
  CHECK(p.at(0) == doctest::Approx(0.98).epsilon(1e-6));
}

TEST_CASE("search training lowers the loss") {
  const Splits data = generate_dataset("shapes16", 2, {192, 48, 48});
  auto model = pit::make_pit(load_seed("builtin:tiny_cnn", 2, 3));
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.weights.lr = Real(0.05);
  cfg.terms = {{"params", 1e-4, std::nullopt}};
  cfg.track = {"macs"};
  const History h = train_search(model, data, cfg);
  REQUIRE(h.epochs.size() == 4);
  CHECK(h.epochs.back().task_loss < h.epochs.front().task_loss);
  CHECK(h.epochs.back().costs.count("macs") == 1);
  CHECK(h.epochs.back().costs.at("params") <= h.epochs.front().costs.at("params"));
  const json j = h.to_json(false);
  CHECK(j.size() == 4);
  CHECK(!j[0].contains("seconds"));
  CHECK(evaluate(model, data.test) >= 0);

  cfg.batch_size = 0;
  CHECK_THROWS_AS((void)train_search(model, data, cfg), ConfigError);
}

TEST_CASE("experiment configs") {
  const auto base = fs::path("/data/exp");
  const json doc = json::parse(R"({
    "name": "demo", "task": "rings", "seed_graph": "graphs/seed.json", "chain": ["supernet", "pit", "mps"],
    "costs": {"pit": "macs", "mps": "specs/bytes.json"}, "lambdas": [1e-5, 0],
    "epochs": 3, "dataset_sizes": [30, 10, 10], "export_dir": "out", "mps": {"bits": [4, 8]}})");
  const ExperimentConfig cfg = parse_experiment(doc, base);
  CHECK(cfg.name == "demo");
  CHECK(cfg.seed_graph == (base / "graphs/seed.json").string());
  CHECK(cfg.stage_cost.at("pit") == "macs");
  CHECK(cfg.stage_cost.at("mps") == (base / "specs/bytes.json").string());
  CHECK(cfg.stage_cost.at("supernet") == "params");
  CHECK(cfg.export_dir == base / "out");
  CHECK(cfg.sizes.train == 30);
  CHECK(cfg.mps.bits == std::vector<int>{4, 8});
  CHECK(parse_experiment(to_json(cfg), base).chain == cfg.chain);

  auto bad = [&](const char* key, json v) {
    json d = doc;
    d[key] = std::move(v);
    CHECK_THROWS_AS((void)parse_experiment(d), ConfigError);
  };
  bad("colour", "red");
  bad("chain", json::array({"mps", "pit"}));
  bad("chain", json::array());
  bad("lambdas", json::array({-1}));
  bad("lambdas", json::array());
  bad("epochs", 0);
  bad("epochs", "many");
  bad("warmup", 2);
  bad("dataset_sizes", json::array({1, 2}));
  bad("costs", json{{"dropout", "params"}});
  CHECK_THROWS_AS((void)parse_experiment(json::array()), ConfigError);
  CHECK_THROWS_AS((void)load_experiment("/nonexistent/exp.json"), ConfigError);
}

TEST_CASE("method chains") {
  CHECK_NOTHROW(validate_chain({"supernet", "pit", "mps"}));
  CHECK_NOTHROW(validate_chain({"pit", "supernet"}));
  CHECK_NOTHROW(validate_chain({"mps"}));
  CHECK_THROWS_AS(validate_chain({"mps", "supernet"}), ConfigError);
  CHECK_THROWS_AS(validate_chain({"pit", "pit"}), ConfigError);
  CHECK_THROWS_AS(validate_chain({"prune"}), ConfigError);
  CHECK_THROWS_AS(validate_chain({}), ConfigError);
}

TEST_CASE("dominance over accuracy and storage") {
  std::vector<ParetoRecord> r{record(1e-3, 0.80, 1000), record(1e-4, 0.90, 2000), record(1e-5, 0.85, 3000),
                              record(1e-6, 0.90, 2000), record(1e-7, 0.99, 9000)};
  r.push_back(record(1e-8, 0.1, 10));
  r.back().error = "diverged";
  flag_dominated(r);
  CHECK(!r[0].dominated);
  CHECK(!r[1].dominated);
  CHECK(r[2].dominated);
  CHECK(!r[3].dominated);  // ties do not dominate
  CHECK(!r[4].dominated);
  CHECK(r[5].dominated);
}

TEST_CASE("pareto CSV") {
  std::vector<ParetoRecord> r{record(1e-6, 0.5, 400), record(0, 0.25, 800)};
  r[1].error = "boom";
  r[0].seconds = 1.23456;
  flag_dominated(r);
  const std::string csv = to_csv(r);
  CHECK(csv ==
        "lambda,chain,accuracy,params,params_bytes,macs,dominated,export_path,seconds\n"
        "1e-06,pit,0.500000,100,400,4000,false,pit_lambda1e-06.json,1.235\n"
        "0,pit,nan,nan,nan,nan,true,pit_lambda0.json,0.000\n");
  CHECK(format_lambda(2.5e-7) == "2.5e-07");
  CHECK(format_lambda(0.01) == "0.01");
  CHECK(to_svg(r).find("<svg") != std::string::npos);
}

TEST_CASE("records are collected from exported graphs") {
  const fs::path dir = fs::temp_directory_path() / "forge_collect_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Graph g = graph_from_json(testing::residual_json(), 1);
  save_graph(g, dir / "a.json", {{"record", record(1e-6, 0.9, 100).to_json()}});
  save_graph(g, dir / "b.json", {{"record", record(1e-4, 0.8, 200).to_json()}});
  save_graph(g, dir / "c.json", {});
  std::ofstream(dir / "broken.json") << "{";
  const auto recs = collect_records(dir);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].lambda == 1e-4);
  CHECK(recs[0].dominated);
  CHECK(recs[1].accuracy == 0.9);
  CHECK(!recs[1].dominated);
  CHECK(ParetoRecord::from_json(recs[1].to_json()).export_path == recs[1].export_path);
  fs::remove_all(dir);
  CHECK_THROWS_AS((void)collect_records(dir), ConfigError);
}

TEST_CASE("builtin seeds") {
  CHECK(builtin_seed_names().size() == 3);
  CHECK(count_parameters(load_seed("builtin:seed_cnn", 1)) == 23379);
  const Graph four = load_seed("builtin:tiny_cnn", 1, 4);
  CHECK(infer_shapes(four).at(four.outputs().front()).back() == 4);
  CHECK_THROWS_AS((void)load_seed("builtin:resnet", 1), ConfigError);
  const Footprint f = footprint(load_seed("builtin:seed_cnn", 1));
  CHECK(f.params == 23379);
  CHECK(f.params_bytes == 4 * 23379);
}
