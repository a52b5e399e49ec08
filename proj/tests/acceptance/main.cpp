#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "forge/dnas.hpp"
#include "forge/mps.hpp"
#include "forge/ops.hpp"
#include "forge/passes.hpp"
#include "forge/pit.hpp"
#include "forge/supernet.hpp"

bool run_gradient_checks(std::ostream& out);

using namespace forge;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Criterion {
  int id;
  std::string title;
  std::function<bool(std::ostream&)> check;
};

void randomize(std::vector<Tensor> params, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& t : params) {
    for (auto& v : t.mutable_values()) v = static_cast<Real>(d(rng));
  }
}

void one_hot(Tensor t, std::size_t k) {
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i == k ? Real{0} : Real(-1e4);
}

// Element count of every weight and bias tensor of the layers the builtin costs cover.
double brute_force_params(const Graph& g) {
  double n = 0;
  for (const auto& id : g.node_ids()) {
    const Node& node = g.node(id);
    if (node.kind != OpKind::Conv2d && node.kind != OpKind::DepthwiseConv2d && node.kind != OpKind::Linear) continue;
    for (const auto& [name, t] : node.weights) {
      if (name == "weight" || name == "bias") n += static_cast<double>(t.numel());
    }
  }
  return n;
}

nlohmann::json wide_json() {
  return nlohmann::json::parse(R"({
    "inputs": [{"id": "x", "channels": 1, "height": 8, "width": 8}],
    "nodes": [{"id": "wide", "kind": "Conv2d", "params": {"out_channels": 32, "kernel": 3, "padding": 1}},
              {"id": "relu", "kind": "ReLU"},
              {"id": "narrow", "kind": "Conv2d", "params": {"out_channels": 8, "kernel": 3, "padding": 1}},
              {"id": "gap", "kind": "GlobalAvgPool"}, {"id": "flat", "kind": "Flatten"},
              {"id": "fc", "kind": "Linear", "params": {"out_features": 3}}],
    "edges": [["x", "wide"], ["wide", "relu"], ["relu", "narrow"], ["narrow", "gap"], ["gap", "flat"], ["flat", "fc"]],
    "outputs": ["fc"]})");
}

// ---------------------------------------------------------------------------

bool effective_shape(std::ostream& out) {
  auto model = pit::make_pit(graph_from_json(wide_json(), 3));
  auto& method = dynamic_cast<pit::PitMethod&>(model.method());
  auto& mask = method.masks()[static_cast<std::size_t>(method.sharing().group_of.at("wide"))];
  std::vector<Real> theta(32, Real(0.8));
  std::mt19937_64 rng(32);
  std::vector<std::size_t> idx(32);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  for (int i = 0; i < 20; ++i) theta[idx[static_cast<std::size_t>(i)]] = Real(0.2);
  std::copy(theta.begin(), theta.end(), mask.theta.mutable_values().begin());

  const Real count = method.effective_extents(model.graph()).at("wide").item();
  const Graph exported = model.export_graph();
  const auto cout_exported = exported.node("wide").weight("weight").dim(0);
  out << "  effective C_out " << count << ", exported conv " << cout_exported << " channels\n";
  return count == 12 && cout_exported == 12 && infer_shapes(exported).at("wide")[1] == 12;
}

bool bn_folding(std::ostream& out) {
  std::mt19937_64 rng(50);
  double fold_err = 0, unfold_err = 0;
  for (int i = 0; i < 50; ++i) {
    const Graph g = testing::conv_bn_fixture(rng, static_cast<std::uint64_t>(i + 1));
    const Tensor x = testing::input_for(g, 4, rng);
    const Tensor ref = run(g, x);
    const Graph folded = passes::fold_bn(g).graph;
    const Graph back = passes::unfold_bn(folded);
    fold_err = std::max(fold_err, testing::max_abs_diff(run(folded, x), ref));
    unfold_err = std::max(unfold_err, testing::max_abs_diff(run(back, x), ref));
    for (const auto& id : g.node_ids()) {
      if (!back.has_node(id)) unfold_err = std::numeric_limits<double>::infinity();
    }
  }
  out << "  max |folded - original| " << fold_err << ", max |unfolded - original| " << unfold_err << '\n';
  return fold_err <= 1e-5 && unfold_err <= 1e-5;
}

bool mask_sharing(std::ostream& out) {
  const Graph g = graph_from_json(testing::residual_json(), 1);
  const auto targets = passes::identify_targets(g).targets;
  const auto groups = passes::share_masks(g, targets);
  std::set<std::set<std::string>> searchable, frozen;
  for (const auto& grp : groups) {
    std::set<std::string> m(grp.members.begin(), grp.members.end());
    (grp.frozen ? frozen : searchable).insert(m);
    out << "  group {";
    for (const auto& s : grp.members) out << ' ' << s;
    out << " }" << (grp.frozen ? " frozen: " + grp.frozen_reason : "") << '\n';
  }
  const std::set<std::set<std::string>> want{{"conv3x3", "dw"}, {"pw_a", "pw_b"}};
  return searchable == want && frozen == std::set<std::set<std::string>>{{"fc"}};
}

struct ExportFixture {
  std::string name;
  SearchableModel model;
};

std::vector<ExportFixture> export_fixtures(std::mt19937_64& rng) {
  std::vector<ExportFixture> f;
  for (std::uint64_t s : {1, 2}) {
    Graph g = graph_from_json(train::builtin_seed("supernet_cnn"), s);
    testing::randomize_bn(g, rng);
    f.push_back({"supernet/supernet_cnn#" + std::to_string(s), supernet::make_supernet(g)});
    randomize(f.back().model.arch_parameters(), rng, -1, 1);
  }
  for (const char* seed : {"seed_cnn", "tiny_cnn"}) {
    f.push_back({std::string("pit/") + seed, pit::make_pit(testing::seed_fixture(seed, 7))});
    randomize(f.back().model.arch_parameters(), rng, 0, 1);
  }
  f.push_back({"pit/residual", pit::make_pit(graph_from_json(testing::residual_json(), 3))});
  randomize(f.back().model.arch_parameters(), rng, 0, 1);
  for (const char* seed : {"seed_cnn", "tiny_cnn"}) {
    f.push_back({std::string("mps/") + seed, mps::make_mps(testing::seed_fixture(seed, 8))});
  }
  f.push_back({"mps/residual", mps::make_mps(graph_from_json(testing::residual_json(), 4))});
  for (auto& x : f) {
    if (x.name.rfind("mps/", 0) != 0) continue;
    randomize(x.model.arch_parameters(), rng, -1, 1);
    for (const auto& c : dynamic_cast<const mps::MpsMethod&>(x.model.method()).activation_choices()) {
      Tensor a = c.alpha;
      a.mutable_values()[0] = static_cast<Real>(std::uniform_real_distribution<>(0.5, 4)(rng));
    }
  }
  return f;
}

bool isomorphic(const Graph& a, const Graph& b) {
  if (a.node_ids() != b.node_ids() || a.edges() != b.edges() || a.inputs() != b.inputs() || a.outputs() != b.outputs()) {
    return false;
  }
  for (const auto& id : a.node_ids()) {
    const Node& x = a.node(id);
    const Node& y = b.node(id);
    if (x.kind != y.kind || x.params != y.params || x.weights.size() != y.weights.size()) return false;
    for (const auto& [name, t] : x.weights) {
      if (!y.has_weight(name) || testing::max_abs_diff(t, y.weight(name)) != 0) return false;
    }
  }
  return true;
}

bool export_equivalence(std::ostream& out) {
  std::mt19937_64 rng(55);
  bool ok = true;
  for (auto& f : export_fixtures(rng)) {
    const Graph exported = f.model.export_graph();
    ExecOptions opt;
    opt.discrete = true;
    double worst = 0;
    for (int i = 0; i < 50; ++i) {
      const Tensor x = testing::input_for(exported, 1, rng);
      worst = std::max(worst, testing::max_abs_diff(f.model.forward(x, opt), run(exported, x)));
    }
    out << "  " << f.name << ": max diff " << worst << '\n';
    ok = ok && worst <= 1e-5;
  }
  for (const char* seed : {"seed_cnn", "tiny_cnn"}) {
    const Graph g = testing::seed_fixture(seed, 9);
    const bool iso = isomorphic(pit::make_pit(g).export_graph(), passes::fold_bn(g).graph);
    out << "  pit all-kept " << seed << ": " << (iso ? "isomorphic to the folded seed" : "differs") << '\n';
    ok = ok && iso;
  }
  return ok;
}

bool cost_oracle(std::ostream& out) {
  std::mt19937_64 rng(66);
  const auto params = cost::CostSpec::builtin("params");
  const auto bytes = cost::CostSpec::builtin("params_bytes");
  bool ok = true;
  for (auto& f : export_fixtures(rng)) {
    const bool is_mps = f.name.rfind("mps/", 0) == 0;
    if (is_mps || f.name.rfind("supernet/", 0) == 0) {
      std::size_t k = 0;
      for (auto t : f.model.arch_parameters()) one_hot(t, k++ % static_cast<std::size_t>(t.numel()));
    }
    const Graph exported = f.model.export_graph();
    const double brute = brute_force_params(exported);
    const double exported_cost = cost::get_cost(exported, params).item();
    const double search_cost = f.model.get_cost(params).item();
    bool row = exported_cost == brute && search_cost == brute;
    out << "  " << f.name << ": elements " << brute << ", exported cost " << exported_cost << ", search cost "
        << search_cost;
    if (is_mps) {
      const double ckpt = mps::checkpoint_bytes(exported, graph_weights(exported));
      const double soft = f.model.get_cost(bytes).item();
      out << ", params_bytes " << soft << " vs checkpoint " << ckpt;
      row = row && soft == ckpt;
    }
    out << '\n';
    ok = ok && row;
  }
  return ok;
}

bool unit_semantics(std::ostream& out) {
  std::mt19937_64 rng(77);
  double combine_err = 0, quant_err = 0;
  bool masks_ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 5)(rng);
    const auto k = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, n - 1)(rng));
    std::vector<Tensor> branches;
    for (int i = 0; i < n; ++i) branches.push_back(testing::uniform_tensor({2, 3, 4, 4}, rng, -3, 3));
    Tensor theta(Shape{n});
    one_hot(theta, k);
    combine_err = std::max(combine_err, testing::max_abs_diff(supernet::combine(branches, theta, {}), branches[k]));

    const std::vector<int> bits{2, 4, 8};
    const auto b = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, 2)(rng));
    const Tensor w = testing::uniform_tensor({6, 3, 3, 3}, rng, -1, 1);
    mps::PrecisionChoice wc;
    wc.bits = bits;
    wc.theta = Tensor(Shape{3});
    one_hot(wc.theta, b);
    quant_err = std::max(quant_err, testing::max_abs_diff(mps::effective_tensor(w, wc),
                                                          ops::fake_quant_weight_minmax(w, bits[b])));
    mps::PrecisionChoice ac = wc;
    ac.role = mps::Role::Activation;
    ac.alpha = Tensor::scalar(static_cast<Real>(std::uniform_real_distribution<>(0.5, 3)(rng)));
    quant_err = std::max(quant_err, testing::max_abs_diff(mps::effective_tensor(w, ac),
                                                          ops::fake_quant_act_pact(w, bits[b], ac.alpha)));

    pit::ChannelMask mask{0, testing::uniform_tensor({6}, rng, 0, 1)};
    mask.theta.mutable_values()[0] = Real(0.9);
    const Tensor mw = pit::masked_weight(w, mask);
    for (std::int64_t c = 0; c < 6; ++c) {
      const bool keep = mask.theta.at(c) >= Real(0.5);
      for (std::int64_t e = 0; e < 27; ++e) {
        const Real got = mw.at(c * 27 + e);
        masks_ok = masks_ok && (keep ? got == w.at(c * 27 + e) : got == 0);
      }
    }
  }
  out << "  one-hot combine max diff " << combine_err << ", one-hot precision max diff " << quant_err
      << ", channel masks " << (masks_ok ? "exact" : "wrong") << '\n';
  return combine_err <= 1e-6 && quant_err == 0 && masks_ok;
}

// ---------------------------------------------------------------------------

train::ExperimentConfig sweep_config(const fs::path& dir) {
  train::ExperimentConfig cfg;
  cfg.name = "pit_sweep";
  cfg.task = "shapes16";
  cfg.seed_graph = "builtin:seed_cnn";
  cfg.chain = {"pit"};
  cfg.lambdas = {1e-2, 1e-4, 1e-6, 1e-8};
  cfg.seed = 0;
  cfg.export_dir = dir;
  return cfg;
}

// Float seed trained for as many epochs as a search stage plus its fine-tuning.
double float_seed_accuracy(const train::ExperimentConfig& cfg, const std::string& seed_graph) {
  const auto data = train::generate_dataset(cfg.task, cfg.seed, cfg.sizes);
  Graph g = train::load_seed(seed_graph, cfg.seed, data.train.classes);
  auto tc = train::train_config(cfg, "none", 0);
  tc.epochs = cfg.epochs + cfg.finetune_epochs;
  (void)train::fine_tune(g, data, tc);
  return train::evaluate(g, data.test);
}

std::string masked_csv(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream out;
  std::string line;
  while (std::getline(in, line)) out << line.substr(0, line.rfind(',')) << '\n';
  return out.str();
}

bool pareto_sweep(std::ostream& out) {
  const auto cfg = sweep_config("acceptance_sweep_a");
  fs::remove_all(cfg.export_dir);
  const auto start = Clock::now();
  const auto records = train::sweep(cfg);
  const double secs = seconds_since(start);
  const double seed_acc = float_seed_accuracy(cfg, cfg.seed_graph);
  const double seed_params = train::footprint(train::load_seed(cfg.seed_graph, cfg.seed)).params;

  std::set<std::pair<double, double>> front;
  const train::ParetoRecord* largest = nullptr;
  const train::ParetoRecord* max_lambda = nullptr;
  for (const auto& r : records) {
    out << "  lambda " << train::format_lambda(r.lambda) << ": accuracy " << r.accuracy << ", params " << r.params
        << (r.dominated ? " (dominated)" : "") << (r.error.empty() ? "" : " failed: " + r.error) << '\n';
    if (!r.error.empty()) continue;
    if (!r.dominated) front.insert({r.accuracy, r.params});
    if (largest == nullptr || r.params > largest->params) largest = &r;
    if (max_lambda == nullptr || r.lambda > max_lambda->lambda) max_lambda = &r;
  }
  out << "  float seed: accuracy " << seed_acc << ", params " << seed_params << "; sweep took " << std::fixed
      << std::setprecision(1) << secs << " s\n" << std::defaultfloat;
  if (largest == nullptr || max_lambda == nullptr) return false;
  const double ratio = max_lambda->params / seed_params;
  const double drop = seed_acc - largest->accuracy;
  out << "  non-dominated points " << front.size() << ", max-lambda params ratio " << ratio
      << ", accuracy drop at the largest model " << 100 * drop << " points\n";
  return front.size() >= 3 && ratio <= 0.4 && drop <= 0.05 && secs < 15 * 60;
}

bool pipeline(std::ostream& out) {
  train::ExperimentConfig cfg;
  cfg.name = "pipeline";
  cfg.task = "shapes16";
  cfg.seed_graph = "builtin:supernet_cnn";
  cfg.chain = {"supernet", "pit", "mps"};
  const double lambda = 1e-6;
  const auto data = train::generate_dataset(cfg.task, cfg.seed, cfg.sizes);
  const Graph start = train::load_seed(cfg.seed_graph, cfg.seed, data.train.classes);
  const auto res = train::run_pipeline(start, data, cfg, lambda);

  const double seed_acc = float_seed_accuracy(cfg, "builtin:seed_cnn");
  const double seed_bytes = train::footprint(train::load_seed("builtin:seed_cnn", cfg.seed)).params_bytes;
  out << "  float seed: accuracy " << seed_acc << ", params_bytes " << seed_bytes << '\n';
  std::vector<std::string> methods;
  bool sizes_ok = true;
  for (const auto& s : res.stages) {
    out << "  " << s.method << ": accuracy " << s.accuracy << ", params " << s.size.params << ", params_bytes "
        << s.size.params_bytes << '\n';
    methods.push_back(s.method);
    sizes_ok = sizes_ok && s.size.params > 0 && s.size.params_bytes > 0;
  }
  if (res.stages.empty()) return false;
  const auto& last = res.stages.back();
  const double ratio = last.size.params_bytes / seed_bytes;
  const double drop = seed_acc - last.accuracy;
  out << "  final bytes ratio " << ratio << ", accuracy drop " << 100 * drop << " points\n";
  return methods == cfg.chain && sizes_ok && ratio <= 0.25 && drop <= 0.03;
}

// Full epochs of the four models interleaved round-robin, so that load drifts
// hit every model alike. An ordering counts when a one-sided sign test over the
// paired rounds rejects "no difference" at the 5% level.
bool epoch_timing(std::ostream& out) {
  constexpr int kRounds = 10;
  const auto data = train::generate_dataset("shapes16", 0);
  const Graph seed = train::load_seed("builtin:seed_cnn", 0, 3);
  const Graph sn = train::load_seed("builtin:supernet_cnn", 0, 3);
  train::ExperimentConfig cfg;
  struct Timed {
    std::string name;
    SearchableModel model;
    std::string cost;
    std::vector<double> seconds;
  };
  std::vector<Timed> runs;
  runs.push_back({"baseline", make_plain(passes::fold_bn(seed).graph), "", {}});
  runs.push_back({"pit", train::attach("pit", seed, cfg), "params", {}});
  runs.push_back({"supernet", train::attach("supernet", sn, cfg), "params", {}});
  runs.push_back({"mps", train::attach("mps", seed, cfg), "params_bytes", {}});
  for (int round = 0; round < kRounds; ++round) {
    for (auto& r : runs) {
      train::TrainConfig tc;
      tc.epochs = 1;
      tc.warmup = 0;
      tc.seed = static_cast<std::uint64_t>(round);
      if (!r.cost.empty()) tc.terms = {{r.cost, 1e-6, std::nullopt}};
      r.seconds.push_back(train::train_search(r.model, data, tc).epochs.front().seconds);
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  out << std::fixed << std::setprecision(3) << "  median seconds per epoch:";
  for (const auto& r : runs) out << ' ' << r.name << ' ' << median(r.seconds);
  out << '\n';
  bool ok = true;
  auto slower = [&](std::size_t fast, std::size_t slow) {
    std::vector<double> ratio;
    int holds = 0;
    for (int i = 0; i < kRounds; ++i) {
      ratio.push_back(runs[slow].seconds[i] / runs[fast].seconds[i]);
      holds += ratio.back() > 1 ? 1 : 0;
    }
    // P(at least `holds` of kRounds fair coin flips come up heads)
    double p = 0;
    for (int k = holds; k <= kRounds; ++k) {
      double c = 1;
      for (int j = 0; j < k; ++j) c = c * (kRounds - j) / (j + 1);
      p += c * std::pow(0.5, kRounds);
    }
    const bool pass = p < 0.05;
    out << "  " << runs[fast].name << " < " << runs[slow].name << ": median ratio " << median(ratio) << ", holds in "
        << holds << "/" << kRounds << " rounds, sign test p = " << std::setprecision(4) << p << std::setprecision(3)
        << (pass ? "" : "  <- not met") << '\n';
    ok = ok && pass;
  };
  slower(0, 1);
  slower(1, 2);
  slower(1, 3);
  out << std::defaultfloat;
  return ok;
}

bool determinism(std::ostream& out) {
  const auto a = sweep_config("acceptance_sweep_a");
  if (!fs::exists(a.export_dir / "pareto.csv")) (void)train::sweep(a);
  const auto b = sweep_config("acceptance_sweep_b");
  fs::remove_all(b.export_dir);
  (void)train::sweep(b);
  const std::string x = masked_csv(a.export_dir / "pareto.csv");
  const std::string y = masked_csv(b.export_dir / "pareto.csv");
  out << "  " << std::count(x.begin(), x.end(), '\n') << " CSV lines, "
      << (x == y ? "identical" : "different") << " apart from the seconds column\n";
  return x == y && !x.empty();
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", run_gradient_checks},
      {2, "effective channel count after masking", effective_shape},
      {3, "BatchNorm fold and unfold", bn_folding},
      {4, "mask sharing on the residual fixture", mask_sharing},
      {5, "export equivalence", export_equivalence},
      {6, "cost oracle equality", cost_oracle},
      {7, "one-hot and mask semantics", unit_semantics},
      {8, "PIT Pareto sweep on shapes16", pareto_sweep},
      {9, "supernet, PIT and MPS pipeline", pipeline},
      {10, "relative epoch time", epoch_timing},
      {11, "sweep determinism", determinism},
  };
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    std::ostringstream detail;
    bool ok = false;
    const auto start = Clock::now();
    try {
      ok = c.check(detail);
    } catch (const std::exception& e) {
      detail << "  exception: " << e.what() << '\n';
    }
    std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << c.id << ": " << c.title << " (" << std::fixed
              << std::setprecision(1) << seconds_since(start) << " s)\n"
              << std::defaultfloat << detail.str() << std::flush;
    failed += ok ? 0 : 1;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
