#include "forge/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "forge/dnas.hpp"
#include "forge/graph_io.hpp"

FORGE_NAMESPACE_BEGIN
namespace train {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kStages{"supernet", "pit", "mps"};
const std::set<std::string> kBuiltinCosts{"params", "params_bytes", "macs"};

std::string resolve(const std::string& p, const fs::path& base) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).string();
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : sep) + p;
  return out;
}

std::string fmt(const char* spec, double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

void validate_chain(const std::vector<std::string>& chain) {
  if (chain.empty()) throw ConfigError("method chain is empty");
  std::set<std::string> seen;
  bool after_mps = false;
  for (const auto& s : chain) {
    if (!kStages.count(s)) throw ConfigError("unknown method '" + s + "' in chain (expected supernet, pit or mps)");
    if (!seen.insert(s).second) throw ConfigError("method '" + s + "' appears twice in the chain");
    if (after_mps) throw ConfigError("'" + s + "' cannot follow mps: architecture search needs a float graph");
    after_mps = s == "mps";
  }
}

ExperimentConfig parse_experiment(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known{"name",  "task",       "seed_graph", "chain",    "costs",
                                           "lambdas", "epochs",   "finetune_epochs", "batch_size", "lr_weights",
                                           "lr_arch", "warmup",   "tau",        "seed",     "dataset_sizes",
                                           "export_dir", "pit",   "mps"};
  for (const auto& [k, v] : doc.items()) {
    if (!known.count(k)) throw ConfigError("unknown experiment config key '" + k + "'");
  }
  ExperimentConfig cfg;
  try {
    cfg.name = doc.value("name", cfg.name);
    cfg.task = doc.value("task", cfg.task);
    cfg.seed_graph = doc.value("seed_graph", cfg.seed_graph);
    if (cfg.seed_graph.rfind("builtin:", 0) != 0) cfg.seed_graph = resolve(cfg.seed_graph, base_dir);
    if (doc.contains("chain")) cfg.chain = doc["chain"].get<std::vector<std::string>>();
    if (doc.contains("costs")) {
      for (const auto& [stage, c] : doc["costs"].items()) {
        if (!kStages.count(stage)) throw ConfigError("costs: unknown method '" + stage + "'");
        const auto name = c.get<std::string>();
        cfg.stage_cost[stage] = kBuiltinCosts.count(name) ? name : resolve(name, base_dir);
      }
    }
    if (doc.contains("lambdas")) cfg.lambdas = doc["lambdas"].get<std::vector<double>>();
    cfg.epochs = doc.value("epochs", cfg.epochs);
    cfg.finetune_epochs = doc.value("finetune_epochs", cfg.finetune_epochs);
    cfg.batch_size = doc.value("batch_size", cfg.batch_size);
    cfg.lr_weights = doc.value("lr_weights", cfg.lr_weights);
    cfg.lr_arch = doc.value("lr_arch", cfg.lr_arch);
    cfg.warmup = doc.value("warmup", cfg.warmup);
    cfg.tau = doc.value("tau", cfg.tau);
    cfg.seed = doc.value("seed", cfg.seed);
    if (doc.contains("dataset_sizes")) {
      const auto s = doc["dataset_sizes"].get<std::vector<int>>();
      if (s.size() != 3) throw ConfigError("dataset_sizes must list train, val and test sizes");
      cfg.sizes = SplitSizes{s[0], s[1], s[2]};
    }
    if (doc.contains("export_dir")) cfg.export_dir = resolve(doc["export_dir"].get<std::string>(), base_dir);
    if (doc.contains("pit")) {
      cfg.pit.exclude = doc["pit"].value("exclude", cfg.pit.exclude);
    }
    if (doc.contains("mps")) {
      const auto& m = doc["mps"];
      cfg.mps.bits = m.value("bits", cfg.mps.bits);
      cfg.mps.exclude = m.value("exclude", cfg.mps.exclude);
      cfg.mps.alpha_init = static_cast<Real>(m.value("alpha_init", static_cast<double>(cfg.mps.alpha_init)));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  validate_chain(cfg.chain);
  if (cfg.lambdas.empty()) throw ConfigError("lambdas must list at least one value");
  for (double l : cfg.lambdas) {
    if (!std::isfinite(l) || l < 0) throw ConfigError("lambda values must be finite and non-negative");
  }
  if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (cfg.finetune_epochs < 0) throw ConfigError("finetune_epochs must be non-negative");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(cfg.lr_weights > 0) || !(cfg.lr_arch > 0)) throw ConfigError("learning rates must be positive");
  if (cfg.warmup < 0 || cfg.warmup > 1) throw ConfigError("warmup must be within [0, 1]");
  if (!(cfg.tau > 0)) throw ConfigError("tau must be positive");
  return cfg;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment config " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("experiment config " + path.string() + ": " + e.what());
  }
  return parse_experiment(doc, path.parent_path());
}

json to_json(const ExperimentConfig& cfg) {
  return {{"name", cfg.name},
          {"task", cfg.task},
          {"seed_graph", cfg.seed_graph},
          {"chain", cfg.chain},
          {"costs", cfg.stage_cost},
          {"lambdas", cfg.lambdas},
          {"epochs", cfg.epochs},
          {"finetune_epochs", cfg.finetune_epochs},
          {"batch_size", cfg.batch_size},
          {"lr_weights", cfg.lr_weights},
          {"lr_arch", cfg.lr_arch},
          {"warmup", cfg.warmup},
          {"tau", cfg.tau},
          {"seed", cfg.seed},
          {"dataset_sizes", {cfg.sizes.train, cfg.sizes.val, cfg.sizes.test}},
          {"export_dir", cfg.export_dir.string()},
          {"pit", {{"exclude", cfg.pit.exclude}}},
          {"mps", {{"bits", cfg.mps.bits}, {"exclude", cfg.mps.exclude}, {"alpha_init", cfg.mps.alpha_init}}}};
}

Footprint footprint(const Graph& g) {
  NoGradGuard guard;
  Footprint f;
  f.params = cost::get_cost(g, cost::CostSpec::builtin("params")).item();
  f.params_bytes = cost::get_cost(g, cost::CostSpec::builtin("params_bytes")).item();
  f.macs = cost::get_cost(g, cost::CostSpec::builtin("macs")).item();
  return f;
}

TrainConfig train_config(const ExperimentConfig& cfg, const std::string& stage, double lambda) {
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.weights = OptimConfig{OptimKind::Sgd, static_cast<Real>(cfg.lr_weights)};
  tc.arch = OptimConfig{OptimKind::Adam, static_cast<Real>(cfg.lr_arch)};
  auto it = cfg.stage_cost.find(stage);
  if (it != cfg.stage_cost.end()) tc.terms.push_back(cost::Term{it->second, lambda, std::nullopt});
  tc.warmup = cfg.warmup;
  tc.tau = static_cast<Real>(cfg.tau);
  tc.seed = cfg.seed;
  return tc;
}

SearchableModel attach(const std::string& stage, const Graph& g, const ExperimentConfig& cfg) {
  if (stage == "supernet") return supernet::make_supernet(g);
  if (stage == "pit") return pit::make_pit(g, cfg.pit);
  if (stage == "mps") return mps::make_mps(g, cfg.mps);
  if (stage == "none") return make_plain(g);
  throw ConfigError("unknown method '" + stage + "'");
}

PipelineResult run_pipeline(const Graph& seed, const Splits& data, const ExperimentConfig& cfg, double lambda,
                            std::ostream* log) {
  validate_chain(cfg.chain);
  PipelineResult res;
  Graph g = seed;
  for (std::size_t i = 0; i < cfg.chain.size(); ++i) {
    const auto& stage = cfg.chain[i];
    if (log != nullptr) *log << "[" << stage << "] lambda " << format_lambda(lambda) << '\n';
    SearchableModel model = attach(stage, g, cfg);
    TrainConfig tc = train_config(cfg, stage, lambda);
    tc.log = log;
    StageReport rep;
    rep.method = stage;
    rep.lambda = lambda;
    rep.history = train_search(model, data, tc);
    rep.search_accuracy = evaluate(model, data.test, true);
    Graph exported = model.export_graph(&rep.export_report);
    if (i + 1 == cfg.chain.size()) {
      res.last_state = model.state();
      res.last_graph_json = graph_to_json(model.graph());
    }
    if (cfg.finetune_epochs > 0) {
      TrainConfig ft = tc;
      ft.epochs = cfg.finetune_epochs;
      (void)fine_tune(exported, data, ft);
    }
    rep.accuracy = evaluate(exported, data.test);
    rep.size = footprint(exported);
    if (log != nullptr) {
      *log << "[" << stage << "] accuracy " << rep.accuracy << " params " << rep.size.params << " bytes "
           << rep.size.params_bytes << '\n';
    }
    res.stages.push_back(std::move(rep));
    g = std::move(exported);
  }
  res.graph = std::move(g);
  return res;
}

json stage_json(const StageReport& s, bool with_time) {
  return {{"method", s.method},
          {"lambda", s.lambda},
          {"search_accuracy", s.search_accuracy},
          {"accuracy", s.accuracy},
          {"params", s.size.params},
          {"params_bytes", s.size.params_bytes},
          {"macs", s.size.macs},
          {"history", s.history.to_json(with_time)},
          {"export", s.export_report}};
}

json ParetoRecord::to_json() const {
  return {{"lambda", lambda},     {"chain", chain},   {"accuracy", accuracy},       {"params", params},
          {"params_bytes", params_bytes}, {"macs", macs}, {"dominated", dominated}, {"export_path", export_path},
          {"seconds", seconds},   {"error", error}};
}

ParetoRecord ParetoRecord::from_json(const json& j) {
  ParetoRecord r;
  try {
    r.lambda = j.at("lambda").get<double>();
    r.chain = j.at("chain").get<std::string>();
    r.accuracy = j.at("accuracy").get<double>();
    r.params = j.at("params").get<double>();
    r.params_bytes = j.at("params_bytes").get<double>();
    r.macs = j.at("macs").get<double>();
    r.dominated = j.value("dominated", false);
    r.export_path = j.value("export_path", std::string{});
    r.seconds = j.value("seconds", 0.0);
    r.error = j.value("error", std::string{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed result record: ") + e.what());
  }
  return r;
}

void flag_dominated(std::vector<ParetoRecord>& records) {
  for (auto& a : records) {
    a.dominated = !a.error.empty();
    if (a.dominated) continue;
    for (const auto& b : records) {
      if (&a == &b || !b.error.empty()) continue;
      const bool no_worse = b.accuracy >= a.accuracy && b.params_bytes <= a.params_bytes;
      const bool better = b.accuracy > a.accuracy || b.params_bytes < a.params_bytes;
      if (no_worse && better) {
        a.dominated = true;
        break;
      }
    }
  }
}

std::string format_lambda(double lambda) { return fmt("%g", lambda); }

std::string to_csv(const std::vector<ParetoRecord>& records) {
  std::ostringstream out;
  out << "lambda,chain,accuracy,params,params_bytes,macs,dominated,export_path,seconds\n";
  const double nan = std::nan("");
  for (const auto& r : records) {
    const bool ok = r.error.empty();
    out << format_lambda(r.lambda) << ',' << r.chain << ',' << fmt("%.6f", ok ? r.accuracy : nan) << ','
        << fmt("%.10g", ok ? r.params : nan) << ',' << fmt("%.10g", ok ? r.params_bytes : nan) << ','
        << fmt("%.10g", ok ? r.macs : nan) << ',' << (r.dominated ? "true" : "false") << ',' << r.export_path << ','
        << fmt("%.3f", r.seconds) << '\n';
  }
  return out.str();
}

void write_csv(const fs::path& path, const std::vector<ParetoRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << to_csv(records);
}

std::string to_svg(const std::vector<ParetoRecord>& records) {
  constexpr double W = 640, H = 420, L = 70, R = 20, T = 30, B = 50;
  std::vector<const ParetoRecord*> ok;
  for (const auto& r : records) {
    if (r.error.empty() && r.params_bytes > 0) ok.push_back(&r);
  }
  double xmin = 1, xmax = 10, ymin = 0, ymax = 1;
  if (!ok.empty()) {
    xmin = xmax = std::log10(ok[0]->params_bytes);
    ymin = ymax = ok[0]->accuracy;
    for (const auto* r : ok) {
      xmin = std::min(xmin, std::log10(r->params_bytes));
      xmax = std::max(xmax, std::log10(r->params_bytes));
      ymin = std::min(ymin, r->accuracy);
      ymax = std::max(ymax, r->accuracy);
    }
    xmin -= 0.1;
    xmax += 0.1;
    ymin = std::max(0.0, ymin - 0.05);
    ymax = std::min(1.0, ymax + 0.05);
    if (ymax <= ymin) ymax = ymin + 0.1;
  }
  auto px = [&](double bytes) { return L + (std::log10(bytes) - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double acc) { return H - B - (acc - ymin) / (ymax - ymin) * (H - T - B); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double e = xmin + (xmax - xmin) * i / 4, a = ymin + (ymax - ymin) * i / 4;
    s << "<text x=\"" << fmt("%.1f", L + (W - L - R) * i / 4) << "\" y=\"" << H - B + 18
      << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt("%.3g", std::pow(10.0, e)) << "</text>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << fmt("%.1f", py(a) + 4) << "\" font-size=\"11\" text-anchor=\"end\">"
      << fmt("%.3f", a) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
    << "\" font-size=\"12\" text-anchor=\"middle\">params_bytes (log)</text>\n";
  s << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (T + H - B) / 2 << ")\">accuracy</text>\n";

  std::vector<const ParetoRecord*> front;
  for (const auto* r : ok) {
    if (!r->dominated) front.push_back(r);
  }
  std::sort(front.begin(), front.end(),
            [](const ParetoRecord* a, const ParetoRecord* b) { return a->params_bytes < b->params_bytes; });
  if (!front.empty()) {
    s << "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"";
    for (const auto* r : front) s << fmt("%.1f", px(r->params_bytes)) << ',' << fmt("%.1f", py(r->accuracy)) << ' ';
    s << "\"/>\n";
  }
  for (const auto* r : ok) {
    s << "<circle cx=\"" << fmt("%.1f", px(r->params_bytes)) << "\" cy=\"" << fmt("%.1f", py(r->accuracy))
      << "\" r=\"4\" fill=\"" << (r->dominated ? "#999999" : "#1f77b4") << "\"><title>" << r->chain << " lambda "
      << format_lambda(r->lambda) << "</title></circle>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<ParetoRecord> collect_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ParetoRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    json doc;
    try {
      in >> doc;
    } catch (const json::exception&) {
      continue;
    }
    if (doc.is_object() && doc.contains("record")) out.push_back(ParetoRecord::from_json(doc["record"]));
  }
  std::stable_sort(out.begin(), out.end(), [](const ParetoRecord& a, const ParetoRecord& b) {
    return a.chain != b.chain ? a.chain < b.chain : a.lambda > b.lambda;
  });
  flag_dominated(out);
  return out;
}

std::vector<ParetoRecord> sweep(const ExperimentConfig& cfg, std::ostream* log) {
  validate_chain(cfg.chain);
  const Splits data = generate_dataset(cfg.task, cfg.seed, cfg.sizes);
  const Graph seed = load_seed(cfg.seed_graph, cfg.seed, data.train.classes);
  fs::create_directories(cfg.export_dir);
  const std::string chain = join(cfg.chain, "+");

  std::vector<ParetoRecord> records;
  for (double lambda : cfg.lambdas) {
    ParetoRecord rec;
    rec.lambda = lambda;
    rec.chain = chain;
    const auto start = std::chrono::steady_clock::now();
    try {
      PipelineResult res = run_pipeline(seed, data, cfg, lambda, log);
      const auto& last = res.stages.back();
      rec.accuracy = last.accuracy;
      rec.params = last.size.params;
      rec.params_bytes = last.size.params_bytes;
      rec.macs = last.size.macs;
      const fs::path path = cfg.export_dir / (join(cfg.chain, "_") + "_lambda" + format_lambda(lambda) + ".json");
      rec.export_path = path.filename().string();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      json stages = json::array();
      for (const auto& s : res.stages) stages.push_back(stage_json(s));
      save_graph(res.graph, path, {{"record", rec.to_json()}, {"stages", stages}});
    } catch (const std::exception& e) {
      rec.error = e.what();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (log != nullptr) *log << "lambda " << format_lambda(lambda) << " failed: " << rec.error << '\n';
    }
    records.push_back(std::move(rec));
  }
  flag_dominated(records);
  write_csv(cfg.export_dir / "pareto.csv", records);
  return records;
}

}  // namespace train
FORGE_NAMESPACE_END
