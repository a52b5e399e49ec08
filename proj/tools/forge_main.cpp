#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "forge/experiment.hpp"
#include "forge/graph_io.hpp"

using namespace forge;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

void print_records(const std::vector<train::ParetoRecord>& records) {
  std::printf("%-10s %-18s %9s %10s %12s %12s %s\n", "lambda", "chain", "accuracy", "params", "bytes", "macs", "front");
  for (const auto& r : records) {
    if (!r.error.empty()) {
      std::printf("%-10s %-18s failed: %s\n", train::format_lambda(r.lambda).c_str(), r.chain.c_str(), r.error.c_str());
      continue;
    }
    std::printf("%-10s %-18s %9.4f %10.0f %12.1f %12.0f %s\n", train::format_lambda(r.lambda).c_str(),
                r.chain.c_str(), r.accuracy, r.params, r.params_bytes, r.macs, r.dominated ? "" : "*");
  }
}

int cmd_run(const std::string& config, std::optional<double> lambda, const std::string& out_dir, bool quiet) {
  auto cfg = train::load_experiment(config);
  if (!out_dir.empty()) cfg.export_dir = out_dir;
  const double lam = lambda.value_or(cfg.lambdas.front());
  const auto data = train::generate_dataset(cfg.task, cfg.seed, cfg.sizes);
  const Graph seed = train::load_seed(cfg.seed_graph, cfg.seed, data.train.classes);
  const auto before = train::footprint(seed);

  const auto start = std::chrono::steady_clock::now();
  auto res = train::run_pipeline(seed, data, cfg, lam, quiet ? nullptr : &std::cerr);
  fs::create_directories(cfg.export_dir);

  train::ParetoRecord rec;
  rec.lambda = lam;
  for (const auto& m : cfg.chain) rec.chain += (rec.chain.empty() ? "" : "+") + m;
  rec.accuracy = res.stages.back().accuracy;
  rec.params = res.stages.back().size.params;
  rec.params_bytes = res.stages.back().size.params_bytes;
  rec.macs = res.stages.back().size.macs;
  rec.export_path = "exported.json";
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  json stages = json::array();
  for (const auto& s : res.stages) stages.push_back(train::stage_json(s));
  const auto exported = cfg.export_dir / "exported.json";
  save_graph(res.graph, exported, {{"record", rec.to_json()}, {"stages", stages}, {"config", train::to_json(cfg)}});

  json search = res.last_graph_json;
  search["search"] = {{"method", cfg.chain.back()}, {"config", train::to_json(cfg)}};
  {
    std::ofstream out(cfg.export_dir / "search.json");
    out << search.dump(1) << '\n';
  }
  write_checkpoint(weights_path(cfg.export_dir / "search.json"), res.last_state);

  std::printf("seed: params %.0f bytes %.1f\n", before.params, before.params_bytes);
  for (const auto& s : res.stages) {
    std::printf("%-9s accuracy %.4f params %.0f bytes %.1f macs %.0f\n", s.method.c_str(), s.accuracy, s.size.params,
                s.size.params_bytes, s.size.macs);
  }
  std::printf("exported %s\n", exported.string().c_str());
  return 0;
}

int cmd_sweep(const std::string& config, const std::string& out_dir, bool quiet) {
  auto cfg = train::load_experiment(config);
  if (!out_dir.empty()) cfg.export_dir = out_dir;
  const auto records = train::sweep(cfg, quiet ? nullptr : &std::cerr);
  std::ofstream(cfg.export_dir / "pareto.svg") << train::to_svg(records);
  print_records(records);
  std::printf("wrote %s\n", (cfg.export_dir / "pareto.csv").string().c_str());
  bool any_ok = false;
  for (const auto& r : records) any_ok = any_ok || r.error.empty();
  return any_ok ? 0 : kRuntimeError;
}

int cmd_export(const std::string& ckpt, const std::string& out_dir) {
  std::ifstream in(ckpt);
  if (!in) throw ConfigError("cannot open checkpoint " + ckpt);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint " + ckpt + ": " + e.what());
  }
  if (!doc.contains("search")) throw ConfigError(ckpt + " is not a search checkpoint (no 'search' entry)");
  const auto method = doc["search"].at("method").get<std::string>();
  const auto cfg = train::parse_experiment(doc["search"].at("config"));
  const ArrayMap arrays = read_checkpoint(weights_path(ckpt));
  Graph g = graph_from_json(doc);
  assign_weights(g, arrays);
  auto model = train::attach(method, g, cfg);
  model.method().load_state(arrays);
  json report;
  Graph exported = model.export_graph(&report);
  const auto path = fs::path(out_dir) / "exported.json";
  save_graph(exported, path, {{"export", report}});
  const auto f = train::footprint(exported);
  std::printf("%s export: params %.0f bytes %.1f macs %.0f\nwrote %s\n", method.c_str(), f.params, f.params_bytes,
              f.macs, path.string().c_str());
  return 0;
}

int cmd_report(const std::string& dir, const std::string& csv, const std::string& svg) {
  const auto records = train::collect_records(dir);
  if (records.empty()) throw ConfigError("no result records found in " + dir);
  train::write_csv(csv, records);
  std::ofstream out(svg);
  if (!out) throw Error("cannot write " + svg);
  out << train::to_svg(records);
  print_records(records);
  std::printf("wrote %s and %s\n", csv.c_str(), svg.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"forge: gradient-based architecture and precision search"};
  app.require_subcommand(1);

  std::string config, out_dir, ckpt, dir, csv = "pareto.csv", svg = "pareto.svg";
  std::optional<double> lambda;
  bool quiet = false;

  auto* run = app.add_subcommand("run", "Run the method chain once and export the result");
  run->add_option("config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--lambda", lambda, "Regularization strength (default: first of the config list)");
  run->add_option("-o,--out", out_dir, "Output directory (overrides export_dir)");
  run->add_flag("-q,--quiet", quiet, "No per-epoch log");

  auto* sw = app.add_subcommand("sweep", "One run per lambda, with Pareto CSV and SVG");
  sw->add_option("config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sw->add_option("-o,--out", out_dir, "Output directory (overrides export_dir)");
  sw->add_flag("-q,--quiet", quiet, "No per-epoch log");

  auto* ex = app.add_subcommand("export", "Export a search checkpoint to a plain graph");
  ex->add_option("ckpt", ckpt, "search.json written by 'run'")->required()->check(CLI::ExistingFile);
  ex->add_option("-o,--out", out_dir, "Output directory")->required();

  auto* rep = app.add_subcommand("report", "Collect exported records into a CSV and an SVG plot");
  rep->add_option("dir", dir, "Directory of exported graphs")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--csv", csv, "CSV output path");
  rep->add_option("--svg", svg, "SVG output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (run->parsed()) return cmd_run(config, lambda, out_dir, quiet);
    if (sw->parsed()) return cmd_sweep(config, out_dir, quiet);
    if (ex->parsed()) return cmd_export(ckpt, out_dir);
    return cmd_report(dir, csv, svg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const GraphError& e) {
    std::cerr << "graph error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}
