#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "forge/mps.hpp"
#include "forge/pit.hpp"
#include "forge/train.hpp"

FORGE_NAMESPACE_BEGIN
namespace train {

struct ExperimentConfig {
  std::string name = "experiment";
  std::string task = "shapes16";
  /// "builtin:<name>" or a graph JSON path.
  std::string seed_graph = "builtin:seed_cnn";
  std::vector<std::string> chain{"pit"};
  /// Regularized cost per stage: builtin name or cost spec path.
  std::map<std::string, std::string> stage_cost{{"supernet", "params"}, {"pit", "params"}, {"mps", "params_bytes"}};
  std::vector<double> lambdas{1e-6};
  int epochs = 20;
  int finetune_epochs = 5;
  int batch_size = 32;
  double lr_weights = 0.01;
  double lr_arch = 0.01;
  double warmup = 0.1;
  double tau = 1;
  std::uint64_t seed = 0;
  SplitSizes sizes;
  std::filesystem::path export_dir = "runs";
  pit::Options pit;
  mps::Options mps;
};

/// Relative paths in the document resolve against `base_dir`.
[[nodiscard]] ExperimentConfig parse_experiment(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
[[nodiscard]] ExperimentConfig load_experiment(const std::filesystem::path& path);
[[nodiscard]] nlohmann::json to_json(const ExperimentConfig& cfg);

/// Stages are unique members of {supernet, pit, mps}; a NAS stage may not
/// follow mps.
void validate_chain(const std::vector<std::string>& chain);

[[nodiscard]] const std::vector<std::string>& builtin_seed_names();
/// JSON description of a builtin seed: "tiny_cnn" (two conv layers),
/// "seed_cnn" (three conv blocks) or "supernet_cnn" (seed_cnn with
/// alternative blocks).
[[nodiscard]] nlohmann::json builtin_seed(const std::string& name, int classes = 3);
[[nodiscard]] Graph load_seed(const std::string& spec, std::uint64_t seed, int classes = 3);

/// Builtin params, params_bytes and macs of a plain graph.
struct Footprint {
  double params = 0, params_bytes = 0, macs = 0;
};
[[nodiscard]] Footprint footprint(const Graph& g);

[[nodiscard]] TrainConfig train_config(const ExperimentConfig& cfg, const std::string& stage, double lambda);
/// Searchable model of `g` for one stage name.
[[nodiscard]] SearchableModel attach(const std::string& stage, const Graph& g, const ExperimentConfig& cfg);

struct StageReport {
  std::string method;
  double lambda = 0;
  double search_accuracy = 0;  // discrete eval on the test split before export
  double accuracy = 0;         // exported graph after fine-tuning, test split
  Footprint size;
  History history;
  nlohmann::json export_report;
};

struct PipelineResult {
  Graph graph;
  std::vector<StageReport> stages;
  /// Search state of the last stage, with its weights.
  ArrayMap last_state;
  nlohmann::json last_graph_json;
};

/// Search, export and fine-tune each stage in turn, feeding the exported
/// graph to the next one.
[[nodiscard]] PipelineResult run_pipeline(const Graph& seed, const Splits& data, const ExperimentConfig& cfg,
                                          double lambda, std::ostream* log = nullptr);

[[nodiscard]] nlohmann::json stage_json(const StageReport& s, bool with_time = true);

struct ParetoRecord {
  double lambda = 0;
  std::string chain;
  double accuracy = 0;
  double params = 0, params_bytes = 0, macs = 0;
  bool dominated = false;
  std::string export_path;
  double seconds = 0;
  std::string error;  // non-empty for a failed run

  [[nodiscard]] nlohmann::json to_json() const;
  static ParetoRecord from_json(const nlohmann::json& j);
};

/// Flags every record beaten by another in (accuracy up, params_bytes down).
/// Failed records are always flagged.
void flag_dominated(std::vector<ParetoRecord>& records);

/// One pipeline per lambda. A failing lambda is recorded and the sweep goes
/// on. Writes the exported graphs and pareto.csv under cfg.export_dir.
[[nodiscard]] std::vector<ParetoRecord> sweep(const ExperimentConfig& cfg, std::ostream* log = nullptr);

[[nodiscard]] std::string format_lambda(double lambda);
[[nodiscard]] std::string to_csv(const std::vector<ParetoRecord>& records);
void write_csv(const std::filesystem::path& path, const std::vector<ParetoRecord>& records);
/// Accuracy against params_bytes, non-dominated front as a polyline.
[[nodiscard]] std::string to_svg(const std::vector<ParetoRecord>& records);
/// Records stored in the exported graph files of a directory.
[[nodiscard]] std::vector<ParetoRecord> collect_records(const std::filesystem::path& dir);

}  // namespace train
FORGE_NAMESPACE_END
