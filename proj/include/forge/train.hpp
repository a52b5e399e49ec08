#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "forge/cost.hpp"
#include "forge/search.hpp"

FORGE_NAMESPACE_BEGIN
namespace train {

struct Dataset {
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  int classes = 0;

  [[nodiscard]] std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  /// Rows `idx[begin, end)` as one batch.
  [[nodiscard]] Tensor batch(const std::vector<std::int64_t>& idx, std::size_t begin, std::size_t end) const;
  [[nodiscard]] std::vector<int> batch_labels(const std::vector<std::int64_t>& idx, std::size_t begin,
                                              std::size_t end) const;
};

struct Splits {
  Dataset train, val, test;
};

struct SplitSizes {
  int train = 2000, val = 500, test = 500;
};

/// "shapes16" (squares, discs and crosses), "rings" (small or large ring) or
/// "parity-patch" (checkerboard or striped patch); 1x16x16 images with
/// additive noise. Classes are balanced within one sample per split.
[[nodiscard]] Splits generate_dataset(const std::string& name, std::uint64_t seed, SplitSizes sizes = {});
[[nodiscard]] const std::vector<std::string>& dataset_names();

enum class OptimKind { Sgd, Adam };

struct OptimConfig {
  OptimKind kind = OptimKind::Sgd;
  Real lr = Real(0.01);
  Real momentum = Real(0.9);
  Real beta1 = Real(0.9), beta2 = Real(0.999), eps = Real(1e-8);
};

class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimConfig cfg);

  /// Updates every parameter that received a gradient.
  void step();
  void zero_grad();
  [[nodiscard]] const std::vector<Tensor>& params() const { return params_; }
  [[nodiscard]] const OptimConfig& config() const { return cfg_; }
  void set_lr(Real lr) { cfg_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  OptimConfig cfg_;
  std::vector<std::vector<Real>> m_, v_;
  std::vector<std::int64_t> t_;
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  OptimConfig weights{OptimKind::Sgd, Real(0.01)};
  OptimConfig arch{OptimKind::Adam, Real(0.01)};
  /// Cosine decay of the weight learning rate over the epochs.
  bool cosine = true;
  /// Regularizers; each names a builtin cost or a cost spec file.
  std::vector<cost::Term> terms;
  /// Extra costs reported in the history but not optimized.
  std::vector<std::string> track;
  /// Fraction of the epochs during which the architecture is frozen.
  double warmup = 0.1;
  Real tau = 1;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0, task_loss = 0;
  double train_accuracy = 0, val_accuracy = 0;
  std::map<std::string, double> costs;
  double seconds = 0;
};

struct History {
  std::vector<EpochStats> epochs;
  [[nodiscard]] nlohmann::json to_json(bool with_time = true) const;
};

/// Joint descent on task loss plus the weighted regularizers, over the
/// weights (cfg.weights) and the architectural parameters (cfg.arch).
/// Throws NumericError naming epoch and batch on a non-finite loss.
History train_search(SearchableModel& model, const Splits& data, const TrainConfig& cfg);

/// Plain training of `g` in place, without regularizers.
History fine_tune(Graph& g, const Splits& data, TrainConfig cfg);

/// Fraction of correctly classified samples in eval mode.
[[nodiscard]] double evaluate(const SearchableModel& model, const Dataset& d, bool discrete = false);
[[nodiscard]] double evaluate(const Graph& g, const Dataset& d);

}  // namespace train
FORGE_NAMESPACE_END
