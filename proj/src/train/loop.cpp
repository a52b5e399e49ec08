#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "forge/ops.hpp"
#include "forge/train.hpp"

FORGE_NAMESPACE_BEGIN
namespace train {

namespace {

constexpr std::int64_t kEvalBatch = 250;

int count_correct(const Tensor& logits, const std::vector<int>& labels) {
  const auto v = logits.values();
  const std::int64_t k = logits.dim(1);
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto* row = v.data() + static_cast<std::int64_t>(i) * k;
    const auto best = std::max_element(row, row + k) - row;
    correct += best == labels[i] ? 1 : 0;
  }
  return correct;
}

std::vector<std::int64_t> iota(std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), std::int64_t{0});
  return idx;
}

}  // namespace

nlohmann::json History::to_json(bool with_time) const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json row{{"epoch", e.epoch},
                       {"loss", e.loss},
                       {"task_loss", e.task_loss},
                       {"train_accuracy", e.train_accuracy},
                       {"val_accuracy", e.val_accuracy},
                       {"costs", e.costs}};
    if (with_time) row["seconds"] = e.seconds;
    out.push_back(std::move(row));
  }
  return out;
}

double evaluate(const SearchableModel& model, const Dataset& d, bool discrete) {
  NoGradGuard guard;
  ExecOptions opt;
  opt.discrete = discrete;
  const auto idx = iota(d.size());
  int correct = 0;
  for (std::int64_t b = 0; b < d.size(); b += kEvalBatch) {
    const auto begin = static_cast<std::size_t>(b), end = static_cast<std::size_t>(std::min(d.size(), b + kEvalBatch));
    correct += count_correct(model.forward(d.batch(idx, begin, end), opt), d.batch_labels(idx, begin, end));
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

double evaluate(const Graph& g, const Dataset& d) {
  PlainMethod plain;
  NoGradGuard guard;
  const auto idx = iota(d.size());
  int correct = 0;
  for (std::int64_t b = 0; b < d.size(); b += kEvalBatch) {
    const auto begin = static_cast<std::size_t>(b), end = static_cast<std::size_t>(std::min(d.size(), b + kEvalBatch));
    correct += count_correct(run(g, d.batch(idx, begin, end), {}, &plain), d.batch_labels(idx, begin, end));
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

History train_search(SearchableModel& model, const Splits& data, const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (cfg.batch_size <= 0) throw ConfigError("batch size must be positive");
  if (cfg.warmup < 0 || cfg.warmup > 1) throw ConfigError("warmup must be a fraction of the epochs");

  std::map<std::string, cost::CostSpec> specs;
  std::vector<cost::Term> active;
  for (const auto& t : cfg.terms) {
    specs.emplace(t.cost, cost::CostSpec::load(t.cost));
    if (t.lambda != 0) active.push_back(t);
  }
  for (const auto& name : cfg.track) specs.emplace(name, cost::CostSpec::load(name));

  Optimizer wopt(model.weight_parameters(), cfg.weights);
  Optimizer aopt(model.arch_parameters(), cfg.arch);
  const int frozen_epochs = static_cast<int>(std::ceil(cfg.warmup * cfg.epochs));

  std::mt19937_64 order_rng(cfg.seed), noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  ExecOptions opt;
  opt.training = true;
  opt.rng = &noise_rng;
  opt.tau = cfg.tau;

  const Dataset& train = data.train;
  auto idx = iota(train.size());
  History history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    if (cfg.cosine) {
      const double phase = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
      wopt.set_lr(static_cast<Real>(0.5 * cfg.weights.lr * (1 + std::cos(phase * 3.141592653589793))));
    }
    std::shuffle(idx.begin(), idx.end(), order_rng);
    double loss_sum = 0, task_sum = 0;
    int correct = 0, batch_no = 0;
    for (std::size_t b = 0; b < idx.size(); b += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::size_t end = std::min(idx.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const auto labels = train.batch_labels(idx, b, end);
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no);
      Tensor logits, task, loss;
      try {
        logits = model.forward(train.batch(idx, b, end), opt);
        task = ops::cross_entropy(logits, labels);
        std::map<std::string, Tensor> costs;
        for (const auto& t : active) {
          if (!costs.count(t.cost)) costs[t.cost] = model.get_cost(specs.at(t.cost));
        }
        loss = cost::combine_costs(task, costs, active);
      } catch (const NumericError& e) {
        throw NumericError(where + ": " + e.what());
      }
      const Real lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError(where + ": loss is not finite");
      wopt.zero_grad();
      aopt.zero_grad();
      loss.backward();
      wopt.step();
      if (epoch >= frozen_epochs) aopt.step();
      const double n = static_cast<double>(end - b);
      loss_sum += lv * n;
      task_sum += task.item() * n;
      correct += count_correct(logits, labels);
    }
    wopt.zero_grad();
    aopt.zero_grad();

    EpochStats st;
    st.epoch = epoch;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double n = static_cast<double>(train.size());
    st.loss = loss_sum / n;
    st.task_loss = task_sum / n;
    st.train_accuracy = correct / n;
    st.val_accuracy = evaluate(model, data.val);
    {
      NoGradGuard guard;
      for (const auto& [name, spec] : specs) st.costs[name] = model.get_cost(spec).item();
    }
    if (cfg.log != nullptr) {
      *cfg.log << "epoch " << epoch << " loss " << st.loss << " train " << st.train_accuracy << " val "
               << st.val_accuracy;
      for (const auto& [name, v] : st.costs) *cfg.log << ' ' << name << ' ' << v;
      *cfg.log << " (" << st.seconds << "s)\n";
    }
    history.epochs.push_back(std::move(st));
  }
  return history;
}

History fine_tune(Graph& g, const Splits& data, TrainConfig cfg) {
  cfg.terms.clear();
  cfg.warmup = 0;
  SearchableModel model = make_plain(std::move(g));
  History h = train_search(model, data, cfg);
  g = std::move(model.graph());
  return h;
}

}  // namespace train
FORGE_NAMESPACE_END
