#pragma once

#include <string>
#include <vector>

#include "forge/passes.hpp"
#include "forge/search.hpp"

FORGE_NAMESPACE_BEGIN
namespace pit {

inline constexpr Real kThreshold = Real(0.5);

struct ChannelMask {
  int group = 0;
  Tensor theta;  // [C]
  Real threshold = kThreshold;
  /// Frozen masks keep every channel and are not trained.
  bool frozen = false;
};

/// H(theta) with the identity straight-through gradient. If every channel
/// falls below the threshold, the one with the largest logit is kept.
[[nodiscard]] Tensor binarize(const ChannelMask& mask);

/// Output channel c of `w` scaled by H(theta_c).
[[nodiscard]] Tensor masked_weight(const Tensor& w, const ChannelMask& mask);

/// sum_c H(theta_c), differentiable through the straight-through rule.
[[nodiscard]] Tensor effective_channel_count(const ChannelMask& mask);

/// Ascending indices of the channels that survive binarization.
[[nodiscard]] std::vector<std::int64_t> kept_channels(const ChannelMask& mask);

struct Options {
  std::vector<std::string> exclude;
  Real theta_init = 1;
};

class PitMethod final : public SearchMethod {
 public:
  PitMethod(Graph& g, const Options& opt);

  [[nodiscard]] std::string name() const override { return "pit"; }
  [[nodiscard]] Tensor weight(const Node& n, const std::string& name, const Tensor& w,
                              const ExecOptions& opt) const override;
  [[nodiscard]] std::vector<Tensor> arch_parameters() const override;
  [[nodiscard]] Tensor get_cost(const Graph& g, const cost::CostSpec& spec) const override;
  [[nodiscard]] Graph export_graph(const Graph& g, nlohmann::json* report) const override;
  [[nodiscard]] ArrayMap state() const override;

  [[nodiscard]] const std::vector<ChannelMask>& masks() const { return masks_; }
  [[nodiscard]] std::vector<ChannelMask>& masks() { return masks_; }
  [[nodiscard]] const passes::SharingResult& sharing() const { return sharing_; }
  [[nodiscard]] const passes::CalculatorTable& calculators() const { return calculators_; }
  [[nodiscard]] const std::vector<std::string>& warnings() const { return warnings_; }
  /// Effective output extent of every node.
  [[nodiscard]] std::map<std::string, Tensor> effective_extents(const Graph& g) const;

 private:
  passes::SharingResult sharing_;
  passes::CalculatorTable calculators_;
  std::vector<ChannelMask> masks_;
  ShapeMap shapes_;
  std::vector<std::string> warnings_;
  std::vector<std::string> folded_;
};

/// Folds BatchNorm, finds targets and mask groups, attaches calculators and
/// one mask per group. Rejects graphs that carry quantization annotations.
[[nodiscard]] SearchableModel make_pit(const Graph& seed, const Options& opt = {});

}  // namespace pit
FORGE_NAMESPACE_END
