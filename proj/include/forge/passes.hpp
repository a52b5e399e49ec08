#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "forge/graph.hpp"

FORGE_NAMESPACE_BEGIN
namespace passes {

// Target identification ------------------------------------------------------

struct TargetSelection {
  std::vector<std::string> targets;  // topological order
  std::vector<std::string> warnings;
};

/// Conv2d, DepthwiseConv2d and Linear nodes not matched by any rule. A rule
/// matches a node id or a kind name.
[[nodiscard]] TargetSelection identify_targets(const Graph& g, std::span<const std::string> exclude = {});

// Mask sharing ---------------------------------------------------------------

struct MaskGroup {
  int id = 0;
  std::vector<std::string> members;  // output-channel owners, topological order
  std::int64_t size = 0;
  /// Frozen groups never lose channels: they reach a graph input or output,
  /// contain an excluded layer, or feed an Add together with a Concat.
  bool frozen = false;
  std::string frozen_reason;
};

/// One contiguous run of channels along axis 1 that belongs to a single
/// group (-1 when no mask can remove them). After a Flatten each channel
/// expands into `multiplier` consecutive features.
struct Segment {
  int group = -1;
  std::int64_t channels = 0;
  std::int64_t multiplier = 1;
};

struct ChannelLayout {
  std::vector<Segment> segments;
  [[nodiscard]] std::int64_t width() const;
};

struct SharingResult {
  std::vector<MaskGroup> groups;
  std::map<std::string, ChannelLayout> layouts;  // every node
  std::map<std::string, int> group_of;           // every member
};

/// Union-find grouping of output-channel masks.
[[nodiscard]] SharingResult analyze_sharing(const Graph& g, std::span<const std::string> targets);
[[nodiscard]] std::vector<MaskGroup> share_masks(const Graph& g, std::span<const std::string> targets);

// BatchNorm folding ----------------------------------------------------------

struct FoldResult {
  Graph graph;
  std::vector<std::string> folded;  // BN ids absorbed
  std::vector<std::string> warnings;
};

/// W' = gamma W / sqrt(var + eps), b' = gamma (b - mean) / sqrt(var + eps) + beta.
[[nodiscard]] FoldResult fold_bn(const Graph& g);
/// Restores a BatchNorm after every node carrying a FoldedBN record.
[[nodiscard]] Graph unfold_bn(const Graph& g);
/// True when fold_bn would absorb at least one BatchNorm.
[[nodiscard]] bool has_foldable_bn(const Graph& g);

// Effective shape calculators -----------------------------------------------

struct ShapeCalculator {
  enum class Transform { Identity, MultiplyByK, SumOfInputs, Constant, MaskGroup };
  Transform transform = Transform::Constant;
  std::vector<std::string> links;  // channel-defining predecessors
  std::int64_t k = 1;
  std::int64_t constant = 0;
  int group = -1;
};

[[nodiscard]] std::string_view transform_name(ShapeCalculator::Transform t);

/// Node id -> calculator of its effective output channels (features after a
/// Flatten). Members of one mask group share one calculator instance.
using CalculatorTable = std::map<std::string, std::shared_ptr<const ShapeCalculator>>;

/// Builds the calculators and records the predecessor link and transform of
/// each node in its annotations.
CalculatorTable attach_shape_calculators(Graph& g, const SharingResult& sharing);

/// Effective output extent per node given the effective channel count of
/// each mask group. Differentiable in the counts.
[[nodiscard]] std::map<std::string, Tensor> evaluate_calculators(
    const Graph& g, const CalculatorTable& table, const std::function<Tensor(int group)>& group_count);

// Export ---------------------------------------------------------------------

/// Replaces each combiner by the branch `choose` picks and drops the rest.
[[nodiscard]] Graph export_supernet(const Graph& g, const std::function<int(const Node& combiner)>& choose);

/// Physically removes channels. `kept[group]` lists surviving channel
/// indices in ascending order; groups absent from the map keep everything.
[[nodiscard]] Graph export_pruned(const Graph& g, const SharingResult& sharing,
                                  const std::map<int, std::vector<std::int64_t>>& kept);

/// Removes Identity nodes and nodes that no Output depends on.
void cleanup(Graph& g);

/// Pass report helper: kept/total output channels of each weighted node.
[[nodiscard]] nlohmann::json channel_report(const Graph& before, const Graph& after);

}  // namespace passes
FORGE_NAMESPACE_END
