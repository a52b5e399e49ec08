#pragma once

#include <filesystem>
#include <string_view>

#include <json.hpp>

#include "forge/checkpoint.hpp"
#include "forge/graph.hpp"

FORGE_NAMESPACE_BEGIN

/// Builds and validates a graph from its JSON description. Nodes of kind
/// "SuperNet" carry "supernet_branches", a list of node chains (an empty chain
/// is the identity); each is expanded into parallel branches named
/// "<id>.b<i>.<node>" that join in a SuperNetCombiner called <id>. Missing
/// input extents (in_channels, channels, in_features) are inferred, and
/// weights are initialized from `seed`.
[[nodiscard]] Graph graph_from_json(const nlohmann::json& doc, std::uint64_t seed = 0);
[[nodiscard]] Graph parse_graph(std::string_view text, std::uint64_t seed = 0);

/// Expanded form, readable by graph_from_json. Weights are not included.
[[nodiscard]] nlohmann::json graph_to_json(const Graph& g);

/// Weights keyed "<node id>.<weight name>".
[[nodiscard]] ArrayMap graph_weights(const Graph& g);
/// Overwrites matching weights; every graph weight must be present.
void assign_weights(Graph& g, const ArrayMap& arrays);

/// Path of the checkpoint that accompanies a graph file.
[[nodiscard]] std::filesystem::path weights_path(const std::filesystem::path& graph_json);

/// Writes `graph_json` plus its checkpoint. Keys of `extra` are merged into
/// the top-level JSON object.
void save_graph(const Graph& g, const std::filesystem::path& graph_json, const nlohmann::json& extra = {},
                const ArrayMap& extra_arrays = {});
/// Reads a graph file and, when present, its checkpoint.
[[nodiscard]] Graph load_graph(const std::filesystem::path& graph_json);

FORGE_NAMESPACE_END
