#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "forge/tensor.hpp"

FORGE_NAMESPACE_BEGIN

/// Named arrays in the flat "DNFT" container. Ordered by name so that the
/// byte stream only depends on the contents.
using ArrayMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const ArrayMap& arrays);
[[nodiscard]] ArrayMap read_checkpoint(const std::filesystem::path& path);

[[nodiscard]] std::string encode_checkpoint(const ArrayMap& arrays);
[[nodiscard]] ArrayMap decode_checkpoint(const std::string& bytes);

FORGE_NAMESPACE_END
