#pragma once

#include <span>

#include "forge/executor.hpp"

FORGE_NAMESPACE_BEGIN
namespace supernet {

/// Mixing weights for one combiner: Gumbel-softmax samples in training mode
/// (when opt.rng is set), the noise-free tempered softmax otherwise.
[[nodiscard]] Tensor branch_weights(const Tensor& theta, const ExecOptions& opt);

/// Weighted sum of equally shaped branch outputs. In discrete mode the
/// selected branch is returned as is.
[[nodiscard]] Tensor combine(std::span<const Tensor> branches, const Tensor& theta, const ExecOptions& opt);

/// sum_i softmax(theta)_i * costs_i, always noise-free.
[[nodiscard]] Tensor expected_branch_cost(const Tensor& theta, std::span<const Tensor> costs);

/// Index of the largest logit; the lowest index wins ties.
[[nodiscard]] int select(const Tensor& theta);

}  // namespace supernet
FORGE_NAMESPACE_END
