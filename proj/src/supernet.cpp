#include "forge/supernet.hpp"

#include "forge/ops.hpp"

FORGE_NAMESPACE_BEGIN
namespace supernet {

Tensor branch_weights(const Tensor& theta, const ExecOptions& opt) {
  if (opt.training && opt.rng != nullptr) {
    return ops::gumbel_softmax(theta, opt.tau, ops::sample_gumbel(theta.shape(), *opt.rng));
  }
  return ops::gumbel_softmax(theta, opt.tau);
}

Tensor combine(std::span<const Tensor> branches, const Tensor& theta, const ExecOptions& opt) {
  if (branches.empty()) throw ShapeError("supernet combine needs at least one branch");
  if (theta.numel() != static_cast<std::int64_t>(branches.size())) {
    throw ShapeError("supernet combine: " + std::to_string(theta.numel()) + " logits for " +
                     std::to_string(branches.size()) + " branches");
  }
  for (std::size_t i = 1; i < branches.size(); ++i) {
    if (branches[i].shape() != branches[0].shape()) {
      throw ShapeError("supernet combine: branch " + std::to_string(i) + " has shape " +
                       to_string(branches[i].shape()) + ", branch 0 has " + to_string(branches[0].shape()));
    }
  }
  if (opt.discrete) return branches[static_cast<std::size_t>(select(theta))];
  return ops::weighted_sum(branches, branch_weights(theta, opt));
}

Tensor expected_branch_cost(const Tensor& theta, std::span<const Tensor> costs) {
  return ops::dot(ops::softmax(theta), ops::stack(costs));
}

int select(const Tensor& theta) {
  const auto v = theta.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

}  // namespace supernet
FORGE_NAMESPACE_END
