#include <cmath>

#include "forge/train.hpp"

FORGE_NAMESPACE_BEGIN
namespace train {

Optimizer::Optimizer(std::vector<Tensor> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr > 0)) throw ConfigError("learning rate must be positive");
  for (const auto& p : params_) {
    const auto n = static_cast<std::size_t>(p.numel());
    m_.emplace_back(n, Real{0});
    v_.emplace_back(cfg_.kind == OptimKind::Adam ? n : 0, Real{0});
    t_.push_back(0);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Optimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[i];
    if (cfg_.kind == OptimKind::Sgd) {
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = cfg_.momentum * m[k] + g[k];
        w[k] -= cfg_.lr * m[k];
      }
      continue;
    }
    auto& v = v_[i];
    const auto t = static_cast<Real>(++t_[i]);
    const Real c1 = 1 - std::pow(cfg_.beta1, t), c2 = 1 - std::pow(cfg_.beta2, t);
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g[k] * g[k];
      w[k] -= cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
    }
  }
}

}  // namespace train
FORGE_NAMESPACE_END
