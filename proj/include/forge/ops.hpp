#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "forge/tensor.hpp"

FORGE_NAMESPACE_BEGIN
namespace ops {

// Layer primitives ----------------------------------------------------------

struct Conv2dOptions {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

/// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin/groups,Kh,Kw].
/// `bias` may be an undefined Tensor.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions options = {});

/// x[N,F] * w[O,F]^T + bias[O].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor maxpool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride);
Tensor avgpool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride);
/// [N,C,H,W] -> [N,C,1,1].
Tensor global_avgpool(const Tensor& x);

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // updated in place in training mode
  Tensor running_var;
  Real eps = Real(1e-5);
  Real momentum = Real(0.1);
};

/// Per-channel normalization over axis 1 of [N,C] or [N,C,H,W].
Tensor batchnorm(const Tensor& x, const BatchNormState& state, bool training);

// Elementwise and structural ------------------------------------------------

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Hadamard product of equally shaped tensors.
Tensor mul(const Tensor& a, const Tensor& b);
/// Elementwise division of equally shaped tensors.
Tensor div(const Tensor& a, const Tensor& b);
/// Multiply every element by the single value of `s`.
Tensor scale(const Tensor& x, const Tensor& s);
Tensor mul_scalar(const Tensor& x, Real c);
Tensor add_scalar(const Tensor& x, Real c);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& x, Shape shape);
/// [N, ...] -> [N, prod(...)].
Tensor flatten(const Tensor& x);
Tensor concat(std::span<const Tensor> xs, std::int64_t axis);
/// Packs scalar tensors into a rank-1 tensor.
Tensor stack(std::span<const Tensor> scalars);
/// Element `index` of a flat view, as a scalar.
Tensor select(const Tensor& x, std::int64_t index);
/// Scales slice c of axis 0 of `x` by `factors[c]`.
Tensor mul_channels(const Tensor& x, const Tensor& factors);
/// sum_i weights[i] * xs[i] over equally shaped tensors.
Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& weights);

/// Softmax along the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
/// Mean negative log-likelihood of integer labels under logits[N,C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Search-specific primitives ------------------------------------------------

/// 1 where theta >= threshold, else 0. The backward pass is the identity.
Tensor heaviside_ste(const Tensor& theta, Real threshold);

/// i.i.d. standard Gumbel samples.
Tensor sample_gumbel(const Shape& shape, std::mt19937_64& rng);

/// softmax((logits + noise) / tau); pass an undefined noise for the
/// deterministic tempered softmax.
Tensor gumbel_softmax(const Tensor& logits, Real tau, const Tensor& noise = {});

/// Symmetric min-max quantization scale max|w| / (2^(bits-1) - 1); 1 for an
/// all-zero tensor.
Real minmax_scale(std::span<const Real> w, int bits);

/// Symmetric per-tensor fake quantization with a straight-through backward.
Tensor fake_quant_weight_minmax(const Tensor& w, int bits);

/// PACT activation fake quantization over [0, alpha] with trainable alpha.
Tensor fake_quant_act_pact(const Tensor& x, int bits, const Tensor& alpha);

}  // namespace ops
FORGE_NAMESPACE_END
