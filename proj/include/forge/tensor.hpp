#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "forge/config.hpp"

FORGE_NAMESPACE_BEGIN

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

/// One recorded primitive: the tensors it read and how to push the output
/// gradient back into them.
struct GradFn {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<GradFn> grad_fn;
};

/// Gradient buffer of `impl`, zero-allocated on first use.
std::span<Real> grad_buffer(TensorImpl& impl);

}  // namespace detail

/// Dense row-major float array with reverse-mode autodiff.
///
/// Copies are shallow handles onto the same storage; use clone() for a deep
/// copy. Results of differentiable ops record a GradFn whenever gradient
/// recording is enabled and any input requires a gradient. backward() walks
/// those records in reverse topological order, visiting each one once.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real{0});
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor scalar(Real value);
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::int64_t rank() const;
  [[nodiscard]] std::int64_t dim(std::int64_t axis) const;
  [[nodiscard]] std::int64_t numel() const;

  [[nodiscard]] std::span<const Real> values() const;
  [[nodiscard]] std::span<Real> mutable_values();
  [[nodiscard]] Real item() const;
  [[nodiscard]] Real at(std::int64_t flat_index) const;

  [[nodiscard]] bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  [[nodiscard]] bool is_leaf() const;
  [[nodiscard]] bool has_grad() const;
  [[nodiscard]] std::span<const Real> grad() const;
  void zero_grad();

  /// Backpropagates from this tensor. A non-scalar root needs an explicit seed.
  void backward() const;
  void backward(std::span<const Real> seed) const;

  /// Same values, no history.
  [[nodiscard]] Tensor detach() const;
  /// Deep copy as a fresh leaf keeping the requires_grad flag.
  [[nodiscard]] Tensor clone() const;

  [[nodiscard]] detail::TensorImpl* impl() const noexcept { return impl_.get(); }
  [[nodiscard]] const std::shared_ptr<detail::TensorImpl>& impl_ptr() const noexcept { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

[[nodiscard]] bool grad_enabled() noexcept;

namespace detail {

/// Wraps freshly computed output values; records `backward` when recording
/// is on and one of `inputs` needs a gradient.
Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(const TensorImpl& out)> backward);

Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward);

}  // namespace detail

FORGE_NAMESPACE_END
