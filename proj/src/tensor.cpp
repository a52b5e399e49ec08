#include "forge/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

FORGE_NAMESPACE_BEGIN

namespace {

thread_local bool t_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (auto extent : shape) {
    if (extent <= 0) {
      throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
  }
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::span<Real> grad_buffer(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), Real{0});
  return impl.grad;
}

Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(const TensorImpl& out)> backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled()) {
    bool needs = false;
    for (const Tensor* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) needs = true;
    }
    if (needs) {
      auto fn = std::make_shared<GradFn>();
      fn->name = name;
      for (const Tensor* t : inputs) {
        if (t != nullptr && t->defined()) fn->inputs.push_back(t->impl_ptr());
      }
      fn->backward = std::move(backward);
      impl->grad_fn = std::move(fn);
      impl->requires_grad = true;
    }
  }
  return Tensor::from_impl(std::move(impl));
}

Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled()) {
    bool needs = std::any_of(inputs.begin(), inputs.end(),
                             [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (needs) {
      auto fn = std::make_shared<GradFn>();
      fn->name = name;
      for (const auto& t : inputs) {
        if (t.defined()) fn->inputs.push_back(t.impl_ptr());
      }
      fn->backward = std::move(backward);
      impl->grad_fn = std::move(fn);
      impl->requires_grad = true;
    }
  }
  return Tensor::from_impl(std::move(impl));
}

}  // namespace detail

Tensor::Tensor(Shape shape, Real fill) {
  check_shape(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->data.assign(static_cast<std::size_t>(forge::numel(shape)), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<Real> values) {
  check_shape(shape);
  if (forge::numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                     std::to_string(forge::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(Real value) { return Tensor(Shape{}, std::vector<Real>{value}); }

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::int64_t Tensor::rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }

std::int64_t Tensor::dim(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(impl_->shape));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
std::span<const Real> Tensor::values() const { return impl_->data; }
std::span<Real> Tensor::mutable_values() { return impl_->data; }

Real Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + to_string(impl_->shape));
  }
  return impl_->data[0];
}

Real Tensor::at(std::int64_t flat_index) const {
  return impl_->data.at(static_cast<std::size_t>(flat_index));
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const Real> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("backward() without a seed needs a scalar root, got " +
                     to_string(impl_->shape));
  }
  const Real one = 1;
  backward(std::span<const Real>(&one, 1));
}

void Tensor::backward(std::span<const Real> seed) const {
  if (seed.size() != impl_->data.size()) {
    throw ShapeError("backward seed size mismatch");
  }
  // Post-order DFS gives a topological order of the recorded history.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn != nullptr && next < fn->inputs.size()) {
      auto* child = fn->inputs[next++].get();
      if (child->grad_fn != nullptr && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  auto root_grad = detail::grad_buffer(*impl_);
  for (std::size_t i = 0; i < seed.size(); ++i) root_grad[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (node->grad_fn == nullptr || node->grad.empty()) continue;
    node->grad_fn->backward(*node);
  }
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return from_impl(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() noexcept { return t_grad_enabled; }

FORGE_NAMESPACE_END
