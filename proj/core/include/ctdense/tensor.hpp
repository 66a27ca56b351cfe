#pragma once

// Dense row-major tensor with a reverse-mode autograd tape.
//
// A Tensor is a cheap handle to shared storage. Operations never modify
// their inputs; the only in-place writers are optimizers, initializers and
// batch-norm running statistics, which go through mutable_data().
//
// Recording happens only while a Tape is active on the current thread (see
// TapeGuard) and at least one input requires a gradient. Everything else runs
// graph-free, which is how evaluation is done.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ctdense {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TapeState;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  // Empty until a gradient is accumulated; never allocated when !requires_grad.
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::weak_ptr<TapeState<T>> tape;
  std::size_t node = 0;

  // Returns the gradient buffer, allocating zeros on first use, or nullptr
  // when this tensor does not take gradients.
  T* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  // An empty 0-element tensor of shape {0}; mostly a placeholder.
  Tensor();

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from_vector(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return from_vector({1}, {value}); }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t axis) const;
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // In-place write access; must not be used on tensors captured by a live tape.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  // Only valid on leaf tensors. Turning gradients off drops any grad buffer.
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  bool is_leaf() const { return impl_->is_leaf; }
  bool on_tape() const { return !impl_->tape.expired(); }

  // Deep copy of the values as a fresh leaf without gradient.
  Tensor clone() const;
  // Differentiable reshape; numel must be preserved.
  Tensor reshape(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(impl_->data.begin(), impl_->data.end());
    return Tensor<U>::from_vector(impl_->shape, std::move(values));
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const detail::ImplPtr<T>& impl() const { return impl_; }
  explicit Tensor(detail::ImplPtr<T> impl) : impl_(std::move(impl)) {}

 private:
  detail::ImplPtr<T> impl_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// Ordered record of differentiable operations.
//
// Nodes are appended in execution order, so the recording order is already a
// topological order; backward replays the list in reverse.
template <typename T>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  std::size_t size() const;
  // Drops every recorded node. Tensors produced earlier lose their tape link.
  void clear();

  // Populates dLoss/dx in every reachable gradient-taking leaf. Leaf
  // gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor<T>& loss);

  // For tests: input node indices of node i, and the number of times each
  // node ran during the last backward.
  std::vector<std::size_t> node_inputs(std::size_t i) const;
  std::vector<int> last_visit_counts() const;

  const std::shared_ptr<detail::TapeState<T>>& state() const { return state_; }

 private:
  std::shared_ptr<detail::TapeState<T>> state_;
};

// Makes `tape` the recording target of this thread for the guard's lifetime.
template <typename T>
class TapeGuard {
 public:
  explicit TapeGuard(Tape<T>& tape);
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;
  ~TapeGuard();

 private:
  std::shared_ptr<detail::TapeState<T>> previous_;
};

// Suspends recording for the current thread (used for finite differences).
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  ~NoGradGuard();

 private:
  std::shared_ptr<detail::TapeState<T>> previous_;
};

// Runs backward on the tape that recorded `loss`.
// Throws NoGraphError if loss is not on a live tape, ShapeError if not scalar.
template <typename T>
void backward(const Tensor<T>& loss);

// Hook used by operator implementations.
//
// If a tape is active and any input requires a gradient, marks `output` as a
// non-leaf gradient-taking tensor and appends a node whose rule is `rule`.
// The rule reads output's gradient and accumulates into the inputs through
// TensorImpl::grad_buffer().
template <typename T>
void record(const Tensor<T>& output, std::initializer_list<Tensor<T>> inputs, std::function<void()> rule);

template <typename T>
void record(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs, std::function<void()> rule);

// True when an op with these inputs would be recorded.
template <typename T>
bool should_record(std::initializer_list<Tensor<T>> inputs);

}  // namespace ctdense
