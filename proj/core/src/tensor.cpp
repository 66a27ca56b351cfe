#include "ctdense/tensor.hpp"

#include <sstream>

#include "ctdense/errors.hpp"

namespace ctdense {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

template <typename T>
struct TapeNode {
  std::vector<ImplPtr<T>> inputs;
  ImplPtr<T> output;
  std::function<void()> rule;
};

template <typename T>
struct TapeState {
  std::vector<TapeNode<T>> nodes;
  std::vector<int> visits;
};

template <typename T>
std::shared_ptr<TapeState<T>>& active_tape() {
  thread_local std::shared_ptr<TapeState<T>> active;
  return active;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
  }
}

}  // namespace

// ---- Tensor -------------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor() : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  impl_->shape = {0};
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("buffer of " + std::to_string(values.size()) + " elements does not fit shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

template <typename T>
std::int64_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(impl_->shape));
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (index.size() != impl_->shape.size()) throw ShapeError("index rank does not match " + shape_str(impl_->shape));
  std::int64_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    const auto extent = impl_->shape[axis++];
    if (i < 0 || i >= extent) throw BoundsError("index out of range for " + shape_str(impl_->shape));
    offset = offset * extent + i;
  }
  return impl_->data[static_cast<std::size_t>(offset)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!impl_->is_leaf) throw Error("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from_vector(impl_->shape, impl_->data);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(numel())) {
    throw ShapeError("cannot reshape " + shape_str(impl_->shape) + " to " + shape_str(shape));
  }
  auto out = from_vector(std::move(shape), impl_->data);
  auto src = impl_;
  auto dst = out.impl();
  record<T>(out, {*this}, [src, dst] {
    T* g = src->grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < dst->grad.size(); ++i) g[i] += dst->grad[i];
  });
  return out;
}

// ---- Tape ---------------------------------------------------------------------

template <typename T>
Tape<T>::Tape() : state_(std::make_shared<detail::TapeState<T>>()) {}

template <typename T>
Tape<T>::~Tape() = default;

template <typename T>
std::size_t Tape<T>::size() const {
  return state_->nodes.size();
}

template <typename T>
void Tape<T>::clear() {
  // A fresh state orphans every weak link held by earlier outputs.
  state_ = std::make_shared<detail::TapeState<T>>();
}

namespace {

template <typename T>
void run_backward(detail::TapeState<T>& state, const Tensor<T>& loss) {
  const auto& impl = loss.impl();
  if (impl->data.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(impl->shape));
  }
  auto& nodes = state.nodes;
  const std::size_t last = impl->node;

  for (std::size_t i = 0; i <= last; ++i) nodes[i].output->grad.clear();
  state.visits.assign(nodes.size(), 0);

  impl->grad.assign(1, T(1));
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& node = nodes[i];
    if (node.output->grad.empty()) continue;  // not reachable from loss
    node.rule();
    ++state.visits[i];
  }
}

}  // namespace

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  const auto& impl = loss.impl();
  if (impl->is_leaf || impl->tape.lock() != state_) {
    throw NoGraphError("backward: tensor was not produced on this tape");
  }
  run_backward(*state_, loss);
}

template <typename T>
std::vector<std::size_t> Tape<T>::node_inputs(std::size_t i) const {
  std::vector<std::size_t> out;
  const auto& node = state_->nodes.at(i);
  for (const auto& input : node.inputs) {
    if (!input->is_leaf && input->tape.lock() == state_) out.push_back(input->node);
  }
  return out;
}

template <typename T>
std::vector<int> Tape<T>::last_visit_counts() const {
  return state_->visits;
}

template <typename T>
TapeGuard<T>::TapeGuard(Tape<T>& tape) : previous_(detail::active_tape<T>()) {
  detail::active_tape<T>() = tape.state();
}

template <typename T>
TapeGuard<T>::~TapeGuard() {
  detail::active_tape<T>() = previous_;
}

template <typename T>
NoGradGuard<T>::NoGradGuard() : previous_(detail::active_tape<T>()) {
  detail::active_tape<T>().reset();
}

template <typename T>
NoGradGuard<T>::~NoGradGuard() {
  detail::active_tape<T>() = previous_;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  auto state = loss.impl()->tape.lock();
  if (!state || loss.impl()->is_leaf) throw NoGraphError("backward: tensor is not attached to a live tape");
  run_backward(*state, loss);
}

template <typename T>
bool should_record(std::initializer_list<Tensor<T>> inputs) {
  if (!detail::active_tape<T>()) return false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs, std::function<void()> rule) {
  auto& state = detail::active_tape<T>();
  if (!state) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;

  auto& impl = *output.impl();
  impl.requires_grad = true;
  impl.is_leaf = false;
  impl.tape = state;
  impl.node = state->nodes.size();

  detail::TapeNode<T> node;
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.impl());
  node.output = output.impl();
  node.rule = std::move(rule);
  state->nodes.push_back(std::move(node));
}

template <typename T>
void record(const Tensor<T>& output, std::initializer_list<Tensor<T>> inputs, std::function<void()> rule) {
  record<T>(output, std::vector<Tensor<T>>(inputs), std::move(rule));
}

#define CTDENSE_INSTANTIATE(T)                                                                         \
  template class Tensor<T>;                                                                            \
  template class Tape<T>;                                                                              \
  template class TapeGuard<T>;                                                                         \
  template class NoGradGuard<T>;                                                                       \
  template void backward<T>(const Tensor<T>&);                                                         \
  template bool should_record<T>(std::initializer_list<Tensor<T>>);                                    \
  template void record<T>(const Tensor<T>&, const std::vector<Tensor<T>>&, std::function<void()>);     \
  template void record<T>(const Tensor<T>&, std::initializer_list<Tensor<T>>, std::function<void()>);

CTDENSE_INSTANTIATE(float)
CTDENSE_INSTANTIATE(double)

#undef CTDENSE_INSTANTIATE

}  // namespace ctdense
