#include "acebert/tensor.hpp"

#include <sstream>

#include "acebert/errors.hpp"

namespace acebert {

namespace {
thread_local GradTape* g_active_tape = nullptr;
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  return BasicTensor(std::move(impl));
}

template <class T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return BasicTensor(std::move(impl));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return from({}, {value});
}

template <class T>
detail::TensorImpl<T>& BasicTensor<T>::impl() const {
  if (!impl_) throw Error("use of an undefined tensor");
  return *impl_;
}

template <class T>
const Shape& BasicTensor<T>::shape() const {
  return impl().shape;
}

template <class T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <class T>
std::size_t BasicTensor<T>::numel() const {
  return impl().data.size();
}

template <class T>
std::span<const T> BasicTensor<T>::data() const {
  return impl().data;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_data() {
  return impl().data;
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return impl().data[0];
}

template <class T>
bool BasicTensor<T>::has_grad() const {
  return !impl().grad.empty();
}

template <class T>
std::span<const T> BasicTensor<T>::grad() const {
  return impl().grad;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_grad() {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.data.size(), T(0));
  return im.grad;
}

template <class T>
void BasicTensor<T>::zero_grad() {
  impl().grad.clear();
}

template <class T>
bool BasicTensor<T>::requires_grad() const {
  return impl().requires_grad;
}

template <class T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  auto& im = impl();
  if (im.tape != nullptr && !on) throw Error("cannot clear requires_grad on a recorded tensor");
  im.requires_grad = on;
  return *this;
}

template <class T>
bool BasicTensor<T>::is_leaf() const {
  return impl().tape == nullptr;
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(shape(), impl().data);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

template <class T>
void GradTape::backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (loss.impl().tape != this) throw Error("backward(): loss was not recorded on this tape");
  for (auto& node : nodes_) node.clear_grad();
  auto& im = loss.impl();
  im.grad.assign(1, T(1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

template void GradTape::backward<float>(const BasicTensor<float>&);
template void GradTape::backward<double>(const BasicTensor<double>&);

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

GradTape* active_tape() { return g_active_tape; }

}  // namespace acebert
