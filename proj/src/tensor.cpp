#include "gdnv/tensor.hpp"

#include <algorithm>
#include <cstring>

namespace gdnv {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

void check_shape(const Shape& s) {
  if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("tensor dimensions must be >= 1, got " + s.str());
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  check_shape(shape_);
  data_.assign(shape_.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
  check_shape(shape_);
  if (data_.size() != shape_.numel()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
}

template <typename T>
std::vector<T>& Tensor<T>::grad() {
  if (!grad_) grad_.emplace(data_.size(), T{});
  return *grad_;
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  if (!grad_) throw std::logic_error("tensor has no gradient buffer");
  return *grad_;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), T{});
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor<T>(shape, data_);
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = sa.c * sa.plane();
  const std::size_t pb = sb.c * sb.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    T* dst = out.plane(n, 0);
    std::copy_n(a.plane(n, 0), pa, dst);
    std::copy_n(b.plane(n, 0), pb, dst + pa);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::size_t c0) {
  const Shape& s = x.shape();
  if (c0 == 0 || c0 >= s.c) throw ShapeError("split_channels: bad split point");
  Tensor<T> a(Shape{s.n, c0, s.h, s.w});
  Tensor<T> b(Shape{s.n, s.c - c0, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(x.plane(n, 0), c0 * s.plane(), a.plane(n, 0));
    std::copy_n(x.plane(n, c0), (s.c - c0) * s.plane(), b.plane(n, 0));
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>* const> items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  const Shape s0 = items.front()->shape();
  Tensor<T> out(Shape{items.size(), s0.c, s0.h, s0.w});
  const std::size_t per = s0.c * s0.plane();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Shape& s = items[i]->shape();
    if (s.n != 1 || s.c != s0.c || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("stack_batch: item " + std::to_string(i) + " has shape " + s.str());
    }
    std::copy_n(items[i]->data().data(), per, out.plane(i, 0));
  }
  return out;
}

template <typename T>
Tensor<T> batch_item(const Tensor<T>& x, std::size_t n) {
  const Shape& s = x.shape();
  if (n >= s.n) throw ShapeError("batch_item: index out of range");
  Tensor<T> out(Shape{1, s.c, s.h, s.w});
  std::copy_n(x.plane(n, 0), s.c * s.plane(), out.data().data());
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (!(dst.shape() == src.shape())) throw ShapeError("add: " + dst.shape().str() + " vs " + src.shape().str());
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

#define GDNV_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                              \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                \
  template std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>&, std::size_t); \
  template Tensor<T> stack_batch(std::span<const Tensor<T>* const>);                     \
  template Tensor<T> batch_item(const Tensor<T>&, std::size_t);                          \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);

GDNV_INSTANTIATE(float)
GDNV_INSTANTIATE(double)

}  // namespace gdnv
