#include "saliprune/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "saliprune/error.hpp"

namespace saliprune {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeMismatch("negative dimension in " + shape_to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, Real fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<Real> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeMismatch("value count " + std::to_string(data_.size()) + " does not fill " +
                        shape_to_string(shape_));
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeMismatch("axis out of range for " + shape_string());
  return shape_[axis];
}

void Tensor::fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeMismatch("cannot reshape " + shape_string() + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::accumulate(const Tensor& other) {
  if (other.numel() != numel()) {
    throw ShapeMismatch("accumulate " + other.shape_string() + " into " + shape_string());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

Tensor Tensor::sample(int n) const {
  if (rank() < 1 || n < 0 || n >= shape_[0]) throw ShapeMismatch("sample index out of range");
  std::vector<int> shape = shape_;
  shape[0] = 1;
  const std::size_t stride = numel() / static_cast<std::size_t>(shape_[0]);
  std::vector<Real> values(data_.begin() + static_cast<std::ptrdiff_t>(n * stride),
                           data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * stride));
  return Tensor(std::move(shape), std::move(values));
}

std::string Tensor::shape_string() const { return shape_to_string(shape_); }

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeMismatch("stack of zero tensors");
  std::vector<int> shape = items.front().shape();
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  Tensor out(shape);
  const std::size_t stride = items.front().numel();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].same_shape(items.front())) throw ShapeMismatch("stack of ragged tensors");
    std::copy(items[i].data(), items[i].data() + stride, out.data() + i * stride);
  }
  return out;
}

}  // namespace saliprune
