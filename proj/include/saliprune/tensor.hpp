#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace saliprune {

#ifdef SALIPRUNE_DOUBLE
using Real = double;
#else
using Real = float;
#endif

/// Dense row-major tensor. Image batches use NCHW layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, Real fill = Real(0));
  Tensor(std::vector<int> shape, std::vector<Real> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor scalar(Real value) { return Tensor({1}, value); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Real at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(Real value);
  /// Same storage, new shape; element count must match.
  Tensor reshaped(std::vector<int> shape) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Adds `other` elementwise (shapes must match).
  void accumulate(const Tensor& other);

  /// Copies sample `n` of a batched tensor into a batch of one.
  Tensor sample(int n) const;

  std::string shape_string() const;

 private:
  std::vector<int> shape_;
  std::vector<Real> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

/// Stacks equally-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

}  // namespace saliprune
