#pragma once

#include <map>
#include <string>
#include <vector>

#include "saliprune/autograd.hpp"
#include "saliprune/ops.hpp"
#include "saliprune/rng.hpp"

namespace saliprune {

/// Named parameter tensors (and buffers such as running statistics).
/// Ordered, so iteration and checksums are deterministic.
using WeightSet = std::map<std::string, Tensor>;

/// Reference to one persistent tensor inside a module. Exactly one of
/// `var` / `buffer` is set.
struct StateEntry {
  std::string name;
  Var* var = nullptr;
  Tensor* buffer = nullptr;

  Tensor& tensor() const { return var ? var->mutable_value() : *buffer; }
};
using StateList = std::vector<StateEntry>;

WeightSet export_state(const StateList& entries);
/// Copies matching tensors in; every entry must be present with its shape.
void import_state(const StateList& entries, const WeightSet& weights);
std::vector<Var> trainable_vars(const StateList& entries);
void set_trainable(const StateList& entries, bool trainable);

/// SHA-256 over names, shapes and raw values, hex encoded.
std::string checksum(const WeightSet& weights);

struct Conv2d {
  Var weight;  // [out, in, k, k]
  Var bias;    // optional [out]
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int pad, bool with_bias, Rng& rng);
  Var forward(const Var& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }
  int kernel() const { return weight.dim(2); }
  void collect(const std::string& prefix, StateList& out);
};

struct DepthwiseConv2d {
  Var weight;  // [channels, 1, k, k]
  int stride = 1;
  int pad = 0;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(int channels, int kernel, int stride, int pad, Rng& rng);
  Var forward(const Var& x) const { return ops::depthwise_conv2d(x, weight, Var(), stride, pad); }
  void collect(const std::string& prefix, StateList& out);
};

struct BatchNorm2d {
  Var gamma;
  Var beta;
  ops::BatchNormStats stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);
  Var forward(const Var& x, bool training) {
    return ops::batch_norm(x, gamma, beta, stats, training);
  }
  void collect(const std::string& prefix, StateList& out);
};

struct Linear {
  Var weight;  // [out, in]
  Var bias;    // [out]

  Linear() = default;
  Linear(int in, int out, Rng& rng);
  Var forward(const Var& x) const { return ops::linear(x, weight, bias); }
  void collect(const std::string& prefix, StateList& out);
};

/// Gaussian He initialization for a fan-in of `fan_in`.
Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng);
Tensor uniform_tensor(std::vector<int> shape, double bound, Rng& rng);

}  // namespace saliprune
