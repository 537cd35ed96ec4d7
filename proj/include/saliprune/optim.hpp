#pragma once

#include <vector>

#include "saliprune/autograd.hpp"

namespace saliprune {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coupled L2 penalty added to the gradient.
  double weight_decay = 1e-4;
};

class Adam {
 public:
  Adam(std::vector<Var> params, AdamConfig config);
  void step();
  void zero_grad();
  void set_lr(double lr) { config_.lr = lr; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Var> params_;
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  long steps_ = 0;
};

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

class Sgd {
 public:
  Sgd(std::vector<Var> params, SgdConfig config);
  void step();
  void zero_grad();
  void set_lr(double lr) { config_.lr = lr; }
  const SgdConfig& config() const { return config_; }

 private:
  std::vector<Var> params_;
  SgdConfig config_;
  std::vector<Tensor> velocity_;
};

/// Cosine annealing from `base` to zero over `total` steps.
double cosine_lr(double base, long step, long total);

}  // namespace saliprune
