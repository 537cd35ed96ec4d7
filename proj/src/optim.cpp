#include "saliprune/optim.hpp"

#include <cmath>

namespace saliprune {

Adam::Adam(std::vector<Var> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const Var& p : params_) {
    m_.push_back(Tensor::zeros_like(p.value()));
    v_.push_back(Tensor::zeros_like(p.value()));
  }
}

void Adam::step() {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (!p.node()->has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.node()->grad;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j] + config_.weight_decay * w[j];
      m_[i][j] = static_cast<Real>(config_.beta1 * m_[i][j] + (1 - config_.beta1) * gj);
      v_[i][j] = static_cast<Real>(config_.beta2 * v_[i][j] + (1 - config_.beta2) * gj * gj);
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      w[j] -= static_cast<Real>(config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

void Adam::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

Sgd::Sgd(std::vector<Var> params, SgdConfig config) : params_(std::move(params)), config_(config) {
  for (const Var& p : params_) velocity_.push_back(Tensor::zeros_like(p.value()));
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (!p.node()->has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.node()->grad;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j] + config_.weight_decay * w[j];
      velocity_[i][j] = static_cast<Real>(config_.momentum * velocity_[i][j] + gj);
      w[j] -= static_cast<Real>(config_.lr * velocity_[i][j]);
    }
  }
}

void Sgd::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  return 0.5 * base * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace saliprune
