#include "saliprune/rbf_mask.hpp"

#include <algorithm>
#include <cmath>

#include "saliprune/error.hpp"

namespace saliprune::rbf {

namespace {

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_sigma(double sigma) {
  if (!(sigma > 0.0)) throw InvalidParameter("RBF expansion sigma must be positive");
}

void require_dims(int height, int width) {
  if (height < 1 || width < 1) throw InvalidParameter("mask grid dimensions must be >= 1");
}

void require_same(const Grid& a, const Grid& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeMismatch(std::string(what) + ": grid sizes differ");
  }
}

}  // namespace

Grid::Grid(int height, int width, double fill)
    : height_(height), width_(width), values_(static_cast<std::size_t>(height) * width, fill) {
  require_dims(height, width);
}

Grid::Grid(int height, int width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
  require_dims(height, width);
  if (values_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeMismatch("grid value count does not match its dimensions");
  }
}

CenterScale center_scale_for(int size) {
  if (size == 32) return kCenter32;
  if (size == 224) return kCenter224;
  return {size * 7.0 / 16.0, size / 2.0};
}

double bernoulli_param(const RbfParams& p, double z, double t) {
  require_sigma(p.sigma);
  const double dz = z - p.c_z, dt = t - p.c_t;
  return std::exp(-(dz * dz + dt * dt) / (2.0 * p.sigma * p.sigma));
}

MaskDistribution bernoulli_param_grid(const RbfParams& p, int height, int width) {
  require_sigma(p.sigma);
  Grid g(height, width);
  const double inv = 1.0 / (2.0 * p.sigma * p.sigma);
  for (int z = 0; z < height; ++z) {
    const double dz = z - p.c_z;
    for (int t = 0; t < width; ++t) {
      const double dt = t - p.c_t;
      g(z, t) = std::exp(-(dz * dz + dt * dt) * inv);
    }
  }
  return {std::move(g)};
}

RbfParams bernoulli_param_grid_vjp(const RbfParams& p, const Grid& upstream) {
  require_sigma(p.sigma);
  const double s2 = p.sigma * p.sigma;
  double gz = 0, gt = 0, gs = 0;
  for (int z = 0; z < upstream.height(); ++z) {
    const double dz = z - p.c_z;
    for (int t = 0; t < upstream.width(); ++t) {
      const double dt = t - p.c_t;
      const double r2 = dz * dz + dt * dt;
      const double e = std::exp(-r2 / (2.0 * s2)) * upstream(z, t);
      gz += e * dz / s2;
      gt += e * dt / s2;
      gs += e * r2 / (s2 * p.sigma);
    }
  }
  return {gz, gt, gs};
}

MaskDistribution independent_param_grid(const Grid& logits) {
  Grid g(logits.height(), logits.width());
  for (std::size_t i = 0; i < logits.size(); ++i) g.values()[i] = logistic(logits.values()[i]);
  return {std::move(g)};
}

Grid gumbel_noise(int height, int width, Rng& rng) {
  Grid g(height, width);
  for (double& v : g.values()) v = rng.gumbel();
  return g;
}

Mask gumbel_sigmoid_mask(const MaskDistribution& dist, const Grid& noise, double tau) {
  if (!(tau > 0.0)) throw InvalidParameter("temperature tau must be positive");
  require_same(dist.params, noise, "gumbel_sigmoid_mask");
  Grid m(dist.params.height(), dist.params.width());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double logp = std::log(std::max(dist.params.values()[i], kLogFloor));
    m.values()[i] = logistic((logp + noise.values()[i]) / tau);
  }
  return {std::move(m), MaskKind::soft};
}

Mask sample_gumbel_sigmoid_mask(const MaskDistribution& dist, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw InvalidParameter("temperature tau must be positive");
  const Grid noise = gumbel_noise(dist.params.height(), dist.params.width(), rng);
  return gumbel_sigmoid_mask(dist, noise, tau);
}

Grid gumbel_sigmoid_vjp(const MaskDistribution& dist, const Grid& noise, double tau,
                        const Grid& upstream) {
  const Mask m = gumbel_sigmoid_mask(dist, noise, tau);
  require_same(dist.params, upstream, "gumbel_sigmoid_vjp");
  Grid g(dist.params.height(), dist.params.width());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double p = dist.params.values()[i];
    if (p <= kLogFloor) continue;
    const double mi = m.values.values()[i];
    g.values()[i] = upstream.values()[i] * mi * (1.0 - mi) / (tau * p);
  }
  return g;
}

Mask harden_mask(const MaskDistribution& dist) {
  Grid m(dist.params.height(), dist.params.width());
  for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = dist.params.values()[i] > 0.5 ? 1.0 : 0.0;
  return {std::move(m), MaskKind::hard};
}

Tensor apply_mask(const Tensor& image, const Mask& mask) {
  const int h = mask.values.height(), w = mask.values.width();
  int channels = 0;
  if (image.rank() == 2 && image.dim(0) == h && image.dim(1) == w) {
    channels = 1;
  } else if (image.rank() == 3 && image.dim(1) == h && image.dim(2) == w) {
    channels = image.dim(0);
  } else {
    throw ShapeMismatch("mask " + std::to_string(h) + "x" + std::to_string(w) +
                        " does not fit image " + image.shape_string());
  }
  Tensor out = image;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      out[c * plane + i] = static_cast<Real>(out[c * plane + i] * mask.values.values()[i]);
    }
  }
  return out;
}

RbfParams sample_random_rbf_params(int height, int width, Rng& rng) {
  require_dims(height, width);
  RbfParams p;
  p.c_z = rng.uniform(0.0, height);
  p.c_t = rng.uniform(0.0, width);
  p.sigma = std::max(rng.uniform(0.0, 2.0 * std::max(height, width)), kSigmaFloor);
  return p;
}

double center_nonlinearity(double u, double a, double offset) {
  if (!(a > 0.0)) throw InvalidParameter("center scale must be positive");
  return a * std::tanh(u / a) + offset;
}

double center_nonlinearity_derivative(double u, double a) {
  const double th = std::tanh(u / a);
  return 1.0 - th * th;
}

double sigma_nonlinearity(double u) { return std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))); }

double sigma_nonlinearity_derivative(double u) { return logistic(u); }

double mask_l0(const Mask& m) {
  double total = 0;
  for (double v : m.values.values()) total += v;
  return total;
}

double mask_smoothness(const Grid& m) {
  double total = 0;
  for (int z = 0; z < m.height(); ++z) {
    for (int t = 0; t < m.width(); ++t) {
      if (z + 1 < m.height()) {
        const double d = m(z, t) - m(z + 1, t);
        total += d * d;
      }
      if (t + 1 < m.width()) {
        const double d = m(z, t) - m(z, t + 1);
        total += d * d;
      }
    }
  }
  return total;
}

Grid mask_smoothness_gradient(const Grid& m) {
  Grid g(m.height(), m.width());
  for (int z = 0; z < m.height(); ++z) {
    for (int t = 0; t < m.width(); ++t) {
      if (z + 1 < m.height()) {
        const double d = 2.0 * (m(z, t) - m(z + 1, t));
        g(z, t) += d;
        g(z + 1, t) -= d;
      }
      if (t + 1 < m.width()) {
        const double d = 2.0 * (m(z, t) - m(z, t + 1));
        g(z, t) += d;
        g(z, t + 1) -= d;
      }
    }
  }
  return g;
}

}  // namespace saliprune::rbf
