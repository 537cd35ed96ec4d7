#pragma once

#include <vector>

#include "saliprune/rng.hpp"
#include "saliprune/tensor.hpp"

/// Saliency-mask mathematics: radial Bernoulli grids, independent
/// (per-pixel logit) grids, relaxed mask sampling, and mask regularizers.
/// Coordinates are row-major with the origin at the top-left pixel (0, 0).
namespace saliprune::rbf {

inline constexpr double kLogFloor = 1e-6;    // clamp before log in relaxed sampling
inline constexpr double kSigmaFloor = 1e-3;  // lower bound on random expansions

/// Compact saliency representation: kernel center (row, column) and
/// expansion, all in pixels.
struct RbfParams {
  double c_z = 0;
  double c_t = 0;
  double sigma = 1;

  bool operator==(const RbfParams&) const = default;
};

/// H x W grid of reals, row-major.
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, double fill = 0.0);
  Grid(int height, int width, std::vector<double> values);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  double& operator()(int z, int t) { return values_[static_cast<std::size_t>(z) * width_ + t]; }
  double operator()(int z, int t) const { return values_[static_cast<std::size_t>(z) * width_ + t]; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// Per-pixel Bernoulli keep-probabilities; every entry in [0, 1].
struct MaskDistribution {
  Grid params;
};

enum class MaskKind { soft, hard };

struct Mask {
  Grid values;
  MaskKind kind = MaskKind::hard;
};

/// Output squashing for the kernel center: a * tanh(u / a) + offset.
struct CenterScale {
  double a;
  double offset;
};
inline constexpr CenterScale kCenter32{14.0, 16.0};
inline constexpr CenterScale kCenter224{108.0, 112.0};
/// Preset for a square input of side `size`; 32 and 224 use the published
/// constants, other sizes keep a 2-pixel-per-16 border.
CenterScale center_scale_for(int size);

double bernoulli_param(const RbfParams& p, double z, double t);
MaskDistribution bernoulli_param_grid(const RbfParams& p, int height, int width);
/// Vector-Jacobian product: gradient of sum(upstream * grid) w.r.t.
/// (c_z, c_t, sigma), returned in an RbfParams-shaped triple.
RbfParams bernoulli_param_grid_vjp(const RbfParams& p, const Grid& upstream);

/// Entrywise sigmoid of per-pixel logits.
MaskDistribution independent_param_grid(const Grid& logits);

/// One standard Gumbel draw per pixel.
Grid gumbel_noise(int height, int width, Rng& rng);
/// m = sigmoid((log max(p, kLogFloor) + g) / tau) with explicit noise g.
Mask gumbel_sigmoid_mask(const MaskDistribution& dist, const Grid& noise, double tau);
Mask sample_gumbel_sigmoid_mask(const MaskDistribution& dist, double tau, Rng& rng);
/// Gradient of sum(upstream * mask) w.r.t. the distribution entries, with
/// the noise held fixed.
Grid gumbel_sigmoid_vjp(const MaskDistribution& dist, const Grid& noise, double tau,
                        const Grid& upstream);

/// 1 where the Bernoulli parameter is strictly above 0.5.
Mask harden_mask(const MaskDistribution& dist);

/// Zeroes dropped pixels. `image` is [H, W] or [C, H, W]; the mask is
/// broadcast over channels.
Tensor apply_mask(const Tensor& image, const Mask& mask);

/// c_z ~ U[0, H], c_t ~ U[0, W], sigma ~ U[0, 2 max(H, W)] floored at
/// kSigmaFloor.
RbfParams sample_random_rbf_params(int height, int width, Rng& rng);

double center_nonlinearity(double u, double a, double offset);
double center_nonlinearity_derivative(double u, double a);
/// Softplus, log(1 + exp(u)).
double sigma_nonlinearity(double u);
double sigma_nonlinearity_derivative(double u);

/// Entry sum: exact count for hard masks, expected count for soft ones.
double mask_l0(const Mask& m);
/// Sum of squared differences between vertical and horizontal neighbours;
/// pairs that would leave the grid are skipped.
double mask_smoothness(const Grid& m);
inline double mask_smoothness(const Mask& m) { return mask_smoothness(m.values); }
Grid mask_smoothness_gradient(const Grid& m);

}  // namespace saliprune::rbf
