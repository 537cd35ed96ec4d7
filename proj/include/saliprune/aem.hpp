#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "saliprune/classifier_zoo.hpp"
#include "saliprune/data_pipeline.hpp"
#include "saliprune/rbf_mask.hpp"

namespace saliprune {

/// Class probabilities; entries >= 0 summing to 1.
using ProbDist = std::vector<double>;

/// KL(p || q) with q clamped to >= 1e-8 and 0 log 0 = 0.
double kl_divergence(const ProbDist& p, const ProbDist& q);
/// The classifier distribution is the target (first argument).
inline double predictor_loss(const ProbDist& classifier_out, const ProbDist& predictor_out) {
  return kl_divergence(classifier_out, predictor_out);
}

struct AemConfig {
  double lambda1 = 0.2;
  double lambda2 = 0.001;
  double tau = 1.0;
  int predictor_epochs = 5;
  int selector_epochs = 10;
  int batch_size = 32;
  double predictor_lr = 1e-4;
  double selector_lr = 1e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
  /// Regularizer weights for a square input of side `size` (0.2/0.001 up
  /// to 32 pixels, 1.0/0.0001 for 224).
  static AemConfig defaults_for(int input_size);
};

void to_json(nlohmann::json& j, const AemConfig& c);
void from_json(const nlohmann::json& j, AemConfig& c);

/// How masks are drawn while training a predictor.
enum class PredictorMasks { rbf, bernoulli_half };

// Differentiable mask ops.
namespace aem_ops {
/// [N, 3] (c_z, c_t, sigma) -> [N, 1, H, W] Bernoulli-parameter grids.
Var rbf_grid(const Var& params, int height, int width);
/// Relaxed sample with fixed noise [N, 1, H, W]; gradients flow to `dist`.
Var gumbel_sigmoid(const Var& dist, const Tensor& noise, double tau);
/// Per-sample neighbour smoothness of [N, 1, H, W] -> [N].
Var smoothness(const Var& masks);
/// One standard Gumbel draw per entry of a [N, 1, H, W] tensor.
Tensor gumbel_noise(int n, int height, int width, Rng& rng);
}  // namespace aem_ops

/// Bottleneck residual block: 1x1 reduce, 3x3, 1x1 expand.
struct Bottleneck {
  Conv2d reduce, conv, expand;
  BatchNorm2d bn1, bn2, bn3;
  bool has_projection = false;
  Conv2d proj;
  BatchNorm2d proj_bn;

  Bottleneck() = default;
  Bottleneck(int in, int out, Rng& rng);
  Var forward(const Var& x, bool training);
  void collect(const std::string& prefix, StateList& out);
};

/// x2 upsampling: 3x3 conv to 4*out channels, pixel shuffle, concat with
/// the skip feature, then bottlenecks.
struct UpBlock {
  Conv2d conv;
  BatchNorm2d bn;
  std::vector<Bottleneck> blocks;

  UpBlock() = default;
  UpBlock(int in, int skip, int out, int bottlenecks, Rng& rng);
  Var forward(const Var& x, const Var& skip, bool training);
  void collect(const std::string& prefix, StateList& out);
};

enum class SelectorHead { rbf, independent };

/// U-Net decoder over a frozen classifier backbone. The RBF head emits
/// (c_z, c_t, sigma); the independent head emits per-pixel logits.
class SelectorNet {
 public:
  SelectorNet(const ClassifierSpec& encoder, SelectorHead head, Rng& rng, int bottlenecks = 3);
  SelectorNet(const ClassifierSpec& encoder, SelectorHead head, const WeightSet& weights,
              int bottlenecks = 3);

  SelectorNet(const SelectorNet&) = delete;
  SelectorNet& operator=(const SelectorNet&) = delete;
  SelectorNet(SelectorNet&&) = default;

  SelectorHead head() const { return head_; }
  const ClassifierSpec& encoder_spec() const { return encoder_; }

  /// Decodes the three encoder scales. RBF head: [N, 3]; independent
  /// head: [N, 1, H, W] logits.
  Var decode(std::span<const Var> scales, std::span<const int> labels, bool training);
  /// Runs the frozen encoder (no gradient) and decodes.
  Var forward(ClassifierNet& encoder, const Var& x, std::span<const int> labels, bool training);

  StateList state();
  WeightSet weights() { return export_state(state()); }
  void load(const WeightSet& w) { import_state(state(), w); }
  std::vector<Var> parameters() { return trainable_vars(state()); }
  void set_trainable(bool trainable) { saliprune::set_trainable(state(), trainable); }
  std::string checksum() { return saliprune::checksum(weights()); }

  rbf::CenterScale center_scale() const { return center_; }

 private:
  void build(Rng& rng, int bottlenecks);

  ClassifierSpec encoder_;
  SelectorHead head_;
  rbf::CenterScale center_;
  Var embedding_;  // [K, d]
  UpBlock up1_, up2_;
  Conv2d head_conv_;
  int upscale_ = 1;  // pixel-shuffle factor of the independent head
};

/// Bias of the sigma output at initialization: 10 at 32x32, 80 at 224x224,
/// otherwise about a third of the side.
double sigma_bias_for(int input_size);

std::vector<rbf::RbfParams> to_rbf_params(const Tensor& params);

struct SelectorLossTerms {
  Var total;           // scalar, batch mean
  double kl = 0;       // batch means of the unweighted terms
  double l0 = 0;       // per pixel
  double smoothness = 0;  // per pixel
};

/// KL(classifier || predictor on masked input) + lambda1 * L0 + lambda2 *
/// smoothness, with both regularizers divided by the pixel count.
/// soft_mask: [N, 1, H, W]; classifier_probs: [N, K]. `with_smoothness`
/// is off for the independent-mask baseline.
SelectorLossTerms selector_loss(const Var& x, const Tensor& classifier_probs,
                                ClassifierNet& predictor, const Var& soft_mask,
                                const AemConfig& config, bool with_smoothness = true);

struct LossRecord {
  int epoch = 0;
  int step = 0;
  double loss = 0;
  double kl = 0;
  double l0 = 0;
  double smoothness = 0;
};

struct PredictorResult {
  WeightSet weights;
  std::vector<LossRecord> curve;
};

/// Trains a fresh classifier-architecture predictor on masked inputs.
PredictorResult train_predictor(ClassifierNet& classifier, const Dataset& data,
                                const AemConfig& config, PredictorMasks masks);

/// Mean KL(classifier || predictor) over `ids` with masks drawn as in
/// training from `seed`; `identity` keeps every pixel.
double predictor_kl(ClassifierNet& classifier, ClassifierNet& predictor, const Dataset& data,
                    std::span<const int> ids, PredictorMasks masks, std::uint64_t seed,
                    bool identity = false);

struct SelectorResult {
  WeightSet weights;
  std::vector<LossRecord> curve;
};

/// Trains the decoder, head and embedding; classifier and predictor are
/// frozen and verified unchanged afterwards.
SelectorResult train_selector(ClassifierNet& classifier, ClassifierNet& predictor,
                              const Dataset& data, const AemConfig& config);
/// Same objective for the per-pixel baseline (no smoothness term).
SelectorResult train_selector_realx(ClassifierNet& classifier, ClassifierNet& predictor,
                                    const Dataset& data, const AemConfig& config);

/// Explanations for a batch: labels are the classifier's argmax.
struct Explanation {
  int label = 0;
  rbf::RbfParams params;        // RBF head only
  rbf::MaskDistribution dist;   // Bernoulli parameters
  rbf::Mask hard;
};

std::vector<Explanation> explain(ClassifierNet& classifier, SelectorNet& selector,
                                 const Dataset& data, std::span<const int> ids);

struct SelectorEvaluation {
  double center_in_box = 0;        // synthetic only, RBF head only
  double mean_kl = 0;              // predictor on hardened masks
  double mean_hard_l0 = 0;         // per pixel
  double mean_hard_smoothness = 0; // per pixel
  double mean_relaxed_l0 = 0;      // sum of Bernoulli parameters, in pixels
};

SelectorEvaluation evaluate_selector(ClassifierNet& classifier, ClassifierNet& predictor,
                                     SelectorNet& selector, const Dataset& data,
                                     std::span<const int> ids);

}  // namespace saliprune
