#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "saliprune/layers.hpp"

namespace saliprune {

struct Dataset;

enum class Arch { residual, depthwise_separable };

struct StageSpec {
  int width = 16;
  int blocks = 1;
  int stride = 1;
  bool operator==(const StageSpec&) const = default;
};

/// Structural description of a desk-scale CNN. Layer records, gate groups
/// and FLOPs are all derived from it.
struct ClassifierSpec {
  Arch arch = Arch::residual;
  int input_size = 32;
  int in_channels = 3;
  int num_classes = 10;
  int stem_channels = 16;
  int stem_stride = 1;
  std::vector<StageSpec> stages;
  /// Hidden width multiplier of inverted-residual blocks.
  int expansion = 2;
  /// Per-block gated (block-internal) width; empty means the default
  /// (stage width for residual blocks, expansion * input for inverted ones).
  std::vector<int> hidden;

  int block_count() const;
  std::vector<int> hidden_widths() const;
  /// Throws InvalidParameter when shapes do not compose.
  void validate() const;
  bool operator==(const ClassifierSpec&) const = default;
};

void to_json(nlohmann::json& j, const ClassifierSpec& s);
void from_json(const nlohmann::json& j, ClassifierSpec& s);

/// Three residual stages, widths 16/32/64 at 32x32, the CIFAR ResNet scales.
ClassifierSpec residual_cifar_spec(int blocks_per_stage = 3);
/// Reduced residual net used for desk experiments.
ClassifierSpec residual_desk_spec();
/// Small inverted-residual (depthwise-separable) net.
ClassifierSpec depthwise_desk_spec();
/// Looks up a named preset: "resnet-cifar", "resnet-desk", "mobile-desk".
ClassifierSpec spec_preset(const std::string& name);

enum class LayerKind { conv, depthwise, fully_connected };

/// One FLOPs-bearing layer. Gate indices refer to gate groups; -1 marks a
/// side with a fixed width.
struct LayerRecord {
  std::string id;
  LayerKind kind = LayerKind::conv;
  int kernel = 1;
  int c_in = 0;
  int c_out = 0;
  int stride = 1;
  int out_h = 1;
  int out_w = 1;
  int in_gate = -1;
  int out_gate = -1;

  bool prunable() const { return in_gate >= 0 || out_gate >= 0; }
};

/// Gate group: the block-internal channels of one block.
struct GateGroup {
  std::string id;
  int size = 0;
};

std::vector<LayerRecord> layer_records(const ClassifierSpec& spec);
std::vector<GateGroup> gate_groups(const ClassifierSpec& spec);

/// Multiply-accumulate count of one layer with the given active widths.
/// Depthwise layers use `c_out_active` as their channel count.
std::int64_t flops_of_layer(const LayerRecord& layer, int c_in_active, int c_out_active);

/// Per-gate-group values (soft in (0,1) or hard in {0,1}).
struct ArchVector {
  std::vector<std::vector<double>> values;
  bool hard = false;

  static ArchVector ones(const std::vector<GateGroup>& groups);
  std::vector<int> active_counts() const;
};

class FlopsModel {
 public:
  explicit FlopsModel(const ClassifierSpec& spec);

  const std::vector<LayerRecord>& layers() const { return layers_; }
  const std::vector<GateGroup>& groups() const { return groups_; }
  /// Total FLOPs of layers that carry gates (T_all).
  std::int64_t total_prunable() const { return total_prunable_; }
  /// FLOPs of every conv/FC layer.
  std::int64_t total() const { return total_; }
  /// Prunable FLOPs with an integer active count per gate group.
  std::int64_t prunable_with_counts(std::span<const int> active) const;
  /// Expected prunable FLOPs: each layer scales by the mean gate activity
  /// on each gated side (once for depthwise layers).
  double current(const ArchVector& v) const;

 private:
  std::vector<LayerRecord> layers_;
  std::vector<GateGroup> groups_;
  std::int64_t total_prunable_ = 0;
  std::int64_t total_ = 0;
};

/// Output of a classifier pass: logits plus the three stage outputs the
/// selector uses as encoder features (shallowest first).
struct ForwardResult {
  Var logits;
  std::vector<Var> scales;
};

class ClassifierNet {
 public:
  /// Builds freshly initialized weights; deterministic in `rng`.
  ClassifierNet(ClassifierSpec spec, Rng& rng);
  ClassifierNet(ClassifierSpec spec, const WeightSet& weights);

  ClassifierNet(const ClassifierNet&) = delete;
  ClassifierNet& operator=(const ClassifierNet&) = delete;
  ClassifierNet(ClassifierNet&&) = default;

  const ClassifierSpec& spec() const { return spec_; }

  /// `gates` holds one [hidden] vector per block, or is empty for the
  /// ungated network. Gates multiply block-internal features after their
  /// activation.
  ForwardResult forward(const Var& x, bool training, std::span<const Var> gates = {});

  StateList state();
  WeightSet weights();
  void load(const WeightSet& weights);
  std::vector<Var> parameters();
  void set_trainable(bool trainable);
  std::string checksum();

 private:
  struct Block {
    Conv2d conv1;          // 3x3 (residual) or 1x1 expand (inverted)
    BatchNorm2d bn1;
    DepthwiseConv2d dw;    // inverted only
    BatchNorm2d bn_mid;    // inverted only
    Conv2d conv2;          // 3x3 (residual) or 1x1 project (inverted)
    BatchNorm2d bn2;
    bool has_projection = false;
    Conv2d proj;           // residual shortcut when shapes change
    BatchNorm2d proj_bn;
    bool identity_residual = false;
    int stage = 0;
  };

  void build(Rng& rng);

  ClassifierSpec spec_;
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<Block> blocks_;
  Linear fc_;
};

/// Fresh weights for `spec` (deterministic given the seed).
WeightSet build_classifier(const ClassifierSpec& spec, Rng& rng);

struct ClassifierTrainConfig {
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool augment = false;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ClassifierTrainConfig& c);
void from_json(const nlohmann::json& j, ClassifierTrainConfig& c);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double val_accuracy = 0;
};

struct ClassifierTrainResult {
  WeightSet weights;  // best-validation checkpoint
  std::vector<EpochRecord> curve;
  double best_val_accuracy = 0;
};

/// Momentum SGD with cosine decay; keeps the best-validation weights.
ClassifierTrainResult train_classifier(ClassifierNet& net, const Dataset& data,
                                       const ClassifierTrainConfig& config);

/// Top-1 accuracy over `indices`; with `gates` the features are gated.
double evaluate(ClassifierNet& net, const Dataset& data, std::span<const int> indices,
                const std::optional<ArchVector>& gates = std::nullopt, int batch_size = 128);

/// Converts an ArchVector into constant gate variables for forward().
std::vector<Var> gate_vars(const ArchVector& v);

}  // namespace saliprune
