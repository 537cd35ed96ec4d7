#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "saliprune/aem.hpp"
#include "saliprune/classifier_zoo.hpp"

namespace saliprune {

/// Channel-gate logits, one vector per gate group, plus the fixed offset
/// and temperature of the relaxation.
struct GateSet {
  std::vector<Tensor> logits;
  double b = 3.0;
  double tau = 0.4;

  /// All logits zero (gates start open).
  static GateSet open(const std::vector<GateGroup>& groups, double b = 3.0, double tau = 0.4);
  void validate() const;
};

/// Soft: v = sigmoid((theta + g + b) / tau) with one Gumbel draw per channel.
/// Hard: v = 1 iff theta + b > 0.
ArchVector gates_forward(const GateSet& g, Rng& rng, bool hard);
/// Soft gates with explicit noise (one vector per group).
ArchVector gates_forward(const GateSet& g, const std::vector<std::vector<double>>& noise);
ArchVector hard_gates(const GateSet& g);

/// Scales channel c of a [C, H, W] or [N, C, H, W] map by v[c].
Tensor gate_features(const Tensor& features, std::span<const double> v);

double current_flops(const ArchVector& v, const FlopsModel& fm);
/// Differentiable form over gate variables.
Var current_flops(std::span<const Var> v, const FlopsModel& fm);

/// log(max(t_current, t_target) / t_target).
double resource_loss(double t_current, double t_target);
Var resource_loss(const Var& t_current, double t_target);

double interpretation_loss(const rbf::RbfParams& c_x, const rbf::RbfParams& predicted);

/// A pruning-subset sample with its saliency parameters from the original
/// model; `label` is the class that conditioned the selector.
struct PruningPair {
  int id = 0;
  int label = 0;
  rbf::RbfParams c_x;
};

/// Computes C_x once with the ungated classifier and selector; the class
/// index is the classifier's argmax.
std::vector<PruningPair> make_pruning_pairs(ClassifierNet& classifier, SelectorNet& selector,
                                            const Dataset& data, std::span<const int> ids);

struct PruneConfig {
  double gamma1 = 0.5;
  double gamma2 = 2.0;
  double target = 0.5;  // p
  /// Weight of the classification term; 0 gives interpretation-only steering.
  double classification_weight = 1.0;
  int epochs = 200;
  int batch_size = 128;
  double lr = 1e-3;
  double b = 3.0;
  double tau = 0.4;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const PruneConfig& c);
void from_json(const nlohmann::json& j, PruneConfig& c);

struct PruneTraceRecord {
  int epoch = 0;
  int step = 0;
  double classification = 0;
  double interpretation = 0;
  double resource = 0;
  double flops_rate = 0;  // soft T(v) / T_all
  double total = 0;
};

struct PruneLossTerms {
  Var total;
  double classification = 0;
  double interpretation = 0;
  double resource = 0;
  double flops_rate = 0;
};

/// The pruning objective for one batch with fixed Gumbel noise:
/// w * CE + gamma1 * |selector(gated) - C_x|^2 + gamma2 * R_res(T(v) / T_all).
/// `labels` are the targets of the classification term, `cond` the classes
/// conditioning the selector, `target` the cached [N, 3] saliency parameters.
PruneLossTerms prune_loss(ClassifierNet& classifier, SelectorNet& selector, const Tensor& x,
                          std::span<const int> labels, std::span<const int> cond, const Tensor& target,
                          std::span<const Var> theta, std::span<const Tensor> noise, const FlopsModel& fm,
                          const PruneConfig& config);

struct PruneResult {
  GateSet gates;
  std::vector<PruneTraceRecord> trace;
  double hard_flops_rate = 0;
  /// resource_loss of the hard gates at the end of the run.
  double hard_resource_loss = 0;
};

/// Optimizes the gate logits only; classifier and selector must stay
/// bit-identical (checked). Gates act in the classifier forward, which is
/// also the selector's encoder.
PruneResult prune(ClassifierNet& classifier, SelectorNet& selector, const Dataset& data,
                  std::span<const PruningPair> pairs, const FlopsModel& fm,
                  const PruneConfig& config);

struct ExportedNetwork {
  ClassifierSpec spec;
  WeightSet weights;
  std::vector<std::vector<int>> kept;  // kept channel indices per group
};

/// Physically removes closed channels; groups that would be empty keep
/// their highest-logit channel.
ExportedNetwork export_subnetwork(const ClassifierSpec& spec, const WeightSet& weights,
                                  const GateSet& gates);

/// Hard gates matching what export_subnetwork keeps (including the
/// one-channel fallback).
ArchVector export_gates(const GateSet& gates);

struct FinetuneResult {
  ClassifierTrainResult training;
  double test_accuracy = 0;
  double baseline_accuracy = 0;
  double delta_accuracy = 0;  // finetuned - baseline
};

/// Momentum SGD on all remaining weights; defaults lr 0.1, momentum 0.9,
/// weight decay 1e-4.
FinetuneResult finetune(ClassifierNet& exported, const Dataset& data,
                        const ClassifierTrainConfig& config, double baseline_accuracy);

}  // namespace saliprune
