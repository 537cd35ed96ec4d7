#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "saliprune/aem.hpp"
#include "saliprune/classifier_zoo.hpp"
#include "saliprune/pruner.hpp"

namespace saliprune {

struct DatasetConfig {
  std::string kind = "synthetic";  // "synthetic" or "cifar10"
  std::string root;                // CIFAR-10 directory
  int n = 20000;                   // synthetic sample count
  int classes = 10;
  /// Split and generator seed; unset follows the run seed. Fixing it lets
  /// several pruning seeds share one trained classifier.
  std::optional<std::uint64_t> seed;
};

/// Everything a stage needs. Sub-config seeds are overwritten by `seed`
/// when the config is resolved.
struct RunConfig {
  std::filesystem::path run_dir = "run";
  DatasetConfig dataset;
  std::string arch = "resnet-desk";
  std::uint64_t seed = 0;
  ClassifierTrainConfig classifier;
  AemConfig aem;
  PruneConfig prune;
  ClassifierTrainConfig finetune;
  bool verbose = true;

  RunConfig();
  void resolve();
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown top-level keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Artifact file names inside a run directory.
namespace artifact {
inline constexpr const char* classifier = "classifier.ckpt";
inline constexpr const char* predictor = "predictor.ckpt";
inline constexpr const char* realx_predictor = "realx_predictor.ckpt";
inline constexpr const char* selector = "selector.ckpt";
inline constexpr const char* realx_selector = "realx_selector.ckpt";
inline constexpr const char* gates = "gates.ckpt";
inline constexpr const char* subnetwork = "subnetwork.ckpt";
inline constexpr const char* finetuned = "finetuned.ckpt";
}  // namespace artifact

/// Builds the dataset a config describes.
Dataset load_run_dataset(const RunConfig& config);

// Stage commands. Each returns 0 or throws an Error whose exit_code() is
// the process status.
int cmd_train_classifier(const RunConfig& config);
/// `realx` trains the Bernoulli(0.5)-mask predictor of the baseline.
int cmd_train_predictor(const RunConfig& config, bool realx = false);
int cmd_train_selector(const RunConfig& config, bool realx = false);
int cmd_prune(const RunConfig& config);
int cmd_export(const RunConfig& config);
int cmd_finetune(const RunConfig& config);
/// Writes figures/explain_<id>.png and explain.jsonl.
int cmd_explain(const RunConfig& config, const std::vector<int>& ids);
/// Runs train-classifier through finetune in order.
int cmd_pipeline(const RunConfig& config);

struct ReportRow {
  std::string run;
  bool complete = false;
  double baseline_accuracy = 0;
  double pruned_accuracy = 0;
  double delta_accuracy = 0;
  double pruned_flops_percent = 0;
};

std::vector<ReportRow> collect_report(const std::filesystem::path& dir);
std::string format_report(const std::vector<ReportRow>& rows);
/// Writes report.json and report.txt into `dir` and prints the table.
int cmd_report(const std::filesystem::path& dir);

/// Renders the 4-panel figure: original, Bernoulli heat map, hardened
/// mask, masked input. `image` is a [C, H, W] display image in [0, 1].
struct ExplainPanels {
  Tensor original;
  rbf::MaskDistribution dist;
  rbf::Mask hard;
  Tensor masked;
};
ExplainPanels explain_panels(const Tensor& display_image, const rbf::MaskDistribution& dist);

}  // namespace saliprune
