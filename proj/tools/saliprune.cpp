// Command-line front end for the saliency-guided pruning pipeline.

#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "saliprune/cli_runner.hpp"
#include "saliprune/error.hpp"
#include "saliprune/io.hpp"

using namespace saliprune;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> run_dir, arch, dataset, data_root;
  std::optional<std::uint64_t> seed;
  std::optional<int> n;
  std::optional<double> target, gamma1, gamma2;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON run configuration");
  cmd->add_option("--run-dir", o.run_dir, "Directory holding the run's artifacts");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--arch", o.arch, "Classifier preset (resnet-cifar, resnet-desk, mobile-desk)");
  cmd->add_option("--dataset", o.dataset, "synthetic or cifar10");
  cmd->add_option("--data-root", o.data_root, "CIFAR-10 binary directory");
  cmd->add_option("--n", o.n, "Synthetic sample count");
  cmd->add_option("--target", o.target, "Target FLOPs rate p");
  cmd->add_option("--gamma1", o.gamma1, "Interpretation loss weight");
  cmd->add_option("--gamma2", o.gamma2, "Resource loss weight");
  cmd->add_option("--set", o.sets, "Override any config value, e.g. --set prune.epochs=20")->take_all();
  cmd->add_flag("-q,--quiet", o.quiet, "Suppress progress output");
}

// Sets a dotted key; the value is parsed as JSON and falls back to a string.
void apply_set(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &j;
  std::size_t start = 0;
  for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
    node = &(*node)[key.substr(start, dot - start)];
  }
  (*node)[key.substr(start)] = value;
}

RunConfig build_config(const Overrides& o) {
  RunConfig base;
  json j = base;
  if (!o.config.empty()) j.update(read_json(o.config), true);
  for (const auto& s : o.sets) apply_set(j, s);
  if (o.run_dir) j["run_dir"] = *o.run_dir;
  if (o.arch) j["arch"] = *o.arch;
  if (o.seed) j["seed"] = *o.seed;
  if (o.dataset) j["dataset"]["kind"] = *o.dataset;
  if (o.data_root) j["dataset"]["root"] = *o.data_root;
  if (o.n) j["dataset"]["n"] = *o.n;
  if (o.target) j["prune"]["target"] = *o.target;
  if (o.gamma1) j["prune"]["gamma1"] = *o.gamma1;
  if (o.gamma2) j["prune"]["gamma2"] = *o.gamma2;
  RunConfig c;
  from_json(j, c);
  c.verbose = !o.quiet;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saliency-guided channel pruning"};
  app.require_subcommand(1);

  Overrides o;
  std::function<int(const RunConfig&)> action;
  auto stage = [&](const char* name, const char* help, std::function<int(const RunConfig&)> fn) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, o);
    cmd->callback([&action, fn] { action = fn; });
    return cmd;
  };

  bool realx = false;
  stage("train-classifier", "Train the classifier", cmd_train_classifier);
  stage("train-predictor", "Train the masked-input predictor",
        [&](const RunConfig& c) { return cmd_train_predictor(c, realx); })
      ->add_flag("--realx", realx, "Use Bernoulli(0.5) masks (baseline)");
  stage("train-selector", "Train the explanation selector",
        [&](const RunConfig& c) { return cmd_train_selector(c, realx); })
      ->add_flag("--realx", realx, "Per-pixel independent masks (baseline)");
  stage("prune", "Learn channel gates", cmd_prune);
  stage("export", "Export the pruned subnetwork", cmd_export);
  stage("finetune", "Fine-tune the exported subnetwork", cmd_finetune);
  stage("pipeline", "Run every stage from train-classifier to finetune", cmd_pipeline);
  std::vector<int> ids;
  stage("explain", "Render explanation figures", [&](const RunConfig& c) { return cmd_explain(c, ids); })
      ->add_option("--ids", ids, "Sample ids, comma or space separated")
      ->delimiter(',')
      ->required();

  std::string report_dir;
  CLI::App* report = app.add_subcommand("report", "Summarise finished runs");
  report->add_option("dir", report_dir, "Directory of run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (report->parsed()) return cmd_report(report_dir);
    return action(build_config(o));
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
