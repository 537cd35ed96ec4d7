#include "saliprune/cli_runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <set>
#include <sstream>

#include "saliprune/error.hpp"
#include "saliprune/io.hpp"

namespace saliprune {

namespace fs = std::filesystem;
using nlohmann::json;

RunConfig::RunConfig() {
  classifier.epochs = 10;
  classifier.lr = 0.05;
  finetune.epochs = 10;
  finetune.lr = 0.1;
}

void RunConfig::resolve() {
  classifier.seed = seed;
  aem.seed = seed;
  prune.seed = seed;
  finetune.seed = seed + 1;
}

void RunConfig::validate() const {
  if (dataset.kind != "synthetic" && dataset.kind != "cifar10") {
    throw ConfigError("dataset.kind must be 'synthetic' or 'cifar10'");
  }
  if (dataset.kind == "cifar10" && dataset.root.empty()) throw ConfigError("dataset.root is required for cifar10");
  if (dataset.kind == "synthetic" && (dataset.n < 10 || dataset.classes < 2)) {
    throw ConfigError("synthetic dataset needs n >= 10 and at least two classes");
  }
  spec_preset(arch).validate();
  if (classifier.epochs < 0 || finetune.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (classifier.batch_size < 2 || finetune.batch_size < 2) throw ConfigError("batch size must be >= 2");
  aem.validate();
  prune.validate();
}

void to_json(json& j, const RunConfig& c) {
  j = {{"run_dir", c.run_dir.string()},
       {"dataset", {{"kind", c.dataset.kind}, {"root", c.dataset.root}, {"n", c.dataset.n}, {"classes", c.dataset.classes},
                   {"seed", c.dataset.seed ? json(*c.dataset.seed) : json(nullptr)}}},
       {"arch", c.arch},
       {"seed", c.seed},
       {"classifier", c.classifier},
       {"aem", c.aem},
       {"prune", c.prune},
       {"finetune", c.finetune}};
}

void from_json(const json& j, RunConfig& c) {
  static const std::set<std::string> known = {"run_dir", "dataset", "arch", "seed", "classifier",
                                              "aem", "prune", "finetune"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown configuration key '" + key + "'");
  }
  try {
    if (j.contains("run_dir")) c.run_dir = j.at("run_dir").get<std::string>();
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.kind = d.value("kind", c.dataset.kind);
      c.dataset.root = d.value("root", c.dataset.root);
      c.dataset.n = d.value("n", c.dataset.n);
      c.dataset.classes = d.value("classes", c.dataset.classes);
      if (d.contains("seed")) {
        c.dataset.seed = d.at("seed").is_null() ? std::nullopt
                                                : std::optional(d.at("seed").get<std::uint64_t>());
      }
    }
    c.arch = j.value("arch", c.arch);
    c.seed = j.value("seed", c.seed);
    // Sections merge over the current values so partial files work.
    auto merge = [&](const char* key, auto& target) {
      if (!j.contains(key)) return;
      json base = target;
      base.update(j.at(key));
      target = base.get<std::decay_t<decltype(target)>>();
    };
    merge("classifier", c.classifier);
    merge("aem", c.aem);
    merge("prune", c.prune);
    merge("finetune", c.finetune);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) {
  RunConfig c;
  from_json(read_json(path), c);
  return c;
}

Dataset load_run_dataset(const RunConfig& config) {
  const std::uint64_t seed = config.dataset.seed.value_or(config.seed);
  if (config.dataset.kind == "cifar10") return load_cifar10(config.dataset.root, seed);
  return synthetic_benchmark(config.dataset.n, config.dataset.classes, seed);
}

namespace {

template <typename... Args>
void log(const RunConfig& c, const char* fmt, Args... args) {
  if (!c.verbose) return;
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

fs::path in_run(const RunConfig& c, const std::string& name) { return c.run_dir / name; }

/// Loads an upstream artifact and checks its integrity.
Checkpoint require_artifact(const RunConfig& c, const char* name, const std::string& kind) {
  const fs::path path = in_run(c, name);
  if (!fs::exists(path)) {
    throw PrerequisiteError(path.string() + " not found; run the stage that produces it first");
  }
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != kind) {
    throw PrerequisiteError(path.string() + " holds a '" + ckpt.kind + "' artifact, expected '" + kind + "'");
  }
  if (ckpt.meta.value("weights_sha256", std::string()) != checksum(ckpt.tensors)) {
    throw PrerequisiteError(path.string() + " failed its integrity check (content hash mismatch)");
  }
  return ckpt;
}

std::string sha_of(const Checkpoint& c) { return c.meta.at("weights_sha256").get<std::string>(); }

void require_link(const Checkpoint& downstream, const char* key, const Checkpoint& upstream,
                  const std::string& what) {
  const std::string recorded = downstream.meta.value(key, std::string());
  if (recorded != sha_of(upstream)) {
    throw PrerequisiteError("hash chain broken: " + what + " was trained against " +
                            (recorded.empty() ? std::string("an unknown checkpoint") : recorded.substr(0, 12)) +
                            " but the current one is " + sha_of(upstream).substr(0, 12));
  }
}

void save_artifact(const RunConfig& c, const char* name, Checkpoint ckpt) {
  ckpt.meta["weights_sha256"] = checksum(ckpt.tensors);
  save_checkpoint(in_run(c, name), ckpt);
}

Dataset checked_dataset(const RunConfig& c, const Checkpoint& classifier) {
  Dataset d = load_run_dataset(c);
  if (d.fingerprint() != classifier.meta.at("dataset_fingerprint").get<std::string>()) {
    throw PrerequisiteError("dataset fingerprint differs from the one the classifier was trained on");
  }
  return d;
}

ClassifierSpec spec_of(const Checkpoint& c) { return c.meta.at("spec").get<ClassifierSpec>(); }

void write_config(const RunConfig& c, const std::string& stage) {
  write_json(in_run(c, stage + ".config.json"), c);
}

std::string summary_text(const json& j) {
  std::ostringstream out;
  for (const auto& [k, v] : j.items()) {
    out << std::left << std::setw(28) << k << ' ' << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
  }
  return out.str();
}

void write_summary(const RunConfig& c, const std::string& stage, const json& j) {
  write_json(in_run(c, stage + "_summary.json"), j);
  write_text(in_run(c, stage + "_summary.txt"), summary_text(j));
}

json loss_record(const LossRecord& r) {
  return {{"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}, {"kl", r.kl}, {"l0", r.l0},
          {"smoothness", r.smoothness}};
}

void prepare(const RunConfig& c, const std::string& stage) {
  c.validate();
  fs::create_directories(c.run_dir);
  write_config(c, stage);
}

RunConfig resolved(const RunConfig& c) {
  RunConfig r = c;
  r.resolve();
  return r;
}

}  // namespace

int cmd_train_classifier(const RunConfig& raw) {
  const RunConfig c = resolved(raw);
  prepare(c, "train_classifier");
  const Dataset data = load_run_dataset(c);
  const ClassifierSpec spec = [&] {
    ClassifierSpec s = spec_preset(c.arch);
    s.num_classes = data.num_classes;
    s.input_size = data.height;
    s.in_channels = data.channels;
    return s;
  }();
  Rng rng = Rng(c.seed).substream(0xC1);
  ClassifierNet net(spec, rng);
  log(c, "train-classifier: %s, %d samples, %d epochs", c.arch.c_str(), data.size(), c.classifier.epochs);
  auto result = train_classifier(net, data, c.classifier);
  JsonlWriter metrics(in_run(c, "classifier_metrics.jsonl"));
  for (const auto& e : result.curve) {
    metrics.write({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_accuracy", e.train_accuracy},
                   {"val_accuracy", e.val_accuracy}});
    log(c, "  epoch %d loss %.4f train %.4f val %.4f", e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy);
  }
  flush(metrics);
  const auto test = data.indices(SplitTag::test);
  const double test_acc = evaluate(net, data, test);
  Checkpoint ckpt;
  ckpt.kind = "classifier";
  ckpt.tensors = result.weights;
  ckpt.meta = {{"spec", spec},
               {"train_config", c.classifier},
               {"seed", c.seed},
               {"dataset_fingerprint", data.fingerprint()},
               {"augmentation", c.classifier.augment ? "flip+crop4" : "none"},
               {"val_accuracy", result.best_val_accuracy},
               {"test_accuracy", test_acc}};
  save_artifact(c, artifact::classifier, ckpt);
  const FlopsModel fm(spec);
  write_summary(c, "classifier", {{"val_accuracy", result.best_val_accuracy}, {"test_accuracy", test_acc},
                                  {"total_flops", fm.total()}, {"prunable_flops", fm.total_prunable()},
                                  {"weights_sha256", checksum(ckpt.tensors)}});
  log(c, "  test accuracy %.4f", test_acc);
  return 0;
}

int cmd_train_predictor(const RunConfig& raw, bool realx) {
  const RunConfig c = resolved(raw);
  prepare(c, realx ? "train_realx_predictor" : "train_predictor");
  const Checkpoint cls = require_artifact(c, artifact::classifier, "classifier");
  const Dataset data = checked_dataset(c, cls);
  ClassifierNet classifier(spec_of(cls), cls.tensors);
  const PredictorMasks masks = realx ? PredictorMasks::bernoulli_half : PredictorMasks::rbf;
  log(c, "train-predictor (%s masks): %d epochs", realx ? "Bernoulli(0.5)" : "RBF", c.aem.predictor_epochs);
  auto result = train_predictor(classifier, data, c.aem, masks);
  ClassifierNet predictor(classifier.spec(), result.weights);
  Rng untrained_rng = Rng(c.seed).substream(0xF00D);
  ClassifierNet untrained(classifier.spec(), untrained_rng);
  const auto val = data.indices(SplitTag::val);
  const std::uint64_t eval_seed = Rng(c.seed).substream(0xE7).next_u64();
  const double kl = predictor_kl(classifier, predictor, data, val, masks, eval_seed);
  const double kl0 = predictor_kl(classifier, untrained, data, val, masks, eval_seed);
  const double kl_identity = predictor_kl(classifier, predictor, data, val, masks, eval_seed, true);

  const std::string stem = realx ? "realx_predictor" : "predictor";
  JsonlWriter metrics(in_run(c, stem + "_metrics.jsonl"));
  for (const auto& r : result.curve) metrics.write({{"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}});
  flush(metrics);
  Checkpoint ckpt;
  ckpt.kind = "predictor";
  ckpt.tensors = result.weights;
  ckpt.meta = {{"spec", classifier.spec()}, {"aem_config", c.aem}, {"seed", c.seed},
               {"masks", realx ? "bernoulli_half" : "rbf"}, {"classifier_sha256", sha_of(cls)}};
  save_artifact(c, realx ? artifact::realx_predictor : artifact::predictor, ckpt);
  write_summary(c, stem, {{"val_kl", kl}, {"untrained_val_kl", kl0}, {"identity_mask_val_kl", kl_identity},
                          {"weights_sha256", checksum(ckpt.tensors)}});
  log(c, "  validation KL %.4f (untrained %.4f, identity mask %.4f)", kl, kl0, kl_identity);
  return 0;
}

int cmd_train_selector(const RunConfig& raw, bool realx) {
  const RunConfig c = resolved(raw);
  prepare(c, realx ? "train_realx_selector" : "train_selector");
  const Checkpoint cls = require_artifact(c, artifact::classifier, "classifier");
  const Checkpoint pred = require_artifact(c, realx ? artifact::realx_predictor : artifact::predictor, "predictor");
  require_link(pred, "classifier_sha256", cls, "the predictor");
  const Dataset data = checked_dataset(c, cls);
  ClassifierNet classifier(spec_of(cls), cls.tensors);
  ClassifierNet predictor(spec_of(pred), pred.tensors);
  log(c, "train-selector (%s): %d epochs", realx ? "independent masks" : "RBF", c.aem.selector_epochs);
  auto result = realx ? train_selector_realx(classifier, predictor, data, c.aem)
                      : train_selector(classifier, predictor, data, c.aem);
  const SelectorHead head = realx ? SelectorHead::independent : SelectorHead::rbf;
  SelectorNet selector(classifier.spec(), head, result.weights);
  const auto val = data.indices(SplitTag::val);
  const auto ev = evaluate_selector(classifier, predictor, selector, data, val);

  const std::string stem = realx ? "realx_selector" : "selector";
  JsonlWriter metrics(in_run(c, stem + "_metrics.jsonl"));
  for (const auto& r : result.curve) metrics.write(loss_record(r));
  flush(metrics);
  Checkpoint ckpt;
  ckpt.kind = "selector";
  ckpt.tensors = result.weights;
  ckpt.meta = {{"encoder_spec", classifier.spec()}, {"head", realx ? "independent" : "rbf"},
               {"aem_config", c.aem}, {"seed", c.seed}, {"classifier_sha256", sha_of(cls)},
               {"predictor_sha256", sha_of(pred)}};
  save_artifact(c, realx ? artifact::realx_selector : artifact::selector, ckpt);
  json summary = {{"val_mean_kl", ev.mean_kl}, {"val_hard_l0_per_pixel", ev.mean_hard_l0},
                  {"val_hard_smoothness_per_pixel", ev.mean_hard_smoothness},
                  {"val_relaxed_l0", ev.mean_relaxed_l0}, {"weights_sha256", checksum(ckpt.tensors)}};
  if (data.synthetic() && !realx) summary["val_center_in_box"] = ev.center_in_box;
  write_summary(c, stem, summary);
  log(c, "  KL %.4f, hard L0 %.4f, smoothness %.4f, centers in box %.4f", ev.mean_kl, ev.mean_hard_l0,
      ev.mean_hard_smoothness, ev.center_in_box);
  return 0;
}

namespace {

GateSet gates_from(const Checkpoint& ckpt) {
  GateSet g;
  g.b = ckpt.meta.at("b").get<double>();
  g.tau = ckpt.meta.at("tau").get<double>();
  const int groups = ckpt.meta.at("groups").get<int>();
  for (int k = 0; k < groups; ++k) {
    auto it = ckpt.tensors.find("block" + std::to_string(k));
    if (it == ckpt.tensors.end()) throw IoError("gate checkpoint lacks group " + std::to_string(k));
    g.logits.push_back(it->second);
  }
  g.validate();
  return g;
}

}  // namespace

int cmd_prune(const RunConfig& raw) {
  const RunConfig c = resolved(raw);
  prepare(c, "prune");
  const Checkpoint cls = require_artifact(c, artifact::classifier, "classifier");
  const Checkpoint sel = require_artifact(c, artifact::selector, "selector");
  require_link(sel, "classifier_sha256", cls, "the selector");
  if (sel.meta.value("head", std::string()) != "rbf") throw PrerequisiteError("pruning needs the RBF selector");
  const Dataset data = checked_dataset(c, cls);
  ClassifierNet classifier(spec_of(cls), cls.tensors);
  SelectorNet selector(classifier.spec(), SelectorHead::rbf, sel.tensors);
  const FlopsModel fm(classifier.spec());
  const auto pairs = make_pruning_pairs(classifier, selector, data, data.prune_subset);
  log(c, "prune: %zu pruning pairs, p=%.3f, gamma1=%.3f, gamma2=%.3f, %d epochs", pairs.size(), c.prune.target,
      c.prune.gamma1, c.prune.gamma2, c.prune.epochs);
  auto result = prune(classifier, selector, data, pairs, fm, c.prune);

  JsonlWriter trace(in_run(c, "prune_trace.jsonl"));
  for (const auto& r : result.trace) {
    trace.write({{"epoch", r.epoch}, {"step", r.step}, {"classification", r.classification},
                 {"interpretation", r.interpretation}, {"resource", r.resource}, {"flops_rate", r.flops_rate},
                 {"total", r.total}});
  }
  flush(trace);
  // Training-time resource term and soft rate averaged over the last epoch.
  double epoch_resource = 0, epoch_rate = 0;
  int epoch_steps = 0;
  for (const auto& r : result.trace) {
    if (r.epoch != result.trace.back().epoch) continue;
    epoch_resource += r.resource;
    epoch_rate += r.flops_rate;
    ++epoch_steps;
  }
  if (epoch_steps > 0) {
    epoch_resource /= epoch_steps;
    epoch_rate /= epoch_steps;
  }
  const auto test = data.indices(SplitTag::test);
  const double gated_acc = evaluate(classifier, data, test, hard_gates(result.gates));
  Checkpoint ckpt;
  ckpt.kind = "gates";
  for (std::size_t k = 0; k < result.gates.logits.size(); ++k) {
    ckpt.tensors["block" + std::to_string(k)] = result.gates.logits[k];
  }
  ckpt.meta = {{"b", result.gates.b}, {"tau", result.gates.tau},
               {"groups", static_cast<int>(result.gates.logits.size())}, {"prune_config", c.prune},
               {"seed", c.seed}, {"classifier_sha256", sha_of(cls)}, {"selector_sha256", sha_of(sel)}};
  save_artifact(c, artifact::gates, ckpt);
  write_summary(c, "prune", {{"hard_flops_rate", result.hard_flops_rate},
                             {"hard_resource_loss", result.hard_resource_loss},
                             {"final_epoch_resource_loss", epoch_resource},
                             {"final_epoch_flops_rate", epoch_rate},
                             {"hard_gated_test_accuracy", gated_acc},
                             {"weights_sha256", checksum(ckpt.tensors)}});
  log(c, "  hard FLOPs rate %.4f, final-epoch resource loss %.5f, hard-gated accuracy %.4f",
      result.hard_flops_rate, epoch_resource, gated_acc);
  return 0;
}

int cmd_export(const RunConfig& raw) {
  const RunConfig c = resolved(raw);
  prepare(c, "export");
  const Checkpoint cls = require_artifact(c, artifact::classifier, "classifier");
  const Checkpoint gck = require_artifact(c, artifact::gates, "gates");
  require_link(gck, "classifier_sha256", cls, "the gate set");
  const ClassifierSpec spec = spec_of(cls);
  const GateSet gates = gates_from(gck);
  auto exported = export_subnetwork(spec, cls.tensors, gates);
  const FlopsModel full(spec), sub(exported.spec);
  const double rate = static_cast<double>(sub.total_prunable()) / static_cast<double>(full.total_prunable());

  Checkpoint ckpt;
  ckpt.kind = "classifier";
  ckpt.tensors = exported.weights;
  ckpt.meta = cls.meta;
  ckpt.meta.erase("weights_sha256");
  ckpt.meta["spec"] = exported.spec;
  ckpt.meta["classifier_sha256"] = sha_of(cls);
  ckpt.meta["gates_sha256"] = sha_of(gck);
  ckpt.meta["flops_rate"] = rate;
  save_artifact(c, artifact::subnetwork, ckpt);
  write_summary(c, "export", {{"full_prunable_flops", full.total_prunable()},
                              {"exported_prunable_flops", sub.total_prunable()},
                              {"flops_rate", rate},
                              {"pruned_flops_percent", 100.0 * (1.0 - rate)},
                              {"hidden_widths", exported.spec.hidden},
                              {"weights_sha256", checksum(ckpt.tensors)}});
  log(c, "export: FLOPs rate %.4f (pruned %.2f%%)", rate, 100.0 * (1.0 - rate));
  return 0;
}

int cmd_finetune(const RunConfig& raw) {
  const RunConfig c = resolved(raw);
  prepare(c, "finetune");
  const Checkpoint cls = require_artifact(c, artifact::classifier, "classifier");
  const Checkpoint subck = require_artifact(c, artifact::subnetwork, "classifier");
  require_link(subck, "classifier_sha256", cls, "the exported subnetwork");
  const Dataset data = checked_dataset(c, cls);
  ClassifierNet net(spec_of(subck), subck.tensors);
  const double baseline = cls.meta.at("test_accuracy").get<double>();
  log(c, "finetune: %d epochs, lr %.4f", c.finetune.epochs, c.finetune.lr);
  auto result = finetune(net, data, c.finetune, baseline);
  JsonlWriter metrics(in_run(c, "finetune_metrics.jsonl"));
  for (const auto& e : result.training.curve) {
    metrics.write({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_accuracy", e.train_accuracy},
                   {"val_accuracy", e.val_accuracy}});
  }
  flush(metrics);
  const FlopsModel full(spec_of(cls)), sub(net.spec());
  const double rate = static_cast<double>(sub.total_prunable()) / static_cast<double>(full.total_prunable());
  Checkpoint ckpt;
  ckpt.kind = "classifier";
  ckpt.tensors = result.training.weights;
  ckpt.meta = subck.meta;
  ckpt.meta.erase("weights_sha256");
  ckpt.meta["subnetwork_sha256"] = sha_of(subck);
  ckpt.meta["finetune_config"] = c.finetune;
  ckpt.meta["test_accuracy"] = result.test_accuracy;
  save_artifact(c, artifact::finetuned, ckpt);
  write_summary(c, "finetune", {{"baseline_accuracy", baseline},
                                {"pruned_accuracy", result.test_accuracy},
                                {"delta_accuracy", result.delta_accuracy},
                                {"flops_rate", rate},
                                {"pruned_flops_percent", 100.0 * (1.0 - rate)},
                                {"weights_sha256", checksum(ckpt.tensors)}});
  log(c, "  accuracy %.4f (baseline %.4f, delta %+.4f), pruned FLOPs %.2f%%", result.test_accuracy, baseline,
      result.delta_accuracy, 100.0 * (1.0 - rate));
  return 0;
}

ExplainPanels explain_panels(const Tensor& display, const rbf::MaskDistribution& dist) {
  ExplainPanels p;
  p.original = display;
  p.dist = dist;
  p.hard = rbf::harden_mask(dist);
  p.masked = rbf::apply_mask(display, p.hard);
  return p;
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

Image render(const ExplainPanels& p, int zoom = 4, int gap = 4) {
  const int h = p.dist.params.height(), w = p.dist.params.width();
  Image img(4 * w * zoom + 5 * gap, h * zoom + 2 * gap);
  auto paint = [&](int panel, auto&& color) {
    const int x0 = gap + panel * (w * zoom + gap);
    for (int y = 0; y < h * zoom; ++y) {
      for (int x = 0; x < w * zoom; ++x) {
        const auto [r, g, b] = color(y / zoom, x / zoom);
        img.set(x0 + x, gap + y, r, g, b);
      }
    }
  };
  auto rgb_of = [&](const Tensor& t) {
    return [&t, h, w](int z, int s) {
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      const std::size_t i = static_cast<std::size_t>(z) * w + s;
      const bool gray = t.dim(0) == 1;
      return std::tuple{to_byte(t[i]), to_byte(t[(gray ? 0 : 1) * plane + i]), to_byte(t[(gray ? 0 : 2) * plane + i])};
    };
  };
  paint(0, rgb_of(p.original));
  paint(1, [&](int z, int s) {
    const double v = p.dist.params(z, s);  // black-red-yellow-white ramp
    return std::tuple{to_byte(3 * v), to_byte(3 * v - 1), to_byte(3 * v - 2)};
  });
  paint(2, [&](int z, int s) {
    const std::uint8_t v = p.hard.values(z, s) > 0.5 ? 255 : 0;
    return std::tuple{v, v, v};
  });
  paint(3, rgb_of(p.masked));
  return img;
}

}  // namespace

int cmd_explain(const RunConfig& raw, const std::vector<int>& ids) {
  const RunConfig c = resolved(raw);
  prepare(c, "explain");
  const Checkpoint cls = require_artifact(c, artifact::classifier, "classifier");
  const Checkpoint sel = require_artifact(c, artifact::selector, "selector");
  require_link(sel, "classifier_sha256", cls, "the selector");
  const Dataset data = checked_dataset(c, cls);
  for (int id : ids) {
    if (id < 0 || id >= data.size()) throw ConfigError("sample id " + std::to_string(id) + " out of range");
  }
  ClassifierNet classifier(spec_of(cls), cls.tensors);
  SelectorNet selector(classifier.spec(), SelectorHead::rbf, sel.tensors);
  const auto ex = explain(classifier, selector, data, ids);
  JsonlWriter records(in_run(c, "explain.jsonl"));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto panels = explain_panels(data.denormalize(data.image(ids[i])), ex[i].dist);
    const std::string file = "figures/explain_" + std::to_string(ids[i]) + ".png";
    write_png(in_run(c, file), render(panels));
    json rec = {{"id", ids[i]}, {"label", ex[i].label}, {"c_z", ex[i].params.c_z}, {"c_t", ex[i].params.c_t},
                {"sigma", ex[i].params.sigma}, {"figure", file}};
    if (data.synthetic()) {
      const auto& b = data.boxes[ids[i]];
      rec["patch"] = {{"top", b.top}, {"left", b.left}, {"size", b.size}};
    }
    records.write(rec);
    log(c, "  sample %d: class %d, c_z %.2f, c_t %.2f, sigma %.2f -> %s", ids[i], ex[i].label, ex[i].params.c_z,
        ex[i].params.c_t, ex[i].params.sigma, file.c_str());
  }
  flush(records);
  return 0;
}

int cmd_pipeline(const RunConfig& c) {
  cmd_train_classifier(c);
  cmd_train_predictor(c);
  cmd_train_selector(c);
  cmd_prune(c);
  cmd_export(c);
  cmd_finetune(c);
  return 0;
}

std::vector<ReportRow> collect_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw PrerequisiteError(dir.string() + " is not a directory");
  std::vector<fs::path> candidates{dir};
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) candidates.push_back(e.path());
  }
  std::sort(candidates.begin() + 1, candidates.end());
  std::vector<ReportRow> rows;
  for (const auto& run : candidates) {
    const bool has_any = fs::exists(run / artifact::classifier) || fs::exists(run / "classifier_summary.json");
    if (!has_any) continue;
    ReportRow row;
    row.run = run == dir ? "." : run.filename().string();
    const fs::path summary = run / "finetune_summary.json";
    if (fs::exists(summary)) {
      try {
        const json j = read_json(summary);
        row.baseline_accuracy = j.at("baseline_accuracy").get<double>();
        row.pruned_accuracy = j.at("pruned_accuracy").get<double>();
        row.delta_accuracy = row.pruned_accuracy - row.baseline_accuracy;
        row.pruned_flops_percent = std::clamp(j.at("pruned_flops_percent").get<double>(), 0.0, 100.0);
        row.complete = true;
      } catch (const std::exception&) {
        row.complete = false;
      }
    }
    rows.push_back(row);
  }
  return rows;
}

std::string format_report(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(24) << "run" << std::right << std::setw(14) << "baseline_acc" << std::setw(12)
      << "pruned_acc" << std::setw(10) << "delta" << std::setw(16) << "pruned_flops_%" << "  status\n";
  out << std::fixed;
  for (const auto& r : rows) {
    out << std::left << std::setw(24) << r.run << std::right;
    if (r.complete) {
      out << std::setprecision(4) << std::setw(14) << r.baseline_accuracy << std::setw(12) << r.pruned_accuracy
          << std::showpos << std::setw(10) << r.delta_accuracy << std::noshowpos << std::setprecision(2)
          << std::setw(16) << r.pruned_flops_percent << "  ok\n";
    } else {
      out << std::setw(14) << "-" << std::setw(12) << "-" << std::setw(10) << "-" << std::setw(16) << "-"
          << "  INCOMPLETE\n";
    }
  }
  return out.str();
}

int cmd_report(const fs::path& dir) {
  const auto rows = collect_report(dir);
  json j = json::array();
  for (const auto& r : rows) {
    json rec = {{"run", r.run}, {"complete", r.complete}};
    if (r.complete) {
      rec["baseline_accuracy"] = r.baseline_accuracy;
      rec["pruned_accuracy"] = r.pruned_accuracy;
      rec["delta_accuracy"] = r.delta_accuracy;
      rec["pruned_flops_percent"] = r.pruned_flops_percent;
    }
    j.push_back(rec);
  }
  const std::string text = format_report(rows);
  write_json(dir / "report.json", j);
  write_text(dir / "report.txt", text);
  std::fputs(text.c_str(), stdout);
  return 0;
}

}  // namespace saliprune
