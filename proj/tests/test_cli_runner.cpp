#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "saliprune/cli_runner.hpp"
#include "saliprune/error.hpp"
#include "saliprune/io.hpp"

using namespace saliprune;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("saliprune_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig tiny_config(const fs::path& dir) {
  RunConfig c;
  c.run_dir = dir;
  c.dataset.n = 200;
  c.dataset.classes = 4;
  c.seed = 3;
  c.verbose = false;
  c.classifier.epochs = 1;
  c.classifier.batch_size = 32;
  c.aem.predictor_epochs = 1;
  c.aem.selector_epochs = 1;
  c.prune.epochs = 2;
  c.prune.batch_size = 5;
  c.prune.lr = 0.2;
  c.finetune.epochs = 1;
  c.finetune.batch_size = 32;
  return c;
}

template <typename F>
int exit_status(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    return e.exit_code();
  }
}

template <typename F>
std::string error_text(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("checkpoint container round trip") {
  const fs::path dir = scratch_dir("ckpt");
  Checkpoint c;
  c.kind = "classifier";
  c.meta = {{"seed", 7}, {"note", "x"}};
  c.tensors["a"] = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
  c.tensors["b.weight"] = Tensor({1}, {static_cast<Real>(0.1)});
  save_checkpoint(dir / "c.ckpt", c);
  const Checkpoint back = load_checkpoint(dir / "c.ckpt");
  CHECK(back.kind == "classifier");
  CHECK(back.meta == c.meta);
  CHECK(checksum(back.tensors) == checksum(c.tensors));
  CHECK_FALSE(fs::exists(dir / "c.ckpt.tmp"));

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), PrerequisiteError);
  {
    std::ofstream out(dir / "junk.ckpt", std::ios::binary);
    out << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), IoError);
  std::string bytes = slurp(dir / "c.ckpt");
  bytes.resize(bytes.size() - 8);
  {
    std::ofstream out(dir / "short.ckpt", std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), IoError);
}

TEST_CASE("dataset container round trip") {
  const fs::path dir = scratch_dir("data");
  const Dataset d = synthetic_benchmark(60, 4, 2);
  save_dataset(dir / "d.bin", d);
  const Dataset back = load_dataset(dir / "d.bin");
  CHECK(back.fingerprint() == d.fingerprint());
  CHECK(back.boxes.size() == d.boxes.size());
  CHECK(back.prune_subset == d.prune_subset);
  CHECK(back.norm.mean == d.norm.mean);
}

TEST_CASE("png round trip") {
  const fs::path dir = scratch_dir("png");
  Image img(5, 3);
  img.set(4, 2, 10, 20, 30);
  write_png(dir / "x.png", img);
  const Image back = read_png(dir / "x.png");
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.rgb == img.rgb);
  CHECK_THROWS_AS(read_png(dir / "none.png"), IoError);
}

TEST_CASE("run configuration") {
  RunConfig c = tiny_config("r");
  json j = c;
  RunConfig back;
  from_json(j, back);
  CHECK(json(back) == j);
  CHECK_THROWS_AS(from_json(json{{"bogus", 1}}, back), ConfigError);
  CHECK_THROWS_AS(from_json(json{{"seed", "three"}}, back), ConfigError);

  // Partial sections keep the other defaults.
  RunConfig partial;
  from_json(json{{"prune", {{"gamma2", 4.0}}}}, partial);
  CHECK(partial.prune.gamma2 == 4.0);
  CHECK(partial.prune.gamma1 == PruneConfig{}.gamma1);

  // The dataset seed follows the run seed unless pinned.
  RunConfig pinned;
  from_json(json{{"dataset", {{"seed", 9}}}}, pinned);
  REQUIRE(pinned.dataset.seed.has_value());
  CHECK(*pinned.dataset.seed == 9);
  CHECK(json(pinned).at("dataset").at("seed") == 9);
  from_json(json{{"dataset", {{"seed", nullptr}}}}, pinned);
  CHECK_FALSE(pinned.dataset.seed.has_value());
  RunConfig a = tiny_config("r"), b = tiny_config("r");
  b.seed = 4;
  b.dataset.seed = 3;
  CHECK(load_run_dataset(a).fingerprint() == load_run_dataset(b).fingerprint());

  c.resolve();
  CHECK(c.prune.seed == 3);
  CHECK(c.aem.seed == 3);
  RunConfig bad = tiny_config("r");
  bad.dataset.kind = "imagenet";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config("r");
  bad.dataset.kind = "cifar10";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config("r");
  bad.prune.target = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("stage guards and the hash chain") {
  const fs::path dir = scratch_dir("chain");
  RunConfig c = tiny_config(dir);
  CHECK(exit_status([&] { return cmd_prune(c); }) == 3);
  CHECK(error_text([&] { cmd_prune(c); }).find("missing prerequisite") != std::string::npos);
  CHECK(exit_status([&] { return cmd_train_selector(c); }) == 3);

  REQUIRE(cmd_train_classifier(c) == 0);
  CHECK(exit_status([&] { return cmd_prune(c); }) == 3);  // no selector yet
  REQUIRE(cmd_train_predictor(c) == 0);
  REQUIRE(cmd_train_selector(c) == 0);
  CHECK(fs::exists(dir / "selector.ckpt"));
  CHECK(fs::exists(dir / "selector_metrics.jsonl"));
  CHECK(fs::exists(dir / "selector_summary.txt"));
  CHECK(fs::exists(dir / "train_selector.config.json"));

  // A different dataset no longer matches the classifier's fingerprint.
  RunConfig other = c;
  other.dataset.n = 220;
  CHECK(exit_status([&] { return cmd_prune(other); }) == 3);

  // Retraining the classifier breaks the link to the selector.
  RunConfig reseeded = c;
  reseeded.seed = 4;
  const std::string selector_bytes = slurp(dir / "selector.ckpt");
  REQUIRE(cmd_train_classifier(reseeded) == 0);
  const std::string msg = error_text([&] { cmd_prune(reseeded); });
  CHECK(msg.find("hash chain") != std::string::npos);
  CHECK(exit_status([&] { return cmd_prune(reseeded); }) == 3);
  CHECK(slurp(dir / "selector.ckpt") == selector_bytes);

  // Tampered weights fail the integrity check.
  REQUIRE(cmd_train_classifier(c) == 0);
  Checkpoint ck = load_checkpoint(dir / "classifier.ckpt");
  ck.tensors.begin()->second[0] += 1;
  save_checkpoint(dir / "classifier.ckpt", ck);
  CHECK(error_text([&] { cmd_train_predictor(c); }).find("integrity") != std::string::npos);
}

TEST_CASE("full pipeline, explain, report and determinism") {
  const fs::path root = scratch_dir("pipeline");
  RunConfig a = tiny_config(root / "a");
  RunConfig b = tiny_config(root / "b");
  REQUIRE(cmd_pipeline(a) == 0);
  REQUIRE(cmd_pipeline(b) == 0);
  for (const char* f : {"classifier_metrics.jsonl", "predictor_metrics.jsonl", "selector_metrics.jsonl",
                        "prune_trace.jsonl", "finetune_metrics.jsonl", "classifier_summary.json",
                        "prune_summary.json", "export_summary.json", "finetune_summary.json"}) {
    INFO(f);
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
    CHECK_FALSE(slurp(root / "a" / f).empty());
  }

  // The reported pruned-FLOPs share is recomputed from the FLOPs model.
  const Checkpoint cls = load_checkpoint(root / "a" / artifact::classifier);
  const Checkpoint gates = load_checkpoint(root / "a" / artifact::gates);
  GateSet g;
  g.b = gates.meta.at("b");
  g.tau = gates.meta.at("tau");
  for (int k = 0; k < gates.meta.at("groups").get<int>(); ++k) g.logits.push_back(gates.tensors.at("block" + std::to_string(k)));
  const FlopsModel fm(cls.meta.at("spec").get<ClassifierSpec>());
  const double expected = 100.0 * (1.0 - fm.current(export_gates(g)) / static_cast<double>(fm.total_prunable()));
  const json fin = read_json(root / "a" / "finetune_summary.json");
  CHECK(fin.at("pruned_flops_percent").get<double>() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(fin.at("delta_accuracy").get<double>() ==
        doctest::Approx(fin.at("pruned_accuracy").get<double>() - fin.at("baseline_accuracy").get<double>()));

  const std::vector<int> ids{0, 7};
  REQUIRE(cmd_explain(a, ids) == 0);
  const Image fig = read_png(root / "a" / "figures" / "explain_7.png");
  CHECK(fig.width == 4 * 32 * 4 + 5 * 4);
  CHECK(fig.height == 32 * 4 + 2 * 4);
  std::ifstream rec(root / "a" / "explain.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(rec, line)) {
    const json j = json::parse(line);
    CHECK(j.contains("c_z"));
    CHECK(j.contains("sigma"));
    ++lines;
  }
  CHECK(lines == 2);
  const std::vector<int> out_of_range{100000};
  CHECK(exit_status([&] { return cmd_explain(a, out_of_range); }) == 2);

  // One incomplete run next to the two finished ones.
  fs::create_directories(root / "c");
  fs::copy_file(root / "a" / artifact::classifier, root / "c" / artifact::classifier);
  fs::create_directories(root / "not_a_run");
  const auto rows = collect_report(root);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].run == "a");
  CHECK(rows[0].complete);
  CHECK(rows[2].run == "c");
  CHECK_FALSE(rows[2].complete);
  for (const auto& r : rows) {
    CHECK(r.pruned_flops_percent >= 0.0);
    CHECK(r.pruned_flops_percent <= 100.0);
  }
  CHECK(cmd_report(root) == 0);
  const json report = read_json(root / "report.json");
  CHECK(report.size() == 3);
  CHECK(slurp(root / "report.txt").find("INCOMPLETE") != std::string::npos);

  const fs::path empty = scratch_dir("empty");
  CHECK(cmd_report(empty) == 0);
  CHECK(read_json(empty / "report.json").empty());
  CHECK(exit_status([&] { return cmd_report(empty / "nope"); }) == 3);
}

TEST_CASE("explanation panels") {
  const rbf::RbfParams p{9.3, 20.6, 5.0};
  const auto dist = rbf::bernoulli_param_grid(p, 32, 32);
  Tensor img({3, 32, 32});
  Rng rng(1);
  for (Real& v : img.values()) v = static_cast<Real>(rng.uniform(0, 1));
  const ExplainPanels panels = explain_panels(img, dist);
  for (double v : panels.hard.values.values()) CHECK((v == 0.0 || v == 1.0));
  int best = 0;
  for (int i = 1; i < 32 * 32; ++i) {
    if (panels.dist.params.values()[i] > panels.dist.params.values()[best]) best = i;
  }
  CHECK(best / 32 == 9);
  CHECK(best % 32 == 21);
  const Tensor expected = rbf::apply_mask(img, panels.hard);
  CHECK(std::equal(expected.values().begin(), expected.values().end(), panels.masked.values().begin()));
}
