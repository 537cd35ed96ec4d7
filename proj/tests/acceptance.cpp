// Acceptance runner: one PASS/FAIL line per criterion.
//
//   saliprune_acceptance [--work DIR] [--config FILE] [setup | 1..10 | all]...
//
// `setup` trains the shared desk models (classifier, predictor, selector and
// the per-pixel baseline) once; criteria 6-9 read them from DIR/base.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "saliprune/aem.hpp"
#include "saliprune/cli_runner.hpp"
#include "saliprune/error.hpp"
#include "saliprune/io.hpp"
#include "saliprune/ops.hpp"
#include "saliprune/pruner.hpp"
#include "saliprune/rbf_mask.hpp"

using namespace saliprune;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  RunConfig desk;  // as loaded; run_dir is replaced per run
  std::vector<fs::path> gradient_suites;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double sample_variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / (v.size() - 1);
}

std::string join(const std::vector<double>& v, const char* f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + fmt(f, v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// 1. Closed-form examples

struct ClosedForms {
  int checked = 0;
  std::vector<std::string> failures;

  void near(const std::string& name, double got, double want, double tol = 1e-6) {
    ++checked;
    if (!(std::abs(got - want) <= tol)) failures.push_back(name + " got " + fmt("%.9g", got) + " want " + fmt("%.9g", want));
  }
  void is(const std::string& name, bool ok) {
    ++checked;
    if (!ok) failures.push_back(name);
  }
  template <typename F>
  void throws(const std::string& name, F&& f) {
    ++checked;
    try {
      f();
    } catch (const std::exception&) {
      return;
    }
    failures.push_back(name + " did not throw");
  }
};

rbf::Grid grid(int h, int w, std::vector<double> v) { return rbf::Grid(h, w, std::move(v)); }

Verdict criterion_1(const Context&) {
  const auto t0 = Clock::now();
  ClosedForms c;
  using rbf::RbfParams;

  c.near("rbf center", rbf::bernoulli_param({16, 16, 10}, 16, 16), 1.0);
  c.near("rbf offset 10", rbf::bernoulli_param({16, 16, 10}, 26, 16), 0.606531);
  c.near("rbf wide", rbf::bernoulli_param({16, 16, 64}, 0, 0), 0.939413);
  c.throws("rbf sigma 0", [] { rbf::bernoulli_param({16, 16, 0}, 0, 0); });

  c.near("independent 0", rbf::independent_param_grid(grid(1, 1, {0})).params(0, 0), 0.5);
  c.near("independent ln3", rbf::independent_param_grid(grid(1, 1, {std::log(3.0)})).params(0, 0), 0.75);
  c.is("independent saturates", rbf::independent_param_grid(grid(1, 1, {60})).params(0, 0) > 1 - 1e-12);

  const rbf::Grid zero_noise(1, 1, 0.0);
  c.near("gumbel 0.5", rbf::gumbel_sigmoid_mask({grid(1, 1, {0.5})}, zero_noise, 1.0).values(0, 0), 0.333333);
  c.near("gumbel 1.0", rbf::gumbel_sigmoid_mask({grid(1, 1, {1.0})}, zero_noise, 0.37).values(0, 0), 0.5);
  c.near("gumbel 0.9 cold", rbf::gumbel_sigmoid_mask({grid(1, 1, {0.9})}, zero_noise, 1e-4).values(0, 0), 0.0);
  c.throws("gumbel tau 0", [&] { rbf::gumbel_sigmoid_mask({grid(1, 1, {0.5})}, zero_noise, 0.0); });

  const rbf::Mask hard = rbf::harden_mask({grid(1, 3, {0.6, 0.5, 0.0})});
  c.is("harden", hard.values.values() == std::vector<double>{1, 0, 0});

  const Tensor x({2, 2}, {3, 5, 7, 9});
  const Tensor masked = rbf::apply_mask(x, {grid(2, 2, {1, 0, 0, 1})});
  c.is("apply mask", masked[0] == 3 && masked[1] == 0 && masked[2] == 0 && masked[3] == 9);
  const Tensor halved = rbf::apply_mask(x, {grid(2, 2, {0.5, 0.5, 0.5, 0.5}), rbf::MaskKind::soft});
  c.near("soft mask halves", halved[3], 4.5);

  c.near("center 0", rbf::center_nonlinearity(0, 14, 16), 16);
  c.near("center 14", rbf::center_nonlinearity(14, 14, 16), 14 * std::tanh(1.0) + 16, 1e-12);
  c.near("center saturates", rbf::center_nonlinearity(1e4, 14, 16), 30);
  c.near("softplus 0", rbf::sigma_nonlinearity(0), 0.693147);
  c.is("softplus -40 positive", rbf::sigma_nonlinearity(-40) > 0 && rbf::sigma_nonlinearity(-40) < 1e-15);
  c.near("softplus 40", rbf::sigma_nonlinearity(40), 40);

  c.near("l0 hard", rbf::mask_l0({grid(2, 2, {1, 0, 0, 1})}), 2);
  c.near("l0 soft", rbf::mask_l0({rbf::Grid(4, 4, 0.25), rbf::MaskKind::soft}), 4);
  c.near("smoothness constant", rbf::mask_smoothness(rbf::Grid(3, 3, 1.0)), 0);
  c.near("smoothness checkerboard", rbf::mask_smoothness(grid(2, 2, {1, 0, 0, 1})), 4);
  c.near("smoothness row", rbf::mask_smoothness(grid(1, 3, {1, 0, 1})), 2);

  c.near("kl self", kl_divergence({0.7, 0.3}, {0.7, 0.3}), 0);
  c.near("kl ln2", kl_divergence({1, 0}, {0.5, 0.5}), 0.693147);
  c.near("kl 0.5/0.9", kl_divergence({0.5, 0.5}, {0.9, 0.1}), 0.510826);
  c.near("predictor loss", predictor_loss({1, 0}, {0.5, 0.5}), 0.693147);

  {
    NoGradGuard guard;
    const std::vector<int> label{0};
    const Var fx(Tensor({1, 2, 1, 1}, {1, 0}));
    const Tensor z = ops::feature_filter(fx, Var(Tensor({1, 2}, {0, 0})), label).value();
    c.near("feature filter", z[0], 0.5);
    c.near("feature filter zero", z[1], 0.0);
  }

  c.near("conv flops", static_cast<double>(flops_of_layer({"c", LayerKind::conv, 3, 4, 8, 1, 16, 16}, 4, 8)), 73728, 0);
  c.near("conv flops idle", static_cast<double>(flops_of_layer({"c", LayerKind::conv, 3, 4, 8, 1, 16, 16}, 0, 8)), 0, 0);
  c.near("depthwise flops", static_cast<double>(flops_of_layer({"d", LayerKind::depthwise, 3, 8, 8, 1, 8, 8}, 8, 8)), 4608, 0);

  auto one_gate = [](double theta) {
    GateSet g;
    g.logits.push_back(Tensor({1}, static_cast<Real>(theta)));
    return g;
  };
  const std::vector<std::vector<double>> no_noise{{0.0}};
  c.near("gate open", gates_forward(one_gate(0), no_noise).values[0][0], 0.999447);
  c.near("gate half", gates_forward(one_gate(-3), no_noise).values[0][0], 0.5);
  c.near("gate hard closed", hard_gates(one_gate(-4)).values[0][0], 0);
  {
    const Tensor f({2, 1, 2}, {3, 4, 6, 8});
    const std::vector<double> v{1, 0.5};
    const Tensor g = gate_features(f, v);
    c.near("gate features kept", std::hypot(double(g[0]), double(g[1])), 5);
    c.near("gate features halved", std::hypot(double(g[2]), double(g[3])), 5);
  }
  c.near("resource below", resource_loss(400, 500), 0);
  c.near("resource ln2", resource_loss(2000, 1000), 0.693147);
  c.near("resource equal", resource_loss(1000, 1000), 0);
  c.throws("resource target 0", [] { resource_loss(1, 0); });
  c.near("interpretation 4", interpretation_loss({16, 16, 10}, {18, 16, 10}), 4);
  c.near("interpretation 25", interpretation_loss({16, 16, 10}, {16, 13, 14}), 25);

  {
    Dataset d;
    d.channels = d.height = d.width = 1;
    d.labels.assign(100, 0);
    d.images.assign(100, 0.0f);
    d.tags.assign(100, SplitTag::train);
    const double ratios[] = {0.9, 0.1};
    split(d, ratios, 1);
    c.is("split 90/10", d.indices(SplitTag::train).size() == 90 && d.indices(SplitTag::val).size() == 10);
  }

  c.near("sigma bias 32", sigma_bias_for(32), 10);
  c.near("sigma bias 224", sigma_bias_for(224), 80);

  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = c.failures.empty() && secs < 60;
  v.detail = std::to_string(c.checked - static_cast<int>(c.failures.size())) + "/" + std::to_string(c.checked) +
             " closed forms, " + fmt("%.1f s", secs);
  for (const auto& f : c.failures) v.detail += "; " + f;
  return v;
}

// ---------------------------------------------------------------------------
// 2. Finite-difference suite (double-precision build)

Verdict criterion_2(const Context& ctx) {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (const auto& suite : ctx.gradient_suites) {
    const std::string cmd = "\"" + suite.string() + "\" --minimal";
    const int status = std::system(cmd.c_str());
    ok = ok && status == 0;
    detail += suite.filename().string() + (status == 0 ? " ok, " : " FAILED, ");
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 300, detail + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------------------
// 3. Sampling

Verdict criterion_3(const Context&) {
  const auto t0 = Clock::now();
  constexpr int kDraws = 10000;
  Rng rng(2024);
  double worst = 0;
  std::string rows;
  bool exceedance_ok = true;
  for (double p : {0.05, 0.1, 0.3, 0.5, 0.7, 0.9}) {
    const rbf::MaskDistribution dist{rbf::Grid(1, 1, p)};
    int above = 0;
    for (int i = 0; i < kDraws; ++i) above += rbf::sample_gumbel_sigmoid_mask(dist, 0.1, rng).values(0, 0) > 0.5;
    const double freq = static_cast<double>(above) / kDraws;
    worst = std::max(worst, std::abs(freq - p));
    exceedance_ok = exceedance_ok && std::abs(freq - p) <= 0.02;
    rows += " p=" + fmt("%.2f", p) + ":" + fmt("%.4f", freq);
  }
  GateSet g;
  g.logits.push_back(Tensor({1}, Real(0)));
  std::vector<double> soft(kDraws);
  for (double& s : soft) s = gates_forward(g, rng, false).values[0][0];
  std::nth_element(soft.begin(), soft.begin() + kDraws / 2, soft.end());
  const double median = soft[kDraws / 2];
  const bool gate_ok = median > 0.99;
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = exceedance_ok && gate_ok && secs < 120;
  v.detail = "exceedance" + rows + " (max dev " + fmt("%.4f", worst) + (exceedance_ok ? ", ok" : ", over 0.02") +
             "); gate median " + fmt("%.6f", median) + (gate_ok ? " ok" : " low") + ", " + fmt("%.1f s", secs);
  return v;
}

// ---------------------------------------------------------------------------
// 4. Export equivalence

WeightSet randomized_weights(const ClassifierSpec& spec, Rng& rng) {
  WeightSet w = build_classifier(spec, rng);
  // Non-trivial normalization statistics so channel slicing is exercised.
  for (auto& [name, t] : w) {
    const bool var = name.ends_with("running_var");
    if (t.rank() != 1) continue;
    for (Real& x : t.values()) {
      x = var ? static_cast<Real>(rng.uniform(0.5, 2.0)) : static_cast<Real>(x + 0.2 * rng.normal());
    }
  }
  return w;
}

Verdict criterion_4(const Context&) {
  const auto t0 = Clock::now();
  const ClassifierSpec spec = residual_desk_spec();
  Rng rng(404);
  const WeightSet w = randomized_weights(spec, rng);
  ClassifierNet full(spec, w);
  Tensor x({100, spec.in_channels, spec.input_size, spec.input_size});
  for (Real& v : x.values()) v = static_cast<Real>(rng.normal());
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    GateSet g = GateSet::open(gate_groups(spec));
    const double centre = rng.uniform(-4.5, -1.5);
    for (Tensor& t : g.logits) {
      for (Real& v : t.values()) v = static_cast<Real>(centre + 1.5 * rng.normal());
    }
    const auto e = export_subnetwork(spec, w, g);
    ClassifierNet small(e.spec, e.weights);
    NoGradGuard guard;
    const Tensor a = full.forward(Var(x), false, gate_vars(export_gates(g))).logits.value();
    const Tensor b = small.forward(Var(x), false).logits.value();
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-5 && secs < 300, "max |logit diff| " + fmt("%.3g", worst) + " over 10 gate sets x 100 inputs, " +
                                           fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------------------
// 5. FLOPs recount

// Counts multiply-accumulates one kernel tap at a time.
std::int64_t brute_force_flops(const std::vector<LayerRecord>& layers, const std::vector<int>& active) {
  std::int64_t total = 0;
  for (const auto& l : layers) {
    if (!l.prunable()) continue;
    const int cin = l.in_gate >= 0 ? active[l.in_gate] : l.c_in;
    const int cout = l.out_gate >= 0 ? active[l.out_gate] : l.c_out;
    const int taps = l.kernel * l.kernel;
    for (int oy = 0; oy < l.out_h; ++oy) {
      for (int ox = 0; ox < l.out_w; ++ox) {
        if (l.kind == LayerKind::depthwise) {
          for (int ch = 0; ch < cout; ++ch) {
            for (int t = 0; t < taps; ++t) ++total;
          }
          continue;
        }
        for (int co = 0; co < cout; ++co) {
          for (int ci = 0; ci < cin; ++ci) {
            for (int t = 0; t < taps; ++t) ++total;
          }
        }
      }
    }
  }
  return total;
}

Verdict criterion_5(const Context&) {
  const auto t0 = Clock::now();
  Rng rng(505);
  int matched = 0, trials = 0;
  for (const char* name : {"resnet-desk", "mobile-desk"}) {
    const ClassifierSpec spec = spec_preset(name);
    const FlopsModel fm(spec);
    const auto layers = layer_records(spec);
    for (int trial = 0; trial < 100; ++trial) {
      ArchVector v;
      v.hard = true;
      std::vector<int> active;
      for (const auto& g : fm.groups()) {
        const double keep = rng.uniform();
        std::vector<double> vals(g.size);
        int n = 0;
        for (double& x : vals) n += (x = rng.uniform() < keep ? 1.0 : 0.0) > 0;
        v.values.push_back(vals);
        active.push_back(n);
      }
      ++trials;
      matched += current_flops(v, fm) == static_cast<double>(brute_force_flops(layers, active));
    }
  }
  const double secs = seconds_since(t0);
  return {matched == trials && secs < 60,
          std::to_string(matched) + "/" + std::to_string(trials) + " exact matches, " + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------------------
// Shared desk runs

RunConfig in_dir(const Context& ctx, const fs::path& dir) {
  RunConfig c = ctx.desk;
  c.run_dir = dir;
  c.verbose = false;
  return c;
}

fs::path base_dir(const Context& ctx) { return ctx.work / "base"; }

bool matches_marker(const fs::path& marker, const json& expected) {
  if (!fs::exists(marker)) return false;
  try {
    return read_json(marker) == expected;
  } catch (const Error&) {
    return false;
  }
}

Verdict setup(const Context& ctx) {
  const auto t0 = Clock::now();
  const fs::path dir = base_dir(ctx);
  const RunConfig c = in_dir(ctx, dir);
  json key = c;
  key.erase("run_dir");
  const fs::path marker = dir / "acceptance_setup.json";
  if (matches_marker(marker, key)) return {true, "reused " + dir.string()};
  fs::remove_all(dir);
  fs::create_directories(dir);
  cmd_train_classifier(c);
  cmd_train_predictor(c);
  cmd_train_selector(c);
  cmd_train_predictor(c, true);
  cmd_train_selector(c, true);
  write_json(marker, key);
  return {true, "trained desk models in " + fmt("%.0f s", seconds_since(t0))};
}

json require_summary(const fs::path& path) {
  if (!fs::exists(path)) throw PrerequisiteError(path.string() + " is missing; run the setup target first");
  return read_json(path);
}

// One pruning run over the shared classifier and selector. The dataset seed
// stays at the base run's seed; `seed` drives the gate noise and batching.
struct PruneSettings {
  std::uint64_t seed = 1;
  double gamma1 = 0.5;
  double gamma2 = 2.0;
  double classification_weight = 1.0;
};

json prune_run(const Context& ctx, const PruneSettings& s) {
  std::ostringstream name;
  name << "s" << s.seed << "_g1_" << s.gamma1 << "_g2_" << s.gamma2 << "_w" << s.classification_weight;
  const fs::path dir = ctx.work / "prune" / name.str();
  RunConfig c = in_dir(ctx, dir);
  c.dataset.seed = ctx.desk.dataset.seed.value_or(ctx.desk.seed);
  c.seed = s.seed;
  c.prune.gamma1 = s.gamma1;
  c.prune.gamma2 = s.gamma2;
  c.prune.classification_weight = s.classification_weight;

  const json base_sum = require_summary(base_dir(ctx) / "selector_summary.json");
  json key = c;
  key.erase("run_dir");
  key["selector_sha256"] = base_sum.at("weights_sha256");
  const fs::path marker = dir / "acceptance_prune.json";
  if (!matches_marker(marker, key)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    fs::copy_file(base_dir(ctx) / artifact::classifier, dir / artifact::classifier);
    fs::copy_file(base_dir(ctx) / artifact::selector, dir / artifact::selector);
    cmd_prune(c);
    write_json(marker, key);
  }
  return read_json(dir / "prune_summary.json");
}

const std::uint64_t kSeeds[] = {1, 2, 3};

std::vector<json> prune_seeds(const Context& ctx, PruneSettings s) {
  std::vector<json> out;
  for (std::uint64_t seed : kSeeds) {
    s.seed = seed;
    out.push_back(prune_run(ctx, s));
  }
  return out;
}

std::vector<double> field(const std::vector<json>& runs, const char* key) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.at(key).get<double>());
  return v;
}

// ---------------------------------------------------------------------------
// 6. AEM desk experiment

Verdict criterion_6(const Context& ctx) {
  const json rbf = require_summary(base_dir(ctx) / "selector_summary.json");
  const json realx = require_summary(base_dir(ctx) / "realx_selector_summary.json");
  const double in_box = rbf.at("val_center_in_box");
  const double s_rbf = rbf.at("val_hard_smoothness_per_pixel");
  const double s_realx = realx.at("val_hard_smoothness_per_pixel");
  return {in_box >= 0.8 && s_realx > s_rbf, "centers in box " + fmt("%.4f", in_box) + " (>= 0.8); hard smoothness " +
                                               "per pixel: per-pixel baseline " + fmt("%.5f", s_realx) + " vs RBF " +
                                               fmt("%.5f", s_rbf)};
}

// ---------------------------------------------------------------------------
// 7. Pruning trends

Verdict criterion_7(const Context& ctx) {
  const auto t0 = Clock::now();
  std::vector<double> gammas2{1, 2, 4, 10}, resource;
  for (double g2 : gammas2) {
    PruneSettings s;
    s.gamma2 = g2;
    resource.push_back(mean(field(prune_seeds(ctx, s), "final_epoch_resource_loss")));
  }
  bool sweep_ok = true;
  for (std::size_t i = 0; i < gammas2.size(); ++i) {
    if (i > 0 && resource[i] > resource[i - 1]) sweep_ok = false;
    if (gammas2[i] >= 2 && resource[i] >= 0.01) sweep_ok = false;
  }

  std::vector<double> gammas1{0.1, 0.5, 2.0}, variance;
  std::string accs;
  for (double g1 : gammas1) {
    PruneSettings s;
    s.gamma1 = g1;
    s.classification_weight = 0;
    const auto acc = field(prune_seeds(ctx, s), "hard_gated_test_accuracy");
    variance.push_back(sample_variance(acc));
    accs += " g1=" + fmt("%g", g1) + ":[" + join(acc, "%.4f") + "]";
  }
  const bool variance_ok = variance[0] > variance[1] && variance[0] > variance[2];
  Verdict v;
  v.pass = sweep_ok && variance_ok;
  v.detail = "resource loss (3-seed mean, final epoch) at gamma2 1/2/4/10: " + join(resource, "%.5f") +
             (sweep_ok ? " ok" : " not satisfied") + "; interpretation-only accuracy variance at gamma1 0.1/0.5/2: " +
             join(variance, "%.3g") + (variance_ok ? " ok" : " not satisfied") + ";" + accs + "; " +
             fmt("%.0f s", seconds_since(t0));
  return v;
}

// ---------------------------------------------------------------------------
// 8. Ablation

Verdict criterion_8(const Context& ctx) {
  const auto t0 = Clock::now();
  PruneSettings full, interp, cls;
  interp.classification_weight = 0;
  cls.gamma1 = 0;
  const auto a_full = field(prune_seeds(ctx, full), "hard_gated_test_accuracy");
  const auto a_int = field(prune_seeds(ctx, interp), "hard_gated_test_accuracy");
  const auto a_cls = field(prune_seeds(ctx, cls), "hard_gated_test_accuracy");
  const double m_full = mean(a_full), m_int = mean(a_int), m_cls = mean(a_cls);
  Verdict v;
  v.pass = m_full >= m_int && m_full >= m_cls;
  v.detail = "hard-gated test accuracy after pruning, 3-seed mean: full " + fmt("%.4f", m_full) + " [" +
             join(a_full, "%.4f") + "], interpretation-only " + fmt("%.4f", m_int) + " [" + join(a_int, "%.4f") +
             "], classification-only " + fmt("%.4f", m_cls) + " [" + join(a_cls, "%.4f") + "]; " +
             fmt("%.0f s", seconds_since(t0));
  return v;
}

// ---------------------------------------------------------------------------
// 9. End-to-end desk pipeline

Verdict criterion_9(const Context& ctx) {
  const auto t0 = Clock::now();
  const fs::path dir = ctx.work / "pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::copy_file(base_dir(ctx) / artifact::classifier, dir / artifact::classifier);
  fs::copy_file(base_dir(ctx) / artifact::selector, dir / artifact::selector);
  const RunConfig c = in_dir(ctx, dir);
  cmd_prune(c);
  cmd_export(c);
  cmd_finetune(c);
  const json fin = read_json(dir / "finetune_summary.json");
  const double rate = fin.at("flops_rate");
  const double base = fin.at("baseline_accuracy");
  const double pruned = fin.at("pruned_accuracy");
  const double target = c.prune.target;
  Verdict v;
  v.pass = std::abs(rate - target) <= 0.02 && std::abs(pruned - base) <= 0.02;
  v.detail = "exported FLOPs rate " + fmt("%.4f", rate) + " (target " + fmt("%.2f", target) + " +/- 0.02); accuracy " +
             fmt("%.4f", pruned) + " vs baseline " + fmt("%.4f", base) + "; " + fmt("%.0f s", seconds_since(t0));
  return v;
}

// ---------------------------------------------------------------------------
// 10. Determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

bool is_metrics_file(const fs::path& p) {
  const std::string name = p.filename().string();
  return p.extension() == ".jsonl" || name.ends_with("_summary.json") || name.ends_with("_summary.txt");
}

Verdict criterion_10(const Context& ctx) {
  const auto t0 = Clock::now();
  const fs::path root = ctx.work / "determinism";
  fs::remove_all(root);
  RunConfig small = in_dir(ctx, root);
  small.dataset.n = 1500;
  small.classifier.epochs = 1;
  small.aem.predictor_epochs = 1;
  small.aem.selector_epochs = 1;
  small.prune.epochs = 3;
  small.finetune.epochs = 1;
  for (const char* run : {"a", "b"}) {
    RunConfig c = small;
    c.run_dir = root / run;
    cmd_pipeline(c);
    cmd_train_predictor(c, true);
    cmd_train_selector(c, true);
  }
  int files = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    if (!is_metrics_file(e.path())) continue;
    ++files;
    const fs::path other = root / "b" / e.path().filename();
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) differ.push_back(e.path().filename().string());
  }
  Verdict v;
  v.pass = files > 0 && differ.empty();
  v.detail = std::to_string(files - static_cast<int>(differ.size())) + "/" + std::to_string(files) +
             " metrics files byte-identical across two seeded runs; " + fmt("%.0f s", seconds_since(t0));
  for (const auto& d : differ) v.detail += "; differs: " + d;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria runner"};
  std::string work = SALIPRUNE_ACCEPTANCE_DIR;
  std::string config = std::string(SALIPRUNE_SOURCE_DIR) + "/configs/desk.json";
  std::vector<std::string> targets;
  app.add_option("--work", work, "working directory for trained artifacts");
  app.add_option("--config", config, "desk run configuration");
  app.add_option("targets", targets, "setup, 1..10 or all")->default_val(std::vector<std::string>{"all"});
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.work = work;
  ctx.gradient_suites = {SALIPRUNE_OP_GRADIENTS, SALIPRUNE_AEM_GRADIENTS};
  try {
    ctx.desk = load_run_config(config);
    ctx.desk.validate();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  }
  fs::create_directories(ctx.work);

  const std::map<std::string, std::function<Verdict(const Context&)>> criteria = {
      {"1", criterion_1}, {"2", criterion_2}, {"3", criterion_3}, {"4", criterion_4},
      {"5", criterion_5}, {"6", criterion_6}, {"7", criterion_7}, {"8", criterion_8},
      {"9", criterion_9}, {"10", criterion_10}};
  std::vector<std::string> order;
  for (const auto& t : targets) {
    if (t == "all") {
      order.push_back("setup");
      for (int i = 1; i <= 10; ++i) order.push_back(std::to_string(i));
    } else if (t == "setup" || criteria.count(t)) {
      order.push_back(t);
    } else {
      std::fprintf(stderr, "error: unknown target '%s'\n", t.c_str());
      return 2;
    }
  }

  bool all_pass = true;
  for (const auto& t : order) {
    Verdict v;
    try {
      v = t == "setup" ? setup(ctx) : criteria.at(t)(ctx);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    all_pass = all_pass && v.pass;
    const std::string label = t == "setup" ? "setup" : "criterion " + t;
    std::printf("%-12s %s  %s\n", label.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
