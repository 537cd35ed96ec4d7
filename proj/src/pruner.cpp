#include "saliprune/pruner.hpp"

#include <algorithm>
#include <cmath>

#include "saliprune/error.hpp"
#include "saliprune/optim.hpp"

namespace saliprune {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

GateSet GateSet::open(const std::vector<GateGroup>& groups, double b, double tau) {
  GateSet g;
  g.b = b;
  g.tau = tau;
  for (const auto& grp : groups) g.logits.emplace_back(std::vector<int>{grp.size});
  g.validate();
  return g;
}

void GateSet::validate() const {
  if (!(tau > 0)) throw InvalidParameter("gate temperature tau must be positive");
  for (const auto& t : logits) {
    if (t.rank() != 1 || t.numel() == 0) throw ShapeMismatch("gate logits must be non-empty vectors");
  }
}

ArchVector gates_forward(const GateSet& g, const std::vector<std::vector<double>>& noise) {
  g.validate();
  if (noise.size() != g.logits.size()) throw ShapeMismatch("one noise vector per gate group");
  ArchVector v;
  for (std::size_t k = 0; k < g.logits.size(); ++k) {
    if (noise[k].size() != g.logits[k].numel()) throw ShapeMismatch("gate noise length");
    std::vector<double> vals(g.logits[k].numel());
    for (std::size_t c = 0; c < vals.size(); ++c) {
      vals[c] = logistic((g.logits[k][c] + noise[k][c] + g.b) / g.tau);
    }
    v.values.push_back(std::move(vals));
  }
  return v;
}

ArchVector hard_gates(const GateSet& g) {
  g.validate();
  ArchVector v;
  v.hard = true;
  for (const auto& t : g.logits) {
    std::vector<double> vals(t.numel());
    for (std::size_t c = 0; c < vals.size(); ++c) vals[c] = t[c] + g.b > 0 ? 1.0 : 0.0;
    v.values.push_back(std::move(vals));
  }
  return v;
}

ArchVector gates_forward(const GateSet& g, Rng& rng, bool hard) {
  if (hard) return hard_gates(g);
  std::vector<std::vector<double>> noise;
  for (const auto& t : g.logits) {
    std::vector<double> n(t.numel());
    for (double& x : n) x = rng.gumbel();
    noise.push_back(std::move(n));
  }
  return gates_forward(g, noise);
}

Tensor gate_features(const Tensor& features, std::span<const double> v) {
  const int axis = features.rank() == 3 ? 0 : features.rank() == 4 ? 1 : -1;
  if (axis < 0) throw ShapeMismatch("gate_features expects a [C,H,W] or [N,C,H,W] map");
  const int channels = features.dim(axis);
  if (static_cast<int>(v.size()) != channels) {
    throw ShapeMismatch("gate vector length " + std::to_string(v.size()) + " vs " +
                        std::to_string(channels) + " channels");
  }
  const std::size_t plane = static_cast<std::size_t>(features.dim(-2)) * features.dim(-1);
  const int batches = axis == 0 ? 1 : features.dim(0);
  Tensor out = features;
  for (int n = 0; n < batches; ++n) {
    for (int c = 0; c < channels; ++c) {
      Real* p = out.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<Real>(p[i] * v[c]);
    }
  }
  return out;
}

double current_flops(const ArchVector& v, const FlopsModel& fm) { return fm.current(v); }

Var current_flops(std::span<const Var> v, const FlopsModel& fm) {
  if (v.size() != fm.groups().size()) throw ShapeMismatch("one gate vector per gate group");
  std::vector<Var> sums;
  for (const Var& g : v) sums.push_back(ops::sum(g));
  Var total;
  for (const auto& l : fm.layers()) {
    if (!l.prunable()) continue;
    const double base = static_cast<double>(flops_of_layer(l, l.c_in, l.c_out));
    Var term;
    if (l.kind == LayerKind::depthwise) {
      term = ops::scale(sums[l.out_gate], static_cast<Real>(base / l.c_out));
    } else if (l.in_gate >= 0 && l.out_gate >= 0) {
      term = ops::scale(ops::mul(sums[l.in_gate], sums[l.out_gate]),
                        static_cast<Real>(base / (static_cast<double>(l.c_in) * l.c_out)));
    } else if (l.in_gate >= 0) {
      term = ops::scale(sums[l.in_gate], static_cast<Real>(base / l.c_in));
    } else {
      term = ops::scale(sums[l.out_gate], static_cast<Real>(base / l.c_out));
    }
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total.defined() ? total : Var(Tensor::scalar(0));
}

double resource_loss(double t_current, double t_target) {
  if (!(t_target > 0)) throw InvalidParameter("resource target must be positive");
  return std::log(std::max(t_current, t_target) / t_target);
}

Var resource_loss(const Var& t_current, double t_target) {
  if (!(t_target > 0)) throw InvalidParameter("resource target must be positive");
  if (t_current.value()[0] <= t_target) return Var(Tensor::scalar(0));
  return ops::add_scalar(ops::log_clamped(t_current, static_cast<Real>(t_target)),
                         static_cast<Real>(-std::log(t_target)));
}

double interpretation_loss(const rbf::RbfParams& c_x, const rbf::RbfParams& p) {
  const double dz = c_x.c_z - p.c_z, dt = c_x.c_t - p.c_t, ds = c_x.sigma - p.sigma;
  return dz * dz + dt * dt + ds * ds;
}

std::vector<PruningPair> make_pruning_pairs(ClassifierNet& classifier, SelectorNet& selector,
                                            const Dataset& data, std::span<const int> ids) {
  const auto ex = explain(classifier, selector, data, ids);
  std::vector<PruningPair> pairs;
  for (std::size_t i = 0; i < ids.size(); ++i) pairs.push_back({ids[i], ex[i].label, ex[i].params});
  return pairs;
}

void PruneConfig::validate() const {
  if (!(gamma1 >= 0) || !(gamma2 >= 0)) throw ConfigError("gamma1 and gamma2 must be >= 0");
  if (!(target > 0) || target > 1) throw ConfigError("target FLOPs rate must lie in (0, 1]");
  if (!(classification_weight >= 0)) throw ConfigError("classification weight must be >= 0");
  if (epochs < 0 || batch_size < 1) throw ConfigError("bad pruning epochs or batch size");
  if (!(lr > 0)) throw ConfigError("gate learning rate must be positive");
  if (!(tau > 0)) throw ConfigError("gate temperature must be positive");
}

void to_json(nlohmann::json& j, const PruneConfig& c) {
  j = {{"gamma1", c.gamma1},         {"gamma2", c.gamma2},
       {"target", c.target},         {"classification_weight", c.classification_weight},
       {"epochs", c.epochs},         {"batch_size", c.batch_size},
       {"lr", c.lr},                 {"b", c.b},
       {"tau", c.tau},               {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PruneConfig& c) {
  const PruneConfig d;
  c.gamma1 = j.value("gamma1", d.gamma1);
  c.gamma2 = j.value("gamma2", d.gamma2);
  c.target = j.value("target", d.target);
  c.classification_weight = j.value("classification_weight", d.classification_weight);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.b = j.value("b", d.b);
  c.tau = j.value("tau", d.tau);
  c.seed = j.value("seed", d.seed);
}

PruneLossTerms prune_loss(ClassifierNet& classifier, SelectorNet& selector, const Tensor& x,
                          std::span<const int> labels, std::span<const int> cond, const Tensor& target,
                          std::span<const Var> theta, std::span<const Tensor> noise, const FlopsModel& fm,
                          const PruneConfig& config) {
  if (noise.size() != theta.size()) throw ShapeMismatch("one noise tensor per gate group expected");
  std::vector<Var> v;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    v.push_back(ops::sigmoid(ops::scale(
        ops::add_scalar(ops::add(theta[k], Var(noise[k])), static_cast<Real>(config.b)),
        static_cast<Real>(1.0 / config.tau))));
  }
  auto r = classifier.forward(Var(x), false, v);
  Var ce = ops::cross_entropy(r.logits, labels);
  Var pred = selector.decode(r.scales, cond, false);
  Var interp = ops::mean(ops::sum_per_sample(ops::square(ops::sub(pred, Var(target)))));
  Var rate = ops::scale(current_flops(v, fm), static_cast<Real>(1.0 / static_cast<double>(fm.total_prunable())));
  Var res = resource_loss(rate, config.target);
  PruneLossTerms t;
  t.total = ops::add(ops::add(ops::scale(ce, static_cast<Real>(config.classification_weight)),
                              ops::scale(interp, static_cast<Real>(config.gamma1))),
                     ops::scale(res, static_cast<Real>(config.gamma2)));
  t.classification = ce.value()[0];
  t.interpretation = interp.value()[0];
  t.resource = res.value()[0];
  t.flops_rate = rate.value()[0];
  return t;
}

PruneResult prune(ClassifierNet& classifier, SelectorNet& selector, const Dataset& data,
                  std::span<const PruningPair> pairs, const FlopsModel& fm,
                  const PruneConfig& config) {
  config.validate();
  if (pairs.empty()) throw InvalidParameter("pruning needs at least one pruning pair");
  if (selector.head() != SelectorHead::rbf) throw InvalidParameter("pruning needs the RBF selector");
  const std::string classifier_sum = classifier.checksum();
  const std::string selector_sum = selector.checksum();
  classifier.set_trainable(false);
  selector.set_trainable(false);

  GateSet gates = GateSet::open(fm.groups(), config.b, config.tau);
  std::vector<Var> theta;
  for (const Tensor& t : gates.logits) theta.emplace_back(t, true);
  Adam opt(theta, {config.lr, 0.9, 0.999, 1e-8, 0.0});
  Rng order_rng = Rng(config.seed).substream(0x0D5);
  Rng noise_rng = Rng(config.seed).substream(0x6A7E);
  const double t_all = static_cast<double>(fm.total_prunable());
  std::vector<int> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  PruneResult result;
  int step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      std::swap(order[i], order[order_rng.below(static_cast<std::uint64_t>(i) + 1)]);
    }
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min<std::size_t>(config.batch_size, order.size() - start);
      std::vector<int> ids, labels, cond;
      Tensor target({static_cast<int>(len), 3});
      for (std::size_t k = 0; k < len; ++k) {
        const PruningPair& p = pairs[order[start + k]];
        ids.push_back(p.id);
        labels.push_back(data.labels[p.id]);
        cond.push_back(p.label);
        target[k * 3] = static_cast<Real>(p.c_x.c_z);
        target[k * 3 + 1] = static_cast<Real>(p.c_x.c_t);
        target[k * 3 + 2] = static_cast<Real>(p.c_x.sigma);
      }
      std::vector<Tensor> noise;
      for (const Var& t : theta) {
        Tensor g = Tensor::zeros_like(t.value());
        for (Real& x : g.values()) x = static_cast<Real>(noise_rng.gumbel());
        noise.push_back(std::move(g));
      }
      auto terms = prune_loss(classifier, selector, data.batch(ids), labels, cond, target, theta, noise, fm, config);
      Var& total = terms.total;
      const double loss = total.value()[0];
      if (!std::isfinite(loss)) throw NumericError("pruning loss became non-finite");
      opt.zero_grad();
      backward(total);
      opt.step();
      result.trace.push_back({epoch, step++, terms.classification, terms.interpretation, terms.resource,
                              terms.flops_rate, loss});
    }
  }
  for (std::size_t k = 0; k < theta.size(); ++k) gates.logits[k] = theta[k].value();

  if (classifier.checksum() != classifier_sum || selector.checksum() != selector_sum) {
    throw NumericError("frozen classifier or selector parameters changed during pruning");
  }
  result.hard_flops_rate = fm.current(hard_gates(gates)) / t_all;
  result.hard_resource_loss = resource_loss(result.hard_flops_rate, config.target);
  result.gates = std::move(gates);
  return result;
}

namespace {

std::vector<int> kept_channels(const Tensor& logits, double b) {
  std::vector<int> keep;
  for (std::size_t c = 0; c < logits.numel(); ++c) {
    if (logits[c] + b > 0) keep.push_back(static_cast<int>(c));
  }
  if (keep.empty()) {
    keep.push_back(static_cast<int>(std::max_element(logits.values().begin(), logits.values().end()) -
                                    logits.values().begin()));
  }
  return keep;
}

/// Keeps entries `keep` along `axis` (0 or 1) of a tensor.
Tensor slice_axis(const Tensor& t, int axis, const std::vector<int>& keep) {
  std::vector<int> shape = t.shape();
  const int outer = axis == 0 ? 1 : shape[0];
  const int dim = shape[axis];
  std::size_t inner = 1;
  for (std::size_t k = axis + 1; k < shape.size(); ++k) inner *= shape[k];
  shape[axis] = static_cast<int>(keep.size());
  Tensor out(shape);
  std::size_t pos = 0;
  for (int o = 0; o < outer; ++o) {
    for (int c : keep) {
      const Real* src = t.data() + (static_cast<std::size_t>(o) * dim + c) * inner;
      std::copy(src, src + inner, out.data() + pos);
      pos += inner;
    }
  }
  return out;
}

}  // namespace

ArchVector export_gates(const GateSet& gates) {
  gates.validate();
  ArchVector v;
  v.hard = true;
  for (const auto& t : gates.logits) {
    std::vector<double> vals(t.numel(), 0.0);
    for (int c : kept_channels(t, gates.b)) vals[c] = 1.0;
    v.values.push_back(std::move(vals));
  }
  return v;
}

ExportedNetwork export_subnetwork(const ClassifierSpec& spec, const WeightSet& weights,
                                  const GateSet& gates) {
  spec.validate();
  gates.validate();
  const auto groups = gate_groups(spec);
  if (gates.logits.size() != groups.size()) throw ShapeMismatch("gate set does not match the spec");
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (static_cast<int>(gates.logits[k].numel()) != groups[k].size) {
      throw ShapeMismatch("gate group " + groups[k].id + " length mismatch");
    }
  }
  // Validate the weights against the spec before slicing.
  ClassifierNet check(spec, weights);

  ExportedNetwork out;
  out.spec = spec;
  out.spec.hidden.clear();
  out.weights = weights;
  auto take = [&](const std::string& name) -> Tensor& {
    auto it = out.weights.find(name);
    if (it == out.weights.end()) throw ShapeMismatch("weights lack " + name);
    return it->second;
  };
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto keep = kept_channels(gates.logits[k], gates.b);
    out.kept.push_back(keep);
    out.spec.hidden.push_back(static_cast<int>(keep.size()));
    const std::string p = "block" + std::to_string(k) + ".";
    Tensor& w1 = take(p + "conv1.weight");
    w1 = slice_axis(w1, 0, keep);
    std::vector<std::string> per_channel = {"bn1"};
    if (spec.arch == Arch::depthwise_separable) {
      Tensor& dw = take(p + "dw.weight");
      dw = slice_axis(dw, 0, keep);
      per_channel.push_back("bn_mid");
    }
    for (const auto& bn : per_channel) {
      for (const char* field : {".gamma", ".beta", ".running_mean", ".running_var"}) {
        Tensor& t = take(p + bn + field);
        t = slice_axis(t, 0, keep);
      }
    }
    Tensor& w2 = take(p + "conv2.weight");
    w2 = slice_axis(w2, 1, keep);
  }
  return out;
}

FinetuneResult finetune(ClassifierNet& exported, const Dataset& data,
                        const ClassifierTrainConfig& config, double baseline_accuracy) {
  FinetuneResult r;
  r.training = train_classifier(exported, data, config);
  const auto test = data.indices(SplitTag::test);
  r.test_accuracy = evaluate(exported, data, test);
  r.baseline_accuracy = baseline_accuracy;
  r.delta_accuracy = r.test_accuracy - baseline_accuracy;
  return r;
}

}  // namespace saliprune
