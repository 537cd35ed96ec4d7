#include "saliprune/aem.hpp"

#include <algorithm>
#include <cmath>

#include "saliprune/error.hpp"
#include "saliprune/optim.hpp"

namespace saliprune {

double kl_divergence(const ProbDist& p, const ProbDist& q) {
  if (p.size() != q.size()) {
    throw ShapeMismatch("kl_divergence: lengths " + std::to_string(p.size()) + " and " +
                        std::to_string(q.size()));
  }
  auto check = [](const ProbDist& d, const char* name) {
    double sum = 0;
    for (double v : d) {
      if (!(v >= 0)) throw InvalidParameter(std::string("kl_divergence: negative entry in ") + name);
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw InvalidParameter(std::string("kl_divergence: ") + name + " does not sum to 1");
    }
  };
  check(p, "p");
  check(q, "q");
  double kl = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0) kl += p[k] * (std::log(p[k]) - std::log(std::max(q[k], 1e-8)));
  }
  return std::max(kl, 0.0);
}

void AemConfig::validate() const {
  if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw ConfigError("lambda1 and lambda2 must be >= 0");
  if (!(tau > 0)) throw ConfigError("selector temperature tau must be positive");
  if (predictor_epochs < 0 || selector_epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (!(predictor_lr > 0) || !(selector_lr > 0)) throw ConfigError("learning rates must be positive");
}

AemConfig AemConfig::defaults_for(int input_size) {
  AemConfig c;
  if (input_size >= 224) {
    c.lambda1 = 1.0;
    c.lambda2 = 1e-4;
  }
  return c;
}

void to_json(nlohmann::json& j, const AemConfig& c) {
  j = {{"lambda1", c.lambda1},
       {"lambda2", c.lambda2},
       {"tau", c.tau},
       {"predictor_epochs", c.predictor_epochs},
       {"selector_epochs", c.selector_epochs},
       {"batch_size", c.batch_size},
       {"predictor_lr", c.predictor_lr},
       {"selector_lr", c.selector_lr},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AemConfig& c) {
  const AemConfig d;
  c.lambda1 = j.value("lambda1", d.lambda1);
  c.lambda2 = j.value("lambda2", d.lambda2);
  c.tau = j.value("tau", d.tau);
  c.predictor_epochs = j.value("predictor_epochs", d.predictor_epochs);
  c.selector_epochs = j.value("selector_epochs", d.selector_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.predictor_lr = j.value("predictor_lr", d.predictor_lr);
  c.selector_lr = j.value("selector_lr", d.selector_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
}

namespace aem_ops {

namespace {

rbf::Grid grid_of(const Tensor& t, std::size_t offset, int h, int w) {
  rbf::Grid g(h, w);
  for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] = t[offset + i];
  return g;
}

void require_masks(const Var& m, const char* op) {
  if (m.value().rank() != 4 || m.dim(1) != 1) {
    throw ShapeMismatch(std::string(op) + ": expected [N, 1, H, W], got " + m.value().shape_string());
  }
}

rbf::RbfParams params_row(const Tensor& p, int n) {
  return {p[n * 3], p[n * 3 + 1], std::max<double>(p[n * 3 + 2], rbf::kSigmaFloor)};
}

}  // namespace

Var rbf_grid(const Var& params, int height, int width) {
  if (params.value().rank() != 2 || params.dim(1) != 3) {
    throw ShapeMismatch("rbf_grid expects [N, 3] parameters, got " + params.value().shape_string());
  }
  const int n = params.dim(0);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Tensor out({n, 1, height, width});
  for (int i = 0; i < n; ++i) {
    const auto grid = rbf::bernoulli_param_grid(params_row(params.value(), i), height, width);
    for (std::size_t k = 0; k < plane; ++k) out[i * plane + k] = static_cast<Real>(grid.params.values()[k]);
  }
  return make_var(std::move(out), {params}, [n, height, width, plane](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < n; ++i) {
      const rbf::RbfParams row = params_row(p.value, i);
      const auto up = grid_of(self.grad, i * plane, height, width);
      const auto g = rbf::bernoulli_param_grid_vjp(row, up);
      p.grad[i * 3] += static_cast<Real>(g.c_z);
      p.grad[i * 3 + 1] += static_cast<Real>(g.c_t);
      // Clamped sigma passes no gradient.
      if (p.value[i * 3 + 2] >= rbf::kSigmaFloor) p.grad[i * 3 + 2] += static_cast<Real>(g.sigma);
    }
  });
}

Var gumbel_sigmoid(const Var& dist, const Tensor& noise, double tau) {
  require_masks(dist, "gumbel_sigmoid");
  if (!dist.value().same_shape(noise)) throw ShapeMismatch("gumbel_sigmoid noise shape");
  const int n = dist.dim(0), h = dist.dim(2), w = dist.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out = Tensor::zeros_like(dist.value());
  for (int i = 0; i < n; ++i) {
    const rbf::MaskDistribution d{grid_of(dist.value(), i * plane, h, w)};
    const auto m = rbf::gumbel_sigmoid_mask(d, grid_of(noise, i * plane, h, w), tau);
    for (std::size_t k = 0; k < plane; ++k) out[i * plane + k] = static_cast<Real>(m.values.values()[k]);
  }
  return make_var(std::move(out), {dist}, [noise, tau, n, h, w, plane](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < n; ++i) {
      const rbf::MaskDistribution d{grid_of(p.value, i * plane, h, w)};
      const auto g = rbf::gumbel_sigmoid_vjp(d, grid_of(noise, i * plane, h, w), tau,
                                             grid_of(self.grad, i * plane, h, w));
      for (std::size_t k = 0; k < plane; ++k) p.grad[i * plane + k] += static_cast<Real>(g.values()[k]);
    }
  });
}

Var smoothness(const Var& masks) {
  require_masks(masks, "smoothness");
  const int n = masks.dim(0), h = masks.dim(2), w = masks.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    out[i] = static_cast<Real>(rbf::mask_smoothness(grid_of(masks.value(), i * plane, h, w)));
  }
  return make_var(std::move(out), {masks}, [n, h, w, plane](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < n; ++i) {
      const auto g = rbf::mask_smoothness_gradient(grid_of(p.value, i * plane, h, w));
      for (std::size_t k = 0; k < plane; ++k) {
        p.grad[i * plane + k] += static_cast<Real>(self.grad[i] * g.values()[k]);
      }
    }
  });
}

Tensor gumbel_noise(int n, int height, int width, Rng& rng) {
  Tensor t({n, 1, height, width});
  for (Real& v : t.values()) v = static_cast<Real>(rng.gumbel());
  return t;
}

}  // namespace aem_ops

Bottleneck::Bottleneck(int in, int out, Rng& rng) {
  const int mid = std::max(out / 4, 4);
  reduce = Conv2d(in, mid, 1, 1, 0, false, rng);
  bn1 = BatchNorm2d(mid);
  conv = Conv2d(mid, mid, 3, 1, 1, false, rng);
  bn2 = BatchNorm2d(mid);
  expand = Conv2d(mid, out, 1, 1, 0, false, rng);
  bn3 = BatchNorm2d(out);
  has_projection = in != out;
  if (has_projection) {
    proj = Conv2d(in, out, 1, 1, 0, false, rng);
    proj_bn = BatchNorm2d(out);
  }
}

Var Bottleneck::forward(const Var& x, bool training) {
  Var h = ops::relu(bn1.forward(reduce.forward(x), training));
  h = ops::relu(bn2.forward(conv.forward(h), training));
  h = bn3.forward(expand.forward(h), training);
  Var shortcut = has_projection ? proj_bn.forward(proj.forward(x), training) : x;
  return ops::relu(ops::add(h, shortcut));
}

void Bottleneck::collect(const std::string& prefix, StateList& out) {
  reduce.collect(prefix + ".reduce", out);
  bn1.collect(prefix + ".bn1", out);
  conv.collect(prefix + ".conv", out);
  bn2.collect(prefix + ".bn2", out);
  expand.collect(prefix + ".expand", out);
  bn3.collect(prefix + ".bn3", out);
  if (has_projection) {
    proj.collect(prefix + ".proj", out);
    proj_bn.collect(prefix + ".proj_bn", out);
  }
}

UpBlock::UpBlock(int in, int skip, int out, int bottlenecks, Rng& rng)
    : conv(in, 4 * out, 3, 1, 1, false, rng), bn(out) {
  if (bottlenecks < 1) throw InvalidParameter("an upsampling block needs a bottleneck");
  blocks.emplace_back(out + skip, out, rng);
  for (int i = 1; i < bottlenecks; ++i) blocks.emplace_back(out, out, rng);
}

Var UpBlock::forward(const Var& x, const Var& skip, bool training) {
  Var h = ops::relu(bn.forward(ops::pixel_shuffle(conv.forward(x), 2), training));
  h = ops::concat_channels(h, skip);
  for (auto& b : blocks) h = b.forward(h, training);
  return h;
}

void UpBlock::collect(const std::string& prefix, StateList& out) {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(prefix + ".bottleneck" + std::to_string(i), out);
  }
}

double sigma_bias_for(int input_size) {
  if (input_size == 32) return 10.0;
  if (input_size == 224) return 80.0;
  return std::round(input_size / 3.0);
}

namespace {

struct ScaleShapes {
  int w1, w2, w3;
  int side1;
};

ScaleShapes scale_shapes(const ClassifierSpec& spec) {
  if (spec.stages.size() != 3) {
    throw InvalidParameter("the selector needs an encoder with exactly three stages");
  }
  int side1 = 0;
  for (const auto& l : layer_records(spec)) {
    if (l.id == "block" + std::to_string(spec.stages[0].blocks - 1) + ".conv2") side1 = l.out_h;
  }
  if (spec.stages[1].stride != 2 || spec.stages[2].stride != 2) {
    throw InvalidParameter("the selector expects stride-2 second and third stages");
  }
  return {spec.stages[0].width, spec.stages[1].width, spec.stages[2].width, side1};
}

}  // namespace

SelectorNet::SelectorNet(const ClassifierSpec& encoder, SelectorHead head, Rng& rng,
                         int bottlenecks)
    : encoder_(encoder), head_(head), center_(rbf::center_scale_for(encoder.input_size)) {
  build(rng, bottlenecks);
}

SelectorNet::SelectorNet(const ClassifierSpec& encoder, SelectorHead head, const WeightSet& weights,
                         int bottlenecks)
    : encoder_(encoder), head_(head), center_(rbf::center_scale_for(encoder.input_size)) {
  Rng scratch(0);
  build(scratch, bottlenecks);
  load(weights);
}

void SelectorNet::build(Rng& rng, int bottlenecks) {
  const ScaleShapes s = scale_shapes(encoder_);
  embedding_ = Var(he_normal({encoder_.num_classes, s.w3}, s.w3, rng), true);
  up1_ = UpBlock(s.w3, s.w2, s.w2, bottlenecks, rng);
  up2_ = UpBlock(s.w2, s.w1, s.w1, bottlenecks, rng);
  if (head_ == SelectorHead::rbf) {
    // Zero weights: at initialization every image maps to the image center
    // with sigma = softplus(bias).
    head_conv_ = Conv2d(s.w1, 3, s.side1, 1, 0, true, rng);
    head_conv_.weight.mutable_value().fill(Real(0));
    head_conv_.bias.mutable_value().fill(Real(0));
    head_conv_.bias.mutable_value()[2] = static_cast<Real>(sigma_bias_for(encoder_.input_size));
  } else {
    if (encoder_.input_size % s.side1 != 0) {
      throw InvalidParameter("input side must be a multiple of the decoder output side");
    }
    upscale_ = encoder_.input_size / s.side1;
    head_conv_ = Conv2d(s.w1, upscale_ * upscale_, 1, 1, 0, true, rng);
    head_conv_.bias.mutable_value().fill(Real(0));
  }
}

Var SelectorNet::decode(std::span<const Var> scales, std::span<const int> labels, bool training) {
  if (scales.size() != 3) throw ShapeMismatch("the selector decodes exactly three encoder scales");
  Var deep = ops::feature_filter(scales[2], embedding_, labels);
  Var h = up1_.forward(deep, scales[1], training);
  h = up2_.forward(h, scales[0], training);
  Var out = head_conv_.forward(h);
  if (head_ == SelectorHead::independent) {
    return upscale_ > 1 ? ops::pixel_shuffle(out, upscale_) : out;
  }
  out = ops::flatten(out);
  const double a = center_.a, off = center_.offset;
  auto center = [&](int k) {
    return ops::add_scalar(ops::scale(ops::tanh(ops::scale(ops::column(out, k), Real(1.0 / a))), Real(a)),
                           Real(off));
  };
  return ops::stack_columns({center(0), center(1), ops::softplus(ops::column(out, 2))});
}

Var SelectorNet::forward(ClassifierNet& encoder, const Var& x, std::span<const int> labels,
                         bool training) {
  std::vector<Var> scales;
  {
    NoGradGuard no_grad;
    scales = encoder.forward(x, false).scales;
  }
  return decode(scales, labels, training);
}

StateList SelectorNet::state() {
  StateList s;
  s.push_back({"embedding", &embedding_, nullptr});
  up1_.collect("up1", s);
  up2_.collect("up2", s);
  head_conv_.collect("head", s);
  return s;
}

std::vector<rbf::RbfParams> to_rbf_params(const Tensor& params) {
  if (params.rank() != 2 || params.dim(1) != 3) throw ShapeMismatch("expected [N, 3] RBF parameters");
  std::vector<rbf::RbfParams> out;
  for (int i = 0; i < params.dim(0); ++i) {
    out.push_back({params[i * 3], params[i * 3 + 1], params[i * 3 + 2]});
  }
  return out;
}

SelectorLossTerms selector_loss(const Var& x, const Tensor& classifier_probs,
                                ClassifierNet& predictor, const Var& soft_mask,
                                const AemConfig& config, bool with_smoothness) {
  const int n = x.dim(0);
  const double pixels = static_cast<double>(x.dim(2)) * x.dim(3);
  Var masked = ops::spatial_mask(x, soft_mask);
  Var kl = ops::kl_rows(classifier_probs, ops::log_softmax(predictor.forward(masked, false).logits));
  Var l0 = ops::scale(ops::sum_per_sample(soft_mask), static_cast<Real>(1.0 / pixels));
  Var per_sample = ops::add(kl, ops::scale(l0, static_cast<Real>(config.lambda1)));
  Var smooth;
  if (with_smoothness) {
    smooth = ops::scale(aem_ops::smoothness(soft_mask), static_cast<Real>(1.0 / pixels));
    per_sample = ops::add(per_sample, ops::scale(smooth, static_cast<Real>(config.lambda2)));
  }
  SelectorLossTerms t;
  t.total = ops::mean(per_sample);
  auto mean_of = [n](const Var& v) {
    double s = 0;
    for (int i = 0; i < n; ++i) s += v.value()[i];
    return s / n;
  };
  t.kl = mean_of(kl);
  t.l0 = mean_of(l0);
  t.smoothness = with_smoothness ? mean_of(smooth) : 0.0;
  return t;
}

namespace {

void shuffle(std::vector<int>& v, Rng& rng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
    std::swap(v[i], v[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  }
}

/// Hard training masks [N, 1, H, W] for the predictor.
Tensor predictor_masks(int n, int h, int w, PredictorMasks kind, Rng& rng) {
  Tensor m({n, 1, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    if (kind == PredictorMasks::bernoulli_half) {
      for (std::size_t k = 0; k < plane; ++k) m[i * plane + k] = rng.bernoulli(0.5) ? 1 : 0;
      continue;
    }
    const auto dist = rbf::bernoulli_param_grid(rbf::sample_random_rbf_params(h, w, rng), h, w);
    for (std::size_t k = 0; k < plane; ++k) {
      m[i * plane + k] = rng.bernoulli(dist.params.values()[k]) ? 1 : 0;
    }
  }
  return m;
}

Tensor classifier_probs(ClassifierNet& classifier, const Tensor& x) {
  NoGradGuard no_grad;
  return ops::softmax_rows(classifier.forward(Var(x), false).logits.value());
}

void guard_unchanged(const std::string& before, const std::string& after, const char* what) {
  if (before != after) {
    throw NumericError(std::string(what) + " parameters changed during training of a frozen model");
  }
}

SelectorResult train_selector_impl(ClassifierNet& classifier, ClassifierNet& predictor,
                                   const Dataset& data, const AemConfig& config, SelectorHead head) {
  config.validate();
  const std::string classifier_sum = classifier.checksum();
  const std::string predictor_sum = predictor.checksum();
  classifier.set_trainable(false);
  predictor.set_trainable(false);

  Rng init = Rng(config.seed).substream(head == SelectorHead::rbf ? 0x5E1 : 0x5E2);
  SelectorNet selector(classifier.spec(), head, init);
  Adam opt(selector.parameters(), {config.selector_lr, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng order_rng = Rng(config.seed).substream(0x0D3);
  Rng noise_rng = Rng(config.seed).substream(0x6B);
  std::vector<int> train = data.indices(SplitTag::train);

  SelectorResult result;
  int step = 0;
  for (int epoch = 1; epoch <= config.selector_epochs; ++epoch) {
    shuffle(train, order_rng);
    for (std::size_t start = 0; start + 2 <= train.size(); start += config.batch_size) {
      const std::size_t len = std::min<std::size_t>(config.batch_size, train.size() - start);
      const std::span<const int> ids(train.data() + start, len);
      const Tensor xt = data.batch(ids);
      const auto labels = data.batch_labels(ids);
      std::vector<Var> scales;
      Tensor probs;
      {
        NoGradGuard no_grad;
        auto r = classifier.forward(Var(xt), false);
        scales = r.scales;
        probs = ops::softmax_rows(r.logits.value());
      }
      Var out = selector.decode(scales, labels, true);
      Var dist = head == SelectorHead::rbf ? aem_ops::rbf_grid(out, data.height, data.width)
                                           : ops::sigmoid(out);
      const Tensor noise = aem_ops::gumbel_noise(static_cast<int>(len), data.height, data.width, noise_rng);
      Var mask = aem_ops::gumbel_sigmoid(dist, noise, config.tau);
      auto terms = selector_loss(Var(xt), probs, predictor, mask, config, head == SelectorHead::rbf);
      const double loss = terms.total.value()[0];
      if (!std::isfinite(loss)) throw NumericError("selector loss became non-finite");
      opt.zero_grad();
      backward(terms.total);
      opt.step();
      result.curve.push_back({epoch, step++, loss, terms.kl, terms.l0, terms.smoothness});
    }
  }
  guard_unchanged(classifier_sum, classifier.checksum(), "classifier");
  guard_unchanged(predictor_sum, predictor.checksum(), "predictor");
  result.weights = selector.weights();
  return result;
}

}  // namespace

PredictorResult train_predictor(ClassifierNet& classifier, const Dataset& data,
                                const AemConfig& config, PredictorMasks masks) {
  config.validate();
  const std::string classifier_sum = classifier.checksum();
  classifier.set_trainable(false);
  Rng init = Rng(config.seed).substream(masks == PredictorMasks::rbf ? 0x9D1 : 0x9D2);
  ClassifierNet predictor(classifier.spec(), init);
  Adam opt(predictor.parameters(), {config.predictor_lr, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng order_rng = Rng(config.seed).substream(0x0D4);
  Rng mask_rng = Rng(config.seed).substream(0x3A5);
  std::vector<int> train = data.indices(SplitTag::train);

  PredictorResult result;
  int step = 0;
  for (int epoch = 1; epoch <= config.predictor_epochs; ++epoch) {
    shuffle(train, order_rng);
    for (std::size_t start = 0; start + 2 <= train.size(); start += config.batch_size) {
      const std::size_t len = std::min<std::size_t>(config.batch_size, train.size() - start);
      const std::span<const int> ids(train.data() + start, len);
      const Tensor xt = data.batch(ids);
      const Tensor probs = classifier_probs(classifier, xt);
      const Tensor m = predictor_masks(static_cast<int>(len), data.height, data.width, masks, mask_rng);
      Var masked = ops::spatial_mask(Var(xt), Var(m));
      Var loss = ops::mean(ops::kl_rows(probs, ops::log_softmax(predictor.forward(masked, true).logits)));
      const double l = loss.value()[0];
      if (!std::isfinite(l)) throw NumericError("predictor loss became non-finite");
      opt.zero_grad();
      backward(loss);
      opt.step();
      result.curve.push_back({epoch, step++, l, l, 0, 0});
    }
  }
  guard_unchanged(classifier_sum, classifier.checksum(), "classifier");
  result.weights = predictor.weights();
  return result;
}

double predictor_kl(ClassifierNet& classifier, ClassifierNet& predictor, const Dataset& data,
                    std::span<const int> ids, PredictorMasks masks, std::uint64_t seed,
                    bool identity) {
  if (ids.empty()) return 0;
  NoGradGuard no_grad;
  Rng mask_rng(seed);
  double total = 0;
  for (std::size_t start = 0; start < ids.size(); start += 128) {
    const auto chunk = ids.subspan(start, std::min<std::size_t>(128, ids.size() - start));
    const Tensor xt = data.batch(chunk);
    const Tensor probs = classifier_probs(classifier, xt);
    Tensor m = predictor_masks(static_cast<int>(chunk.size()), data.height, data.width, masks, mask_rng);
    if (identity) m.fill(Real(1));
    Var masked = ops::spatial_mask(Var(xt), Var(m));
    Var kl = ops::kl_rows(probs, ops::log_softmax(predictor.forward(masked, false).logits));
    for (std::size_t i = 0; i < chunk.size(); ++i) total += kl.value()[i];
  }
  return total / static_cast<double>(ids.size());
}

SelectorResult train_selector(ClassifierNet& classifier, ClassifierNet& predictor,
                              const Dataset& data, const AemConfig& config) {
  return train_selector_impl(classifier, predictor, data, config, SelectorHead::rbf);
}

SelectorResult train_selector_realx(ClassifierNet& classifier, ClassifierNet& predictor,
                                    const Dataset& data, const AemConfig& config) {
  return train_selector_impl(classifier, predictor, data, config, SelectorHead::independent);
}

std::vector<Explanation> explain(ClassifierNet& classifier, SelectorNet& selector,
                                 const Dataset& data, std::span<const int> ids) {
  std::vector<Explanation> out;
  NoGradGuard no_grad;
  const std::size_t plane = static_cast<std::size_t>(data.height) * data.width;
  for (std::size_t start = 0; start < ids.size(); start += 128) {
    const auto chunk = ids.subspan(start, std::min<std::size_t>(128, ids.size() - start));
    Var x(data.batch(chunk));
    auto r = classifier.forward(x, false);
    const auto labels = ops::argmax_rows(r.logits.value());
    Var raw = selector.decode(r.scales, labels, false);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Explanation e;
      e.label = labels[i];
      if (selector.head() == SelectorHead::rbf) {
        e.params = {raw.value()[i * 3], raw.value()[i * 3 + 1], raw.value()[i * 3 + 2]};
        e.dist = rbf::bernoulli_param_grid(
            {e.params.c_z, e.params.c_t, std::max(e.params.sigma, rbf::kSigmaFloor)}, data.height,
            data.width);
      } else {
        rbf::Grid logits(data.height, data.width);
        for (std::size_t k = 0; k < plane; ++k) logits.values()[k] = raw.value()[i * plane + k];
        e.dist = rbf::independent_param_grid(logits);
      }
      e.hard = rbf::harden_mask(e.dist);
      out.push_back(std::move(e));
    }
  }
  return out;
}

SelectorEvaluation evaluate_selector(ClassifierNet& classifier, ClassifierNet& predictor,
                                     SelectorNet& selector, const Dataset& data,
                                     std::span<const int> ids) {
  SelectorEvaluation ev;
  if (ids.empty()) return ev;
  const auto ex = explain(classifier, selector, data, ids);
  const double pixels = static_cast<double>(data.height) * data.width;
  const std::size_t plane = static_cast<std::size_t>(data.height) * data.width;
  int inside = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (data.synthetic() && selector.head() == SelectorHead::rbf &&
        data.boxes[ids[i]].contains(ex[i].params.c_z, ex[i].params.c_t)) {
      ++inside;
    }
    ev.mean_hard_l0 += rbf::mask_l0(ex[i].hard) / pixels;
    ev.mean_hard_smoothness += rbf::mask_smoothness(ex[i].hard) / pixels;
    double relaxed = 0;
    for (double p : ex[i].dist.params.values()) relaxed += p;
    ev.mean_relaxed_l0 += relaxed;
  }
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < ids.size(); start += 128) {
    const auto chunk = ids.subspan(start, std::min<std::size_t>(128, ids.size() - start));
    const Tensor xt = data.batch(chunk);
    const Tensor probs = classifier_probs(classifier, xt);
    Tensor m({static_cast<int>(chunk.size()), 1, data.height, data.width});
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto& hv = ex[start + i].hard.values.values();
      for (std::size_t k = 0; k < plane; ++k) m[i * plane + k] = static_cast<Real>(hv[k]);
    }
    Var kl = ops::kl_rows(probs, ops::log_softmax(predictor.forward(ops::spatial_mask(Var(xt), Var(m)), false).logits));
    for (std::size_t i = 0; i < chunk.size(); ++i) ev.mean_kl += kl.value()[i];
  }
  const double n = static_cast<double>(ids.size());
  ev.center_in_box = inside / n;
  ev.mean_kl /= n;
  ev.mean_hard_l0 /= n;
  ev.mean_hard_smoothness /= n;
  ev.mean_relaxed_l0 /= n;
  return ev;
}

}  // namespace saliprune
