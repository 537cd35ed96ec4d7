// Finite-difference checks of the mask, selector and pruning gradient paths.
// Built against the double-precision library.
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "saliprune/aem.hpp"
#include "saliprune/ops.hpp"
#include "saliprune/pruner.hpp"

using namespace saliprune;

namespace {

constexpr double kTight = 1e-4;
constexpr double kLoose = 1e-3;

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0, double shift = 0.0) {
  Tensor t(std::move(shape));
  for (Real& v : t.values()) v = static_cast<Real>(shift + rng.normal() * scale);
  return t;
}

void require_close(const gradcheck::Report& r, double tol) {
  INFO(r.worst);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error <= tol);
}

double numeric(const std::function<double(double)>& f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

Var* find_var(StateList& s, const std::string& name) {
  for (auto& e : s) {
    if (e.name == name) return e.var;
  }
  FAIL("no state entry " << name);
  return nullptr;
}

// A tiny residual encoder keeps the checks quick.
ClassifierSpec tiny_spec() {
  ClassifierSpec s = residual_desk_spec();
  s.input_size = 16;
  s.num_classes = 4;
  return s;
}

}  // namespace

TEST_CASE("rbf grid vector-jacobian product") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const rbf::RbfParams p{rng.uniform(2, 14), rng.uniform(2, 14), rng.uniform(1, 12)};
    rbf::Grid up(16, 16);
    for (double& v : up.values()) v = rng.normal();
    auto dot = [&](const rbf::RbfParams& q) {
      const auto g = rbf::bernoulli_param_grid(q, 16, 16);
      double s = 0;
      for (std::size_t i = 0; i < up.size(); ++i) s += g.params.values()[i] * up.values()[i];
      return s;
    };
    const auto a = rbf::bernoulli_param_grid_vjp(p, up);
    const double dz = numeric([&](double x) { return dot({x, p.c_t, p.sigma}); }, p.c_z);
    const double dt = numeric([&](double x) { return dot({p.c_z, x, p.sigma}); }, p.c_t);
    const double ds = numeric([&](double x) { return dot({p.c_z, p.c_t, x}); }, p.sigma);
    CHECK(gradcheck::relative_error(a.c_z, dz) <= kTight);
    CHECK(gradcheck::relative_error(a.c_t, dt) <= kTight);
    CHECK(gradcheck::relative_error(a.sigma, ds) <= kTight);
  }
}

TEST_CASE("output nonlinearity derivatives") {
  for (double u : {-30.0, -5.0, -0.3, 0.0, 0.7, 9.0, 25.0}) {
    const double dc = numeric([](double x) { return rbf::center_nonlinearity(x, 14, 16); }, u);
    CHECK(gradcheck::relative_error(rbf::center_nonlinearity_derivative(u, 14), dc) <= kTight);
    const double ds = numeric([](double x) { return rbf::sigma_nonlinearity(x); }, u);
    CHECK(gradcheck::relative_error(rbf::sigma_nonlinearity_derivative(u), ds) <= kTight);
  }
}

TEST_CASE("smoothness gradient") {
  Rng rng(2);
  for (auto [h, w] : {std::pair{5, 7}, std::pair{1, 6}, std::pair{6, 1}}) {
    rbf::Grid m(h, w);
    for (double& v : m.values()) v = rng.uniform(0, 1);
    const auto g = rbf::mask_smoothness_gradient(m);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double n = numeric(
          [&](double x) {
            rbf::Grid c = m;
            c.values()[i] = x;
            return rbf::mask_smoothness(c);
          },
          m.values()[i]);
      CHECK(gradcheck::relative_error(g.values()[i], n) <= kTight);
    }
  }
}

TEST_CASE("soft sample gradient with frozen noise") {
  Rng rng(3);
  rbf::MaskDistribution dist{rbf::Grid(6, 6)};
  for (double& v : dist.params.values()) v = rng.uniform(0.05, 0.95);
  const auto noise = rbf::gumbel_noise(6, 6, rng);
  rbf::Grid up(6, 6);
  for (double& v : up.values()) v = rng.normal();
  for (double tau : {1.0, 0.4}) {
    const auto g = rbf::gumbel_sigmoid_vjp(dist, noise, tau, up);
    for (std::size_t i = 0; i < dist.params.size(); ++i) {
      const double n = numeric(
          [&](double x) {
            rbf::MaskDistribution d = dist;
            d.params.values()[i] = x;
            const auto m = rbf::gumbel_sigmoid_mask(d, noise, tau);
            double s = 0;
            for (std::size_t k = 0; k < up.size(); ++k) s += m.values.values()[k] * up.values()[k];
            return s;
          },
          dist.params.values()[i]);
      CHECK(gradcheck::relative_error(g.values()[i], n) <= kTight);
    }
  }
}

TEST_CASE("differentiable mask ops") {
  Rng rng(4);
  Tensor p({3, 3});
  for (int n = 0; n < 3; ++n) {
    p[n * 3] = static_cast<Real>(rng.uniform(2, 10));
    p[n * 3 + 1] = static_cast<Real>(rng.uniform(2, 10));
    p[n * 3 + 2] = static_cast<Real>(rng.uniform(1, 8));
  }
  Var params(p, true);
  Tensor r = random_tensor({3, 1, 12, 12}, rng);
  auto probe = [&](const Var& y) { return ops::sum(ops::mul(y, Var(r))); };
  require_close(gradcheck::check_var([&] { return probe(aem_ops::rbf_grid(params, 12, 12)); }, params), kTight);

  Tensor noise = aem_ops::gumbel_noise(3, 12, 12, rng);
  Tensor d0({3, 1, 12, 12});
  for (Real& v : d0.values()) v = static_cast<Real>(rng.uniform(0.05, 0.95));
  Var dist(d0, true);
  require_close(gradcheck::check_var([&] { return probe(aem_ops::gumbel_sigmoid(dist, noise, 1.0)); }, dist),
                kTight);
  require_close(gradcheck::check_var([&] { return probe(aem_ops::gumbel_sigmoid(dist, noise, 0.4)); }, dist),
                kTight);
  Tensor w = random_tensor({3}, rng);
  require_close(
      gradcheck::check_var([&] { return ops::sum(ops::mul(aem_ops::smoothness(dist), Var(w))); }, dist), kTight);
  // The whole parameter-to-sample chain.
  require_close(gradcheck::check_var(
                    [&] {
                      return ops::sum(aem_ops::smoothness(
                          aem_ops::gumbel_sigmoid(aem_ops::rbf_grid(params, 12, 12), noise, 1.0)));
                    },
                    params),
                kTight);
}

TEST_CASE("selector loss gradient w.r.t. the head bias") {
  const ClassifierSpec spec = tiny_spec();
  Rng rng(5);
  ClassifierNet classifier(spec, rng);
  ClassifierNet predictor(spec, rng);
  SelectorNet selector(spec, SelectorHead::rbf, rng);
  StateList s = selector.state();
  // Non-zero head weights so the centers depend on the input.
  find_var(s, "head.weight")->mutable_value() = random_tensor(find_var(s, "head.weight")->shape(), rng, 0.05);
  Var& bias = *find_var(s, "head.bias");
  bias.mutable_value() = random_tensor({3}, rng, 0.5);
  bias.mutable_value()[2] += 4;

  const Tensor x = random_tensor({2, 3, 16, 16}, rng);
  const std::vector<int> labels{1, 3};
  Tensor probs;
  {
    NoGradGuard g;
    probs = ops::softmax_rows(classifier.forward(Var(x), false).logits.value());
  }
  const Tensor noise = aem_ops::gumbel_noise(2, 16, 16, rng);
  AemConfig config;
  config.lambda2 = 0.05;  // make the smoothness path visible
  classifier.set_trainable(false);
  predictor.set_trainable(false);
  auto loss = [&] {
    Var p = selector.forward(classifier, Var(x), labels, false);
    Var m = aem_ops::gumbel_sigmoid(aem_ops::rbf_grid(p, 16, 16), noise, config.tau);
    return selector_loss(Var(x), probs, predictor, m, config).total;
  };
  require_close(gradcheck::check_var(loss, bias), kLoose);
  CHECK(std::abs(bias.grad()[0]) + std::abs(bias.grad()[2]) > 1e-8);
}

TEST_CASE("resource loss derivative") {
  for (double target : {0.3, 0.5}) {
    for (double t : {0.1, 0.29, 0.6, 0.9, 1.4}) {
      if (std::abs(t - target) < 0.05) continue;  // away from the kink
      Var tv(Tensor({1}, {static_cast<Real>(t)}), true);
      auto r = gradcheck::check_var([&] { return resource_loss(tv, target); }, tv);
      require_close(r, kTight);
      tv.zero_grad();
      Var out = resource_loss(tv, target);
      backward(out);
      const double expected = t > target ? 1.0 / t : 0.0;
      CHECK(tv.grad()[0] == doctest::Approx(expected).epsilon(1e-9));
      CHECK(out.value()[0] == doctest::Approx(resource_loss(t, target)).epsilon(1e-12));
    }
  }
}

TEST_CASE("total pruning loss gradient w.r.t. gate logits") {
  const ClassifierSpec spec = tiny_spec();
  Rng rng(6);
  ClassifierNet classifier(spec, rng);
  SelectorNet selector(spec, SelectorHead::rbf, rng);
  StateList s = selector.state();
  find_var(s, "head.weight")->mutable_value() = random_tensor(find_var(s, "head.weight")->shape(), rng, 0.05);
  classifier.set_trainable(false);
  selector.set_trainable(false);
  const FlopsModel fm(spec);

  const Tensor x = random_tensor({3, 3, 16, 16}, rng);
  const std::vector<int> labels{0, 2, 3}, cond{1, 2, 0};
  Tensor target({3, 3});
  for (int n = 0; n < 3; ++n) {
    target[n * 3] = static_cast<Real>(rng.uniform(4, 12));
    target[n * 3 + 1] = static_cast<Real>(rng.uniform(4, 12));
    target[n * 3 + 2] = static_cast<Real>(rng.uniform(2, 10));
  }
  std::vector<Var> theta;
  std::vector<Tensor> noise;
  for (const auto& g : fm.groups()) {
    theta.emplace_back(random_tensor({g.size}, rng, 1.0, -3.0), true);
    Tensor n({g.size});
    for (Real& v : n.values()) v = static_cast<Real>(rng.gumbel());
    noise.push_back(n);
  }
  PruneConfig config;
  config.target = 0.2;  // keep the resource term active
  for (double cw : {1.0, 0.0}) {
    config.classification_weight = cw;
    auto loss = [&] {
      return prune_loss(classifier, selector, x, labels, cond, target, theta, noise, fm, config).total;
    };
    CHECK(prune_loss(classifier, selector, x, labels, cond, target, theta, noise, fm, config).resource > 0);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      // Gates pushed far open by their noise draw have gradients near 1e-6,
      // where the difference quotient is only good to a few 1e-9.
      require_close(gradcheck::check_var(loss, theta[k], 1e-5, 64, "theta" + std::to_string(k), 1e-5), kLoose);
      double norm = 0;
      for (Real g : theta[k].grad().values()) norm += std::abs(g);
      CHECK(norm > 1e-8);
    }
  }
}
