#include <doctest.h>

#include <algorithm>

#include "saliprune/classifier_zoo.hpp"
#include "saliprune/data_pipeline.hpp"
#include "saliprune/error.hpp"
#include "saliprune/ops.hpp"

using namespace saliprune;

namespace {

bool identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

Tensor random_batch(int n, int size, Rng& rng) {
  Tensor t({n, 3, size, size});
  for (Real& v : t.values()) v = static_cast<Real>(rng.normal());
  return t;
}

ArchVector filled(const std::vector<GateGroup>& groups, double value) {
  ArchVector v;
  for (const auto& g : groups) v.values.emplace_back(g.size, value);
  return v;
}

}  // namespace

TEST_CASE("per-layer FLOPs closed forms") {
  LayerRecord conv{"c", LayerKind::conv, 3, 4, 8, 1, 16, 16};
  CHECK(flops_of_layer(conv, 4, 8) == 73728);
  CHECK(flops_of_layer(conv, 0, 8) == 0);
  CHECK(flops_of_layer(conv, 2, 8) == 73728 / 2);

  LayerRecord dw{"d", LayerKind::depthwise, 3, 8, 8, 1, 8, 8};
  CHECK(flops_of_layer(dw, 8, 8) == 4608);

  LayerRecord fc{"fc", LayerKind::fully_connected, 1, 32, 10};
  CHECK(flops_of_layer(fc, 32, 10) == 320);

  CHECK_THROWS_AS(flops_of_layer(conv, -1, 8), InvalidParameter);
  CHECK_THROWS_AS(flops_of_layer(conv, 5, 8), InvalidParameter);
}

TEST_CASE("FLOPs model totals and monotonicity") {
  for (const char* name : {"resnet-desk", "mobile-desk", "resnet-cifar"}) {
    const ClassifierSpec spec = spec_preset(name);
    const FlopsModel fm(spec);
    std::int64_t prunable = 0, total = 0;
    for (const auto& l : fm.layers()) {
      const std::int64_t f = flops_of_layer(l, l.c_in, l.c_out);
      total += f;
      if (l.prunable()) prunable += f;
    }
    CHECK(fm.total_prunable() == prunable);
    CHECK(fm.total() == total);
    CHECK(fm.current(ArchVector::ones(fm.groups())) == static_cast<double>(prunable));
    // Every prunable layer has one gated side (depthwise layers count once),
    // so uniform activity a scales T by a.
    CHECK(fm.current(filled(fm.groups(), 0.5)) == doctest::Approx(0.5 * prunable));

    std::vector<int> counts;
    for (const auto& g : fm.groups()) counts.push_back(g.size);
    std::int64_t prev = fm.prunable_with_counts(counts);
    CHECK(prev == prunable);
    for (std::size_t g = 0; g < counts.size(); ++g) {
      while (counts[g] > 0) {
        --counts[g];
        const std::int64_t now = fm.prunable_with_counts(counts);
        CHECK(now <= prev);
        prev = now;
      }
    }
    CHECK(prev == 0);
  }
}

TEST_CASE("specs validate and round-trip through JSON") {
  for (const char* name : {"resnet-desk", "mobile-desk", "resnet-cifar"}) {
    const ClassifierSpec spec = spec_preset(name);
    CHECK_NOTHROW(spec.validate());
    nlohmann::json j = spec;
    CHECK(j.get<ClassifierSpec>() == spec);
  }
  CHECK_THROWS_AS(spec_preset("vgg"), ConfigError);
  ClassifierSpec bad = residual_desk_spec();
  bad.stages[1].stride = 0;
  CHECK_THROWS(bad.validate());
  bad = residual_desk_spec();
  bad.hidden = {4, 4};
  CHECK_THROWS(bad.validate());
  CHECK(residual_cifar_spec(3).block_count() == 9);
}

TEST_CASE("construction is deterministic and both families run") {
  for (const char* name : {"resnet-desk", "mobile-desk"}) {
    const ClassifierSpec spec = spec_preset(name);
    Rng a(42), b(42), c(43);
    ClassifierNet n1(spec, a), n2(spec, b), n3(spec, c);
    CHECK(n1.checksum() == n2.checksum());
    CHECK(n1.checksum() != n3.checksum());
    Rng data_rng(1);
    const Tensor x = random_batch(2, 32, data_rng);
    auto r = n1.forward(Var(x), false);
    CHECK(r.logits.shape() == std::vector<int>{2, 10});
    CHECK(r.scales.size() == 3);
  }
}

TEST_CASE("all-ones gates are bit-identical to the ungated forward") {
  for (const char* name : {"resnet-desk", "mobile-desk"}) {
    const ClassifierSpec spec = spec_preset(name);
    Rng rng(3);
    ClassifierNet net(spec, rng);
    const Tensor x = random_batch(3, 32, rng);
    const auto plain = net.forward(Var(x), false);
    const auto gated = net.forward(Var(x), false, gate_vars(ArchVector::ones(gate_groups(spec))));
    CHECK(identical(plain.logits.value(), gated.logits.value()));
    for (std::size_t s = 0; s < 3; ++s) {
      CHECK(identical(plain.scales[s].value(), gated.scales[s].value()));
    }
  }
}

TEST_CASE("training contracts") {
  const Dataset data = synthetic_benchmark(200, 4, 5);
  ClassifierSpec spec = residual_desk_spec();
  spec.num_classes = 4;
  ClassifierTrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 9;
  Rng rng(1);
  ClassifierNet net(spec, rng);
  const WeightSet before = net.weights();
  auto r = train_classifier(net, data, cfg);
  CHECK(checksum(r.weights) == checksum(before));
  CHECK(r.curve.empty());

  cfg.epochs = 1;
  std::string sums[2];
  for (auto& s : sums) {
    Rng init(1);
    ClassifierNet fresh(spec, init);
    s = checksum(train_classifier(fresh, data, cfg).weights);
  }
  CHECK(sums[0] == sums[1]);
  CHECK(sums[0] != checksum(before));
}

TEST_CASE("gated evaluation") {
  const Dataset data = synthetic_benchmark(200, 4, 6);
  ClassifierSpec spec = residual_desk_spec();
  spec.num_classes = 4;
  Rng rng(2);
  ClassifierNet net(spec, rng);
  const auto test = data.indices(SplitTag::test);
  const double plain = evaluate(net, data, test);
  CHECK(evaluate(net, data, test, ArchVector::ones(gate_groups(spec))) == plain);
  CHECK_THROWS_AS(evaluate(net, data, test, filled({{"x", 3}}, 1.0)), ShapeMismatch);
}
