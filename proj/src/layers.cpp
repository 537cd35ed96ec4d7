#include "saliprune/layers.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <memory>
#include <sstream>

#include "saliprune/error.hpp"

namespace saliprune {

WeightSet export_state(const StateList& entries) {
  WeightSet out;
  for (const auto& e : entries) out[e.name] = e.tensor();
  return out;
}

void import_state(const StateList& entries, const WeightSet& weights) {
  for (const auto& e : entries) {
    auto it = weights.find(e.name);
    if (it == weights.end()) throw ShapeMismatch("weight '" + e.name + "' missing from weight set");
    if (!it->second.same_shape(e.tensor())) {
      throw ShapeMismatch("weight '" + e.name + "' has shape " + it->second.shape_string() +
                          ", expected " + e.tensor().shape_string());
    }
    e.tensor() = it->second;
  }
}

std::vector<Var> trainable_vars(const StateList& entries) {
  std::vector<Var> out;
  for (const auto& e : entries) {
    if (e.var) out.push_back(*e.var);
  }
  return out;
}

void set_trainable(const StateList& entries, bool trainable) {
  for (const auto& e : entries) {
    if (e.var) e.var->set_requires_grad(trainable);
  }
}

std::string checksum(const WeightSet& weights) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  for (const auto& [name, t] : weights) {
    EVP_DigestUpdate(ctx.get(), name.data(), name.size());
    for (int d : t.shape()) {
      const std::int32_t v = d;
      EVP_DigestUpdate(ctx.get(), &v, sizeof v);
    }
    // Hash as double so float and double builds agree on identical values.
    for (Real x : t.values()) {
      const double v = static_cast<double>(x);
      EVP_DigestUpdate(ctx.get(), &v, sizeof v);
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / std::max(fan_in, 1));
  for (Real& v : t.values()) v = static_cast<Real>(rng.normal() * std_dev);
  return t;
}

Tensor uniform_tensor(std::vector<int> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (Real& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
  return t;
}

Conv2d::Conv2d(int in, int out, int kernel, int stride_, int pad_, bool with_bias, Rng& rng)
    : stride(stride_), pad(pad_) {
  if (in < 1 || out < 1 || kernel < 1) throw InvalidParameter("conv dimensions must be positive");
  weight = Var(he_normal({out, in, kernel, kernel}, in * kernel * kernel, rng), true);
  if (with_bias) bias = Var(Tensor({out}), true);
}

void Conv2d::collect(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".weight", &weight, nullptr});
  if (bias.defined()) out.push_back({prefix + ".bias", &bias, nullptr});
}

DepthwiseConv2d::DepthwiseConv2d(int channels, int kernel, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  if (channels < 1 || kernel < 1) throw InvalidParameter("depthwise dimensions must be positive");
  weight = Var(he_normal({channels, 1, kernel, kernel}, kernel * kernel, rng), true);
}

void DepthwiseConv2d::collect(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".weight", &weight, nullptr});
}

BatchNorm2d::BatchNorm2d(int channels)
    : gamma(Tensor({channels}, Real(1)), true), beta(Tensor({channels}), true) {
  stats.running_mean = Tensor({channels});
  stats.running_var = Tensor({channels}, Real(1));
}

void BatchNorm2d::collect(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".gamma", &gamma, nullptr});
  out.push_back({prefix + ".beta", &beta, nullptr});
  out.push_back({prefix + ".running_mean", nullptr, &stats.running_mean});
  out.push_back({prefix + ".running_var", nullptr, &stats.running_var});
}

Linear::Linear(int in, int out, Rng& rng) {
  if (in < 1 || out < 1) throw InvalidParameter("linear dimensions must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = Var(uniform_tensor({out, in}, bound, rng), true);
  bias = Var(uniform_tensor({out}, bound, rng), true);
}

void Linear::collect(const std::string& prefix, StateList& out) {
  out.push_back({prefix + ".weight", &weight, nullptr});
  out.push_back({prefix + ".bias", &bias, nullptr});
}

}  // namespace saliprune
