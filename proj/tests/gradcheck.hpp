#pragma once

// Central finite-difference checking, independent of the autodiff code it
// verifies: it only perturbs raw values and re-evaluates a scalar function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "saliprune/autograd.hpp"

namespace gradcheck {

struct Report {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;
  std::string worst;
};

/// Relative error with a floor so that entries where both gradients are
/// essentially zero are judged on absolute error.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double saved = x;
  x = saved + h;
  const double plus = f();
  x = saved - h;
  const double minus = f();
  x = saved;
  return (plus - minus) / (2 * h);
}

/// Compares the gradient held in `analytic` with central differences of
/// `loss` w.r.t. each entry of `values` (at most `max_entries`, evenly
/// spaced).
template <typename T>
Report compare(const std::function<double()>& loss, std::vector<T>& values,
               const std::vector<double>& analytic, double h, std::size_t max_entries = 64,
               const std::string& label = "", double floor = 1e-6) {
  Report r;
  const std::size_t n = values.size();
  const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
  for (std::size_t i = 0; i < n; i += stride) {
    const T saved = values[i];
    values[i] = static_cast<T>(saved + h);
    const double plus = loss();
    values[i] = static_cast<T>(saved - h);
    const double minus = loss();
    values[i] = saved;
    const double numeric = (plus - minus) / (2 * h);
    const double rel = relative_error(analytic[i], numeric, floor);
    ++r.checked;
    r.max_abs_error = std::max(r.max_abs_error, std::abs(analytic[i] - numeric));
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = label + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[i]) +
                " numeric=" + std::to_string(numeric);
    }
  }
  return r;
}

/// Runs `build` (which must return a scalar Var depending on `leaf`) once
/// with backward to get the analytic gradient, then checks it.
inline Report check_var(const std::function<saliprune::Var()>& build, saliprune::Var& leaf,
                        double h = 1e-5, std::size_t max_entries = 64, const std::string& label = "",
                        double floor = 1e-6) {
  leaf.zero_grad();
  saliprune::Var out = build();
  saliprune::backward(out);
  const auto g = leaf.grad();
  std::vector<double> analytic(g.values().begin(), g.values().end());
  auto loss = [&]() {
    saliprune::NoGradGuard guard;
    return static_cast<double>(build().value()[0]);
  };
  return compare(loss, leaf.mutable_value().storage(), analytic, h, max_entries, label, floor);
}

}  // namespace gradcheck
