#pragma once

#include <span>
#include <vector>

#include "saliprune/autograd.hpp"

namespace saliprune::ops {

// Elementwise arithmetic. Binary ops require identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real factor);
Var add_scalar(const Var& a, Real offset);
Var square(const Var& a);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// Sums every non-leading axis: [N, ...] -> [N].
Var sum_per_sample(const Var& a);

// Pointwise nonlinearities.
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
/// log(1 + exp(a)), overflow-safe.
Var softplus(const Var& a);
/// log(max(a, floor)); zero gradient where clamped.
Var log_clamped(const Var& a, Real floor);

// Convolutions. x: [N, C, H, W]; w: [Cout, Cin, k, k]; bias may be undefined.
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
/// Per-channel convolution; w: [C, 1, k, k].
Var depthwise_conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};
/// Training mode normalizes with batch statistics and updates `stats`;
/// otherwise the running statistics are used.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, bool training,
               Real momentum = Real(0.1), Real eps = Real(1e-5));

/// [N, C, H, W] -> [N, C].
Var global_avg_pool(const Var& x);
/// x: [N, D]; w: [O, D]; b: [O] (may be undefined).
Var linear(const Var& x, const Var& w, const Var& b);
/// [N, C*r*r, H, W] -> [N, C, H*r, W*r].
Var pixel_shuffle(const Var& x, int factor);
Var concat_channels(const Var& a, const Var& b);
Var reshape(const Var& a, std::vector<int> shape);
/// [N, ...] -> [N, prod(rest)].
Var flatten(const Var& a);

/// Scales channel c of x by gate[c]; gate: [C].
Var channel_gate(const Var& x, const Var& gate);
/// Multiplies every channel of x by the per-sample spatial mask m: [N, 1, H, W].
Var spatial_mask(const Var& x, const Var& m);

/// Row-wise log-softmax over [N, K].
Var log_softmax(const Var& logits);
/// Mean cross-entropy of logits [N, K] against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);
/// Row-wise KL(target || q) with q given as log-probabilities [N, K]; q is
/// floored at `q_floor`. Returns [N].
Var kl_rows(const Tensor& target, const Var& log_q, Real q_floor = Real(1e-8));

/// Column k of [N, K] as [N].
Var column(const Var& a, int k);
/// Gathers [N] vectors into [N, K].
Var stack_columns(const std::vector<Var>& cols);

/// Class-conditioned spatial attenuation: Z[n,:,i,j] = X[n,:,i,j] *
/// sigmoid(<X[n,:,i,j], table[label_n]>). table: [K, d].
Var feature_filter(const Var& x, const Var& table, std::span<const int> labels);

// Plain tensor helpers (no graph).
Tensor softmax_rows(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace saliprune::ops
