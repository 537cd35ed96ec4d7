#include "saliprune/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "saliprune/error.hpp"

namespace saliprune::ops {

namespace {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, Real alpha, const Real* a, int lda,
          const Real* b, int ldb, Real beta, Real* c, int ldc) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
#ifdef SALIPRUNE_DOUBLE
  cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
#else
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
#endif
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + a.value().shape_string() + " vs " +
                        b.value().shape_string());
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        a.value().shape_string());
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

struct ConvGeometry {
  int n, c, h, w, k, stride, pad, ho, wo;
  int patch() const { return c * k * k; }
  int positions() const { return ho * wo; }
};

ConvGeometry conv_geometry(const Tensor& x, int k, int stride, int pad) {
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  if (stride < 1 || pad < 0) throw InvalidParameter("convolution stride/padding");
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeMismatch("convolution kernel larger than padded input");
  return g;
}

// Output columns [lo, hi) whose input column wo*stride - pad + kj is in range.
std::pair<int, int> valid_range(int kj, const ConvGeometry& g) {
  const int off = kj - g.pad;
  int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  int hi = (g.w - 1 - off) >= 0 ? (g.w - 1 - off) / g.stride + 1 : 0;
  lo = std::min(lo, g.wo);
  hi = std::clamp(hi, lo, g.wo);
  return {lo, hi};
}

// col: [C*k*k, N*Ho*Wo]
void im2col(const Real* x, const ConvGeometry& g, Real* col) {
  const std::size_t cols = static_cast<std::size_t>(g.n) * g.positions();
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        Real* row = col + (static_cast<std::size_t>(c * g.k + ki) * g.k + kj) * cols;
        const auto [lo, hi] = valid_range(kj, g);
        const int off = kj - g.pad;
        for (int n = 0; n < g.n; ++n) {
          const Real* plane = x + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
          Real* dst = row + static_cast<std::size_t>(n) * g.positions();
          for (int ho = 0; ho < g.ho; ++ho) {
            Real* out = dst + ho * g.wo;
            const int hi_row = ho * g.stride - g.pad + ki;
            if (hi_row < 0 || hi_row >= g.h) {
              std::fill(out, out + g.wo, Real(0));
              continue;
            }
            const Real* src = plane + hi_row * g.w;
            std::fill(out, out + lo, Real(0));
            if (g.stride == 1) {
              std::copy(src + lo + off, src + hi + off, out + lo);
            } else {
              for (int wo = lo; wo < hi; ++wo) out[wo] = src[wo * g.stride + off];
            }
            std::fill(out + hi, out + g.wo, Real(0));
          }
        }
      }
    }
  }
}

void col2im(const Real* col, const ConvGeometry& g, Real* dx) {
  const std::size_t cols = static_cast<std::size_t>(g.n) * g.positions();
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const Real* row = col + (static_cast<std::size_t>(c * g.k + ki) * g.k + kj) * cols;
        const auto [lo, hi] = valid_range(kj, g);
        const int off = kj - g.pad;
        for (int n = 0; n < g.n; ++n) {
          Real* plane = dx + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
          const Real* src = row + static_cast<std::size_t>(n) * g.positions();
          for (int ho = 0; ho < g.ho; ++ho) {
            const int hi_row = ho * g.stride - g.pad + ki;
            if (hi_row < 0 || hi_row >= g.h) continue;
            Real* dst = plane + hi_row * g.w;
            const Real* in = src + ho * g.wo;
            if (g.stride == 1) {
              for (int wo = lo; wo < hi; ++wo) dst[wo + off] += in[wo];
            } else {
              for (int wo = lo; wo < hi; ++wo) dst[wo * g.stride + off] += in[wo];
            }
          }
        }
      }
    }
  }
}

template <typename F, typename D>
Var unary(const Var& a, F f, D df_from_input_output) {
  Tensor out = Tensor::zeros_like(a.value());
  const Tensor& in = a.value();
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = f(in[i]);
  return make_var(std::move(out), {a}, [df_from_input_output](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      g[i] += self.grad[i] * df_from_input_output(p.value[i], self.value[i]);
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out.accumulate(b.value());
  return make_var(std::move(out), {a, b}, [](Node& self) {
    for (int i = 0; i < 2; ++i) {
      if (parent(self, i).requires_grad) parent(self, i).grad.accumulate(self.grad);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).grad.accumulate(self.grad);
    if (parent(self, 1).requires_grad) {
      Tensor& g = parent(self, 1).grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < pa.grad.numel(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < pb.grad.numel(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& a, Real factor) {
  return unary(
      a, [factor](Real x) { return x * factor; }, [factor](Real, Real) { return factor; });
}

Var add_scalar(const Var& a, Real offset) {
  return unary(
      a, [offset](Real x) { return x + offset; }, [](Real, Real) { return Real(1); });
}

Var square(const Var& a) {
  return unary(
      a, [](Real x) { return x * x; }, [](Real x, Real) { return 2 * x; });
}

Var sum(const Var& a) {
  double total = 0;
  for (Real v : a.value().values()) total += v;
  return make_var(Tensor::scalar(static_cast<Real>(total)), {a}, [](Node& self) {
    const Real g = self.grad[0];
    for (Real& v : parent(self, 0).grad.values()) v += g;
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeMismatch("mean of empty tensor");
  return scale(sum(a), Real(1) / static_cast<Real>(n));
}

Var sum_per_sample(const Var& a) {
  const int n = a.dim(0);
  const std::size_t stride = a.value().numel() / static_cast<std::size_t>(n);
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < stride; ++j) total += a.value()[i * stride + j];
    out[i] = static_cast<Real>(total);
  }
  return make_var(std::move(out), {a}, [n, stride](Node& self) {
    Tensor& g = parent(self, 0).grad;
    for (int i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < stride; ++j) g[i * stride + j] += self.grad[i];
    }
  });
}

Var relu(const Var& a) {
  return unary(
      a, [](Real x) { return x > 0 ? x : Real(0); },
      [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Var tanh(const Var& a) {
  return unary(
      a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

Var softplus(const Var& a) {
  return unary(
      a, [](Real x) { return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](Real x, Real) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      });
}

Var log_clamped(const Var& a, Real floor) {
  return unary(
      a, [floor](Real x) { return std::log(std::max(x, floor)); },
      [floor](Real x, Real) { return x > floor ? Real(1) / x : Real(0); });
}

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const int cout = w.dim(0);
  const int k = w.dim(2);
  if (w.dim(1) != x.dim(1) || w.dim(3) != k) {
    throw ShapeMismatch("conv2d weight " + w.value().shape_string() + " vs input " +
                        x.value().shape_string());
  }
  if (bias.defined() && (bias.value().numel() != static_cast<std::size_t>(cout))) {
    throw ShapeMismatch("conv2d bias length");
  }
  const ConvGeometry g = conv_geometry(x.value(), k, stride, pad);
  const int cols = g.n * g.positions();
  std::vector<Real> col(static_cast<std::size_t>(g.patch()) * cols);
  im2col(x.value().data(), g, col.data());
  std::vector<Real> prod(static_cast<std::size_t>(cout) * cols);
  gemm(false, false, cout, cols, g.patch(), Real(1), w.value().data(), g.patch(), col.data(), cols,
       Real(0), prod.data(), cols);

  Tensor out({g.n, cout, g.ho, g.wo});
  const int p = g.positions();
  for (int n = 0; n < g.n; ++n) {
    for (int co = 0; co < cout; ++co) {
      const Real b = bias.defined() ? bias.value()[co] : Real(0);
      const Real* src = prod.data() + static_cast<std::size_t>(co) * cols + n * p;
      Real* dst = out.data() + (static_cast<std::size_t>(n) * cout + co) * p;
      for (int i = 0; i < p; ++i) dst[i] = src[i] + b;
    }
  }

  std::vector<Var> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return make_var(std::move(out), std::move(parents), [g, cout, has_bias](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    const int cols = g.n * g.positions();
    const int p = g.positions();
    std::vector<Real> dprod(static_cast<std::size_t>(cout) * cols);
    for (int n = 0; n < g.n; ++n) {
      for (int co = 0; co < cout; ++co) {
        const Real* src = self.grad.data() + (static_cast<std::size_t>(n) * cout + co) * p;
        std::copy(src, src + p, dprod.data() + static_cast<std::size_t>(co) * cols + n * p);
      }
    }
    if (has_bias && parent(self, 2).requires_grad) {
      Tensor& gb = parent(self, 2).grad;
      for (int co = 0; co < cout; ++co) {
        double total = 0;
        const Real* row = dprod.data() + static_cast<std::size_t>(co) * cols;
        for (int i = 0; i < cols; ++i) total += row[i];
        gb[co] += static_cast<Real>(total);
      }
    }
    if (pw.requires_grad) {
      std::vector<Real> col(static_cast<std::size_t>(g.patch()) * cols);
      im2col(px.value.data(), g, col.data());
      gemm(false, true, cout, g.patch(), cols, Real(1), dprod.data(), cols, col.data(), cols,
           Real(1), pw.grad.data(), g.patch());
    }
    if (px.requires_grad) {
      std::vector<Real> dcol(static_cast<std::size_t>(g.patch()) * cols);
      gemm(true, false, g.patch(), cols, cout, Real(1), pw.value.data(), g.patch(), dprod.data(),
           cols, Real(0), dcol.data(), cols);
      col2im(dcol.data(), g, px.grad.data());
    }
  });
}

Var depthwise_conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  require_rank(x, 4, "depthwise input");
  require_rank(w, 4, "depthwise weight");
  const int k = w.dim(2);
  if (w.dim(0) != x.dim(1) || w.dim(1) != 1 || w.dim(3) != k) {
    throw ShapeMismatch("depthwise weight " + w.value().shape_string() + " vs input " +
                        x.value().shape_string());
  }
  const ConvGeometry g = conv_geometry(x.value(), k, stride, pad);
  Tensor out({g.n, g.c, g.ho, g.wo});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.c; ++c) {
      const Real b = bias.defined() ? bias.value()[c] : Real(0);
      for (int ho = 0; ho < g.ho; ++ho) {
        for (int wo = 0; wo < g.wo; ++wo) {
          Real acc = b;
          for (int ki = 0; ki < k; ++ki) {
            const int hi = ho * stride - pad + ki;
            if (hi < 0 || hi >= g.h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int wi = wo * stride - pad + kj;
              if (wi < 0 || wi >= g.w) continue;
              acc += wv[(c * k + ki) * k + kj] * xv.at(n, c, hi, wi);
            }
          }
          out.at(n, c, ho, wo) = acc;
        }
      }
    }
  }
  std::vector<Var> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return make_var(std::move(out), std::move(parents), [g, has_bias](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    const int k = g.k;
    for (int n = 0; n < g.n; ++n) {
      for (int c = 0; c < g.c; ++c) {
        for (int ho = 0; ho < g.ho; ++ho) {
          for (int wo = 0; wo < g.wo; ++wo) {
            const Real dy = self.grad.at(n, c, ho, wo);
            if (has_bias && parent(self, 2).requires_grad) parent(self, 2).grad[c] += dy;
            for (int ki = 0; ki < k; ++ki) {
              const int hi = ho * g.stride - g.pad + ki;
              if (hi < 0 || hi >= g.h) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int wi = wo * g.stride - g.pad + kj;
                if (wi < 0 || wi >= g.w) continue;
                const int widx = (c * k + ki) * k + kj;
                if (pw.requires_grad) pw.grad[widx] += dy * px.value.at(n, c, hi, wi);
                if (px.requires_grad) px.grad.at(n, c, hi, wi) += dy * pw.value[widx];
              }
            }
          }
        }
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, bool training,
               Real momentum, Real eps) {
  require_rank(x, 4, "batch_norm");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.value().numel() != static_cast<std::size_t>(c) ||
      beta.value().numel() != static_cast<std::size_t>(c)) {
    throw ShapeMismatch("batch_norm affine parameters");
  }
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  Tensor mean({c}), inv_std({c});
  const Tensor& xv = x.value();
  if (training) {
    if (m < 2) throw ShapeMismatch("batch_norm training needs more than one value per channel");
    for (int ch = 0; ch < c; ++ch) {
      double s = 0, s2 = 0;
      for (int i = 0; i < n; ++i) {
        const Real* p = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (int j = 0; j < hw; ++j) s += p[j];
      }
      const double mu = s / static_cast<double>(m);
      for (int i = 0; i < n; ++i) {
        const Real* p = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (int j = 0; j < hw; ++j) s2 += (p[j] - mu) * (p[j] - mu);
      }
      const double var = s2 / static_cast<double>(m);
      mean[ch] = static_cast<Real>(mu);
      inv_std[ch] = static_cast<Real>(1.0 / std::sqrt(var + eps));
      stats.running_mean[ch] = (1 - momentum) * stats.running_mean[ch] + momentum * Real(mu);
      stats.running_var[ch] = (1 - momentum) * stats.running_var[ch] +
                              momentum * static_cast<Real>(var * m / static_cast<double>(m - 1));
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = Real(1) / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  Tensor xhat = Tensor::zeros_like(xv);
  Tensor out = Tensor::zeros_like(xv);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
      const Real g = gamma.value()[ch], b = beta.value()[ch];
      for (int j = 0; j < hw; ++j) {
        const Real h = (xv[off + j] - mean[ch]) * inv_std[ch];
        xhat[off + j] = h;
        out[off + j] = g * h + b;
      }
    }
  }
  return make_var(std::move(out), {x, gamma, beta},
                  [xhat = std::move(xhat), inv_std = std::move(inv_std), training, n, c, hw,
                   m](Node& self) {
                    Node& px = parent(self, 0);
                    Node& pg = parent(self, 1);
                    Node& pb = parent(self, 2);
                    for (int ch = 0; ch < c; ++ch) {
                      double sdy = 0, sdyx = 0;
                      for (int i = 0; i < n; ++i) {
                        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
                        for (int j = 0; j < hw; ++j) {
                          sdy += self.grad[off + j];
                          sdyx += self.grad[off + j] * xhat[off + j];
                        }
                      }
                      if (pb.requires_grad) pb.grad[ch] += static_cast<Real>(sdy);
                      if (pg.requires_grad) pg.grad[ch] += static_cast<Real>(sdyx);
                      if (!px.requires_grad) continue;
                      const Real g = pg.value[ch];
                      for (int i = 0; i < n; ++i) {
                        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
                        for (int j = 0; j < hw; ++j) {
                          if (training) {
                            const double inner = static_cast<double>(m) * self.grad[off + j] - sdy -
                                                 xhat[off + j] * sdyx;
                            px.grad[off + j] +=
                                static_cast<Real>(g * inv_std[ch] * inner / static_cast<double>(m));
                          } else {
                            px.grad[off + j] += self.grad[off + j] * g * inv_std[ch];
                          }
                        }
                      }
                    }
                  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (int i = 0; i < n * c; ++i) {
    double total = 0;
    const Real* p = x.value().data() + static_cast<std::size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) total += p[j];
    out[i] = static_cast<Real>(total / hw);
  }
  return make_var(std::move(out), {x}, [n, c, hw](Node& self) {
    Tensor& g = parent(self, 0).grad;
    for (int i = 0; i < n * c; ++i) {
      const Real d = self.grad[i] / static_cast<Real>(hw);
      Real* p = g.data() + static_cast<std::size_t>(i) * hw;
      for (int j = 0; j < hw; ++j) p[j] += d;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const int n = x.dim(0), d = x.dim(1), o = w.dim(0);
  if (w.dim(1) != d) {
    throw ShapeMismatch("linear weight " + w.value().shape_string() + " vs input " +
                        x.value().shape_string());
  }
  Tensor out({n, o});
  gemm(false, true, n, o, d, Real(1), x.value().data(), d, w.value().data(), d, Real(0), out.data(),
       o);
  if (b.defined()) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < o; ++j) out[static_cast<std::size_t>(i) * o + j] += b.value()[j];
    }
  }
  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  const bool has_bias = b.defined();
  return make_var(std::move(out), std::move(parents), [n, d, o, has_bias](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    if (px.requires_grad) {
      gemm(false, false, n, d, o, Real(1), self.grad.data(), o, pw.value.data(), d, Real(1),
           px.grad.data(), d);
    }
    if (pw.requires_grad) {
      gemm(true, false, o, d, n, Real(1), self.grad.data(), o, px.value.data(), d, Real(1),
           pw.grad.data(), d);
    }
    if (has_bias && parent(self, 2).requires_grad) {
      Tensor& gb = parent(self, 2).grad;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < o; ++j) gb[j] += self.grad[static_cast<std::size_t>(i) * o + j];
      }
    }
  });
}

Var pixel_shuffle(const Var& x, int factor) {
  require_rank(x, 4, "pixel_shuffle");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int rr = factor * factor;
  if (factor < 1 || cin % rr != 0) throw ShapeMismatch("pixel_shuffle channel count");
  const int c = cin / rr;
  Tensor out({n, c, h * factor, w * factor});
  auto index_in = [=](int b, int ch, int i, int j, int y, int xx) {
    return ((static_cast<std::size_t>(b) * cin + ch * rr + i * factor + j) * h + y) * w + xx;
  };
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int i = 0; i < factor; ++i)
          for (int xx = 0; xx < w; ++xx)
            for (int j = 0; j < factor; ++j)
              out.at(b, ch, y * factor + i, xx * factor + j) = x.value()[index_in(b, ch, i, j, y, xx)];
  return make_var(std::move(out), {x}, [=](Node& self) {
    Tensor& g = parent(self, 0).grad;
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int i = 0; i < factor; ++i)
            for (int xx = 0; xx < w; ++xx)
              for (int j = 0; j < factor; ++j)
                g[index_in(b, ch, i, j, y, xx)] += self.grad.at(b, ch, y * factor + i, xx * factor + j);
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  if (b.dim(0) != n || b.dim(2) != a.dim(2) || b.dim(3) != a.dim(3)) {
    throw ShapeMismatch("concat_channels " + a.value().shape_string() + " with " +
                        b.value().shape_string());
  }
  Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
  const std::size_t sa = static_cast<std::size_t>(ca) * hw, sb = static_cast<std::size_t>(cb) * hw;
  for (int i = 0; i < n; ++i) {
    std::copy(a.value().data() + i * sa, a.value().data() + (i + 1) * sa, out.data() + i * (sa + sb));
    std::copy(b.value().data() + i * sb, b.value().data() + (i + 1) * sb,
              out.data() + i * (sa + sb) + sa);
  }
  return make_var(std::move(out), {a, b}, [n, sa, sb](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    for (int i = 0; i < n; ++i) {
      const Real* g = self.grad.data() + i * (sa + sb);
      if (pa.requires_grad) {
        for (std::size_t j = 0; j < sa; ++j) pa.grad[i * sa + j] += g[j];
      }
      if (pb.requires_grad) {
        for (std::size_t j = 0; j < sb; ++j) pb.grad[i * sb + j] += g[sa + j];
      }
    }
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_var(std::move(out), {a}, [](Node& self) {
    Tensor& g = parent(self, 0).grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var flatten(const Var& a) {
  const int n = a.dim(0);
  return reshape(a, {n, static_cast<int>(a.value().numel() / static_cast<std::size_t>(n))});
}

Var channel_gate(const Var& x, const Var& gate) {
  require_rank(x, 4, "channel_gate");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gate.value().numel() != static_cast<std::size_t>(c)) {
    throw ShapeMismatch("channel_gate: " + std::to_string(gate.value().numel()) +
                        " gates for " + std::to_string(c) + " channels");
  }
  Tensor out = x.value();
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      Real* p = out.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
      const Real v = gate.value()[ch];
      for (int j = 0; j < hw; ++j) p[j] *= v;
    }
  }
  return make_var(std::move(out), {x, gate}, [n, c, hw](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
        double dg = 0;
        for (int j = 0; j < hw; ++j) {
          if (px.requires_grad) px.grad[off + j] += self.grad[off + j] * pg.value[ch];
          dg += self.grad[off + j] * px.value[off + j];
        }
        if (pg.requires_grad) pg.grad[ch] += static_cast<Real>(dg);
      }
    }
  });
}

Var spatial_mask(const Var& x, const Var& m) {
  require_rank(x, 4, "spatial_mask input");
  require_rank(m, 4, "spatial_mask mask");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (m.dim(0) != n || m.dim(1) != 1 || m.dim(2) != x.dim(2) || m.dim(3) != x.dim(3)) {
    throw ShapeMismatch("spatial_mask " + m.value().shape_string() + " for input " +
                        x.value().shape_string());
  }
  Tensor out = x.value();
  for (int i = 0; i < n; ++i) {
    const Real* mp = m.value().data() + static_cast<std::size_t>(i) * hw;
    for (int ch = 0; ch < c; ++ch) {
      Real* p = out.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
      for (int j = 0; j < hw; ++j) p[j] *= mp[j];
    }
  }
  return make_var(std::move(out), {x, m}, [n, c, hw](Node& self) {
    Node& px = parent(self, 0);
    Node& pm = parent(self, 1);
    for (int i = 0; i < n; ++i) {
      const std::size_t moff = static_cast<std::size_t>(i) * hw;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
        for (int j = 0; j < hw; ++j) {
          if (px.requires_grad) px.grad[off + j] += self.grad[off + j] * pm.value[moff + j];
          if (pm.requires_grad) pm.grad[moff + j] += self.grad[off + j] * px.value[off + j];
        }
      }
    }
  });
}

Var log_softmax(const Var& logits) {
  require_rank(logits, 2, "log_softmax");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor out({n, k});
  for (int i = 0; i < n; ++i) {
    const Real* row = logits.value().data() + static_cast<std::size_t>(i) * k;
    const Real mx = *std::max_element(row, row + k);
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const Real lz = mx + static_cast<Real>(std::log(z));
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = row[j] - lz;
  }
  return make_var(std::move(out), {logits}, [n, k](Node& self) {
    Tensor& g = parent(self, 0).grad;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      double gs = 0;
      for (int j = 0; j < k; ++j) gs += self.grad[off + j];
      for (int j = 0; j < k; ++j) {
        g[off + j] += self.grad[off + j] - std::exp(self.value[off + j]) * static_cast<Real>(gs);
      }
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(n)) throw ShapeMismatch("cross_entropy labels");
  Var logp = log_softmax(logits);
  Tensor picked({n});
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw InvalidParameter("label out of range");
  }
  double total = 0;
  for (int i = 0; i < n; ++i) total -= logp.value()[static_cast<std::size_t>(i) * k + labels[i]];
  std::vector<int> lab(labels.begin(), labels.end());
  return make_var(Tensor::scalar(static_cast<Real>(total / n)), {logp},
                  [lab = std::move(lab), n, k](Node& self) {
                    Tensor& g = parent(self, 0).grad;
                    const Real d = self.grad[0] / static_cast<Real>(n);
                    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i) * k + lab[i]] -= d;
                  });
}

Var kl_rows(const Tensor& target, const Var& log_q, Real q_floor) {
  require_rank(log_q, 2, "kl_rows");
  if (!target.same_shape(log_q.value())) {
    throw ShapeMismatch("kl_rows target " + target.shape_string() + " vs " +
                        log_q.value().shape_string());
  }
  const int n = log_q.dim(0), k = log_q.dim(1);
  const Real log_floor = std::log(q_floor);
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double total = 0;
    for (int j = 0; j < k; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * k + j;
      const Real p = target[idx];
      if (p <= 0) continue;
      total += p * (std::log(p) - std::max(log_q.value()[idx], log_floor));
    }
    out[i] = static_cast<Real>(total);
  }
  return make_var(std::move(out), {log_q}, [target, n, k, log_floor](Node& self) {
    Node& pq = parent(self, 0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * k + j;
        if (pq.value[idx] > log_floor) pq.grad[idx] -= self.grad[i] * target[idx];
      }
    }
  });
}

Var column(const Var& a, int k) {
  require_rank(a, 2, "column");
  const int n = a.dim(0), cols = a.dim(1);
  if (k < 0 || k >= cols) throw ShapeMismatch("column index");
  Tensor out({n});
  for (int i = 0; i < n; ++i) out[i] = a.value()[static_cast<std::size_t>(i) * cols + k];
  return make_var(std::move(out), {a}, [n, cols, k](Node& self) {
    Tensor& g = parent(self, 0).grad;
    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i) * cols + k] += self.grad[i];
  });
}

Var stack_columns(const std::vector<Var>& cols) {
  if (cols.empty()) throw ShapeMismatch("stack_columns of nothing");
  const int n = cols.front().dim(0), k = static_cast<int>(cols.size());
  Tensor out({n, k});
  for (int j = 0; j < k; ++j) {
    if (cols[j].value().numel() != static_cast<std::size_t>(n)) throw ShapeMismatch("stack_columns");
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i) * k + j] = cols[j].value()[i];
  }
  return make_var(std::move(out), cols, [n, k](Node& self) {
    for (int j = 0; j < k; ++j) {
      Node& p = parent(self, j);
      if (!p.requires_grad) continue;
      for (int i = 0; i < n; ++i) p.grad[i] += self.grad[static_cast<std::size_t>(i) * k + j];
    }
  });
}

Var feature_filter(const Var& x, const Var& table, std::span<const int> labels) {
  require_rank(x, 4, "feature_filter input");
  require_rank(table, 2, "feature_filter table");
  const int n = x.dim(0), d = x.dim(1), hw = x.dim(2) * x.dim(3), classes = table.dim(0);
  if (table.dim(1) != d) {
    throw ShapeMismatch("feature_filter embedding width " + std::to_string(table.dim(1)) +
                        " vs feature depth " + std::to_string(d));
  }
  if (labels.size() != static_cast<std::size_t>(n)) throw ShapeMismatch("feature_filter labels");
  for (int y : labels) {
    if (y < 0 || y >= classes) throw InvalidParameter("feature_filter class index out of range");
  }
  Tensor gate({n, hw});
  Tensor out = x.value();
  const Tensor& xv = x.value();
  for (int i = 0; i < n; ++i) {
    const Real* emb = table.value().data() + static_cast<std::size_t>(labels[i]) * d;
    for (int j = 0; j < hw; ++j) {
      double s = 0;
      for (int ch = 0; ch < d; ++ch) s += xv[(static_cast<std::size_t>(i) * d + ch) * hw + j] * emb[ch];
      const Real a = static_cast<Real>(1.0 / (1.0 + std::exp(-s)));
      gate[static_cast<std::size_t>(i) * hw + j] = a;
      for (int ch = 0; ch < d; ++ch) out[(static_cast<std::size_t>(i) * d + ch) * hw + j] *= a;
    }
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_var(std::move(out), {x, table},
                  [gate = std::move(gate), lab = std::move(lab), n, d, hw](Node& self) {
                    Node& px = parent(self, 0);
                    Node& pt = parent(self, 1);
                    for (int i = 0; i < n; ++i) {
                      const std::size_t erow = static_cast<std::size_t>(lab[i]) * d;
                      for (int j = 0; j < hw; ++j) {
                        const Real a = gate[static_cast<std::size_t>(i) * hw + j];
                        double dz_x = 0;
                        for (int ch = 0; ch < d; ++ch) {
                          const std::size_t idx = (static_cast<std::size_t>(i) * d + ch) * hw + j;
                          dz_x += self.grad[idx] * px.value[idx];
                        }
                        const Real ds = static_cast<Real>(dz_x) * a * (Real(1) - a);
                        for (int ch = 0; ch < d; ++ch) {
                          const std::size_t idx = (static_cast<std::size_t>(i) * d + ch) * hw + j;
                          if (px.requires_grad) {
                            px.grad[idx] += self.grad[idx] * a + ds * pt.value[erow + ch];
                          }
                          if (pt.requires_grad) pt.grad[erow + ch] += ds * px.value[idx];
                        }
                      }
                    }
                  });
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeMismatch("softmax_rows expects [N, K]");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor out({n, k});
  for (int i = 0; i < n; ++i) {
    const Real* row = logits.data() + static_cast<std::size_t>(i) * k;
    const Real mx = *std::max_element(row, row + k);
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < k; ++j) {
      out[static_cast<std::size_t>(i) * k + j] =
          static_cast<Real>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) {
    const Real* row = logits.data() + static_cast<std::size_t>(i) * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

}  // namespace saliprune::ops
