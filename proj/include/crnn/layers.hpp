// SPDX-License-Identifier: Apache-2.0
//
// Forward and backward passes for every layer of the network. Each layer
// object holds only the cache of its last forward call; parameters are passed
// in by the caller and parameter gradients are accumulated into caller-owned
// tensors. backward() consumes the cache.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "crnn/error.hpp"
#include "crnn/rng.hpp"
#include "crnn/tensor.hpp"

namespace crnn::layers {

enum class Mode { train, infer };

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline void require_cache(bool ok, const char* layer) {
  if (!ok) throw StateError(std::string(layer) + ": backward called without a cached forward");
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// 3x3 cross-correlation over the (T, F) plane with zero "same" padding.
/// x: [B x T x F x Cin], kernel: [3 x 3 x Cin x Cout], bias: [Cout].
class Conv2d {
 public:
  static constexpr std::size_t kSize = 3;

  Tensor forward(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    detail::require(x.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(x.shape()));
    detail::require(kernel.rank() == 4 && kernel.dim(0) == kSize && kernel.dim(1) == kSize,
                    "conv2d: kernel must be 3x3xCinxCout, got " + shape_str(kernel.shape()));
    detail::require(kernel.dim(2) == x.dim(3),
                    "conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs kernel " +
                        shape_str(kernel.shape()));
    detail::require(bias.rank() == 1 && bias.dim(0) == kernel.dim(3),
                    "conv2d: bias shape " + shape_str(bias.shape()) + " vs kernel " +
                        shape_str(kernel.shape()));
    const std::size_t B = x.dim(0), T = x.dim(1), F = x.dim(2), Ci = x.dim(3), Co = kernel.dim(3);
    Tensor out({B, T, F, Co});
    const double* px = x.data();
    const double* pk = kernel.data();
    double* po = out.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < F; ++f) {
          double* o = po + ((b * T + t) * F + f) * Co;
          for (std::size_t co = 0; co < Co; ++co) o[co] = bias[co];
          for (std::size_t i = 0; i < kSize; ++i) {
            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + i) - 1;
            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
            for (std::size_t j = 0; j < kSize; ++j) {
              const std::ptrdiff_t fj = static_cast<std::ptrdiff_t>(f + j) - 1;
              if (fj < 0 || fj >= static_cast<std::ptrdiff_t>(F)) continue;
              const double* xin =
                  px + ((b * T + static_cast<std::size_t>(ti)) * F + static_cast<std::size_t>(fj)) * Ci;
              const double* kk = pk + (i * kSize + j) * Ci * Co;
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                const double xv = xin[ci];
                for (std::size_t co = 0; co < Co; ++co) o[co] += xv * kk[ci * Co + co];
              }
            }
          }
        }
    input_ = x;
    kernel_ = kernel;
    return out;
  }

  /// Returns dL/dx; accumulates dL/dkernel and dL/dbias.
  Tensor backward(const Tensor& grad_out, Tensor& grad_kernel, Tensor& grad_bias) {
    detail::require_cache(input_.has_value(), "conv2d");
    const Tensor& x = *input_;
    const Tensor& kernel = *kernel_;
    const std::size_t B = x.dim(0), T = x.dim(1), F = x.dim(2), Ci = x.dim(3), Co = kernel.dim(3);
    detail::require(grad_out.shape() == Shape({B, T, F, Co}), "conv2d: grad shape mismatch");
    grad_kernel.require_same_shape(kernel, "conv2d grad_kernel");
    grad_bias.require_same_shape(Tensor({Co}), "conv2d grad_bias");

    Tensor grad_in(x.shape());
    const double* px = x.data();
    const double* pk = kernel.data();
    const double* pg = grad_out.data();
    double* pgi = grad_in.data();
    double* pgk = grad_kernel.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < F; ++f) {
          const double* g = pg + ((b * T + t) * F + f) * Co;
          for (std::size_t co = 0; co < Co; ++co) grad_bias[co] += g[co];
          for (std::size_t i = 0; i < kSize; ++i) {
            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + i) - 1;
            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
            for (std::size_t j = 0; j < kSize; ++j) {
              const std::ptrdiff_t fj = static_cast<std::ptrdiff_t>(f + j) - 1;
              if (fj < 0 || fj >= static_cast<std::ptrdiff_t>(F)) continue;
              const std::size_t in_off =
                  ((b * T + static_cast<std::size_t>(ti)) * F + static_cast<std::size_t>(fj)) * Ci;
              const std::size_t k_off = (i * kSize + j) * Ci * Co;
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                double acc = 0.0;
                const double xv = px[in_off + ci];
                for (std::size_t co = 0; co < Co; ++co) {
                  acc += pk[k_off + ci * Co + co] * g[co];
                  pgk[k_off + ci * Co + co] += xv * g[co];
                }
                pgi[in_off + ci] += acc;
              }
            }
          }
        }
    input_.reset();
    kernel_.reset();
    return grad_in;
  }

 private:
  std::optional<Tensor> input_;
  std::optional<Tensor> kernel_;
};

// ---------------------------------------------------------------------------

/// Per-channel batch normalisation; the channel is the last axis.
/// Train mode normalises with the biased batch variance and updates the
/// running statistics as running = momentum * running + (1 - momentum) * batch.
class BatchNorm {
 public:
  BatchNorm(double eps = 1e-3, double momentum = 0.99) : eps_(eps), momentum_(momentum) {}

  Tensor forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, Mode mode) {
    detail::require(x.rank() >= 1, "batchnorm: input must have a channel axis");
    const std::size_t C = x.shape().back();
    for (const Tensor* p : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                            static_cast<const Tensor*>(&running_var)}) {
      detail::require(p->shape() == Shape({C}), "batchnorm: parameter shape " +
                                                    shape_str(p->shape()) + " vs " +
                                                    std::to_string(C) + " channels");
    }
    const std::size_t N = x.size() / C;
    std::vector<double> mean(C, 0.0), var(C, 0.0);
    if (mode == Mode::train) {
      if (N < 2) throw InputError("batchnorm: train mode needs at least two values per channel");
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) mean[c] += x[n * C + c];
      for (double& m : mean) m /= static_cast<double>(N);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const double d = x[n * C + c] - mean[c];
          var[c] += d * d;
        }
      for (double& v : var) v /= static_cast<double>(N);
      for (std::size_t c = 0; c < C; ++c) {
        running_mean[c] = momentum_ * running_mean[c] + (1.0 - momentum_) * mean[c];
        running_var[c] = momentum_ * running_var[c] + (1.0 - momentum_) * var[c];
      }
    } else {
      for (std::size_t c = 0; c < C; ++c) {
        mean[c] = running_mean[c];
        var[c] = running_var[c];
      }
    }

    Cache cache;
    cache.mode = mode;
    cache.inv_std.resize(C);
    for (std::size_t c = 0; c < C; ++c) cache.inv_std[c] = 1.0 / std::sqrt(var[c] + eps_);
    cache.xhat = Tensor(x.shape());
    Tensor out(x.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const double xh = (x[n * C + c] - mean[c]) * cache.inv_std[c];
        cache.xhat[n * C + c] = xh;
        out[n * C + c] = gamma[c] * xh + beta[c];
      }
    cache.gamma = gamma;
    cache_ = std::move(cache);
    return out;
  }

  Tensor backward(const Tensor& grad_out, Tensor& grad_gamma, Tensor& grad_beta) {
    detail::require_cache(cache_.has_value(), "batchnorm");
    const Cache& c = *cache_;
    grad_out.require_same_shape(c.xhat, "batchnorm backward");
    const std::size_t C = c.gamma.size();
    const std::size_t N = grad_out.size() / C;
    std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double g = grad_out[n * C + ch];
        sum_g[ch] += g;
        sum_gx[ch] += g * c.xhat[n * C + ch];
      }
    for (std::size_t ch = 0; ch < C; ++ch) {
      grad_gamma[ch] += sum_gx[ch];
      grad_beta[ch] += sum_g[ch];
    }
    Tensor grad_in(grad_out.shape());
    const double inv_n = 1.0 / static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double g = grad_out[n * C + ch];
        const double scale = c.gamma[ch] * c.inv_std[ch];
        if (c.mode == Mode::train) {
          grad_in[n * C + ch] =
              scale * (g - inv_n * sum_g[ch] - c.xhat[n * C + ch] * inv_n * sum_gx[ch]);
        } else {
          grad_in[n * C + ch] = scale * g;
        }
      }
    cache_.reset();
    return grad_in;
  }

 private:
  struct Cache {
    Mode mode = Mode::train;
    Tensor xhat;
    Tensor gamma;
    std::vector<double> inv_std;
  };
  double eps_;
  double momentum_;
  std::optional<Cache> cache_;
};

// ---------------------------------------------------------------------------

class Relu {
 public:
  Tensor forward(const Tensor& x) {
    Tensor out(x);
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    output_ = out;
    return out;
  }

  Tensor backward(const Tensor& grad_out) {
    detail::require_cache(output_.has_value(), "relu");
    grad_out.require_same_shape(*output_, "relu backward");
    Tensor g(grad_out);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!((*output_)[i] > 0.0)) g[i] = 0.0;
    }
    output_.reset();
    return g;
  }

 private:
  std::optional<Tensor> output_;
};

// ---------------------------------------------------------------------------

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1 - rate). Identity in infer mode.
class Dropout {
 public:
  Tensor forward(const Tensor& x, double rate, Rng& rng, Mode mode) {
    check_dropout_rate(rate);
    Tensor mask(x.shape(), 1.0);
    if (mode == Mode::train && rate > 0.0) {
      const double keep = 1.0 / (1.0 - rate);
      for (double& m : mask.values()) m = rng.uniform01() < rate ? 0.0 : keep;
    }
    return forward_with_mask(x, std::move(mask));
  }

  /// Applies a caller-supplied multiplicative mask (already scaled).
  Tensor forward_with_mask(const Tensor& x, Tensor mask) {
    x.require_same_shape(mask, "dropout mask");
    Tensor out(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    mask_ = std::move(mask);
    return out;
  }

  Tensor backward(const Tensor& grad_out) {
    detail::require_cache(mask_.has_value(), "dropout");
    grad_out.require_same_shape(*mask_, "dropout backward");
    Tensor g(grad_out);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= (*mask_)[i];
    mask_.reset();
    return g;
  }

 private:
  std::optional<Tensor> mask_;
};

// ---------------------------------------------------------------------------

/// Affine map xW + b applied to the last axis, identically at every leading
/// index (time-distributed, weights shared across time).
class Dense {
 public:
  Tensor forward(const Tensor& x, const Tensor& W, const Tensor& b) {
    detail::require(x.rank() >= 1 && W.rank() == 2 && x.shape().back() == W.dim(0),
                    "dense: input " + shape_str(x.shape()) + " incompatible with weights " +
                        shape_str(W.shape()));
    detail::require(b.shape() == Shape({W.dim(1)}),
                    "dense: bias " + shape_str(b.shape()) + " vs weights " + shape_str(W.shape()));
    const std::size_t D = W.dim(0), U = W.dim(1), N = x.size() / D;
    Tensor y = matmul(x.reshaped({N, D}), W);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t u = 0; u < U; ++u) y[n * U + u] += b[u];
    Shape out_shape = x.shape();
    out_shape.back() = U;
    input_ = x;
    weights_ = W;
    return y.reshaped(out_shape);
  }

  Tensor backward(const Tensor& grad_out, Tensor& grad_W, Tensor& grad_b) {
    detail::require_cache(input_.has_value(), "dense");
    const Tensor& x = *input_;
    const Tensor& W = *weights_;
    const std::size_t D = W.dim(0), U = W.dim(1), N = x.size() / D;
    detail::require(grad_out.size() == N * U, "dense: grad shape " + shape_str(grad_out.shape()));
    const Tensor g = grad_out.reshaped({N, U});
    grad_W += matmul(transpose(x.reshaped({N, D})), g);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t u = 0; u < U; ++u) grad_b[u] += g[n * U + u];
    Tensor grad_in = matmul(g, transpose(W)).reshaped(x.shape());
    input_.reset();
    weights_.reset();
    return grad_in;
  }

 private:
  std::optional<Tensor> input_;
  std::optional<Tensor> weights_;
};

// ---------------------------------------------------------------------------

/// Weights of one GRU direction. Gate blocks are packed column-wise in the
/// order (update z, reset r, candidate h~): W is [D x 3H], U is [H x 3H], b is [3H].
struct GruWeights {
  const Tensor& W;
  const Tensor& U;
  const Tensor& b;
};

struct GruGrads {
  Tensor& W;
  Tensor& U;
  Tensor& b;
};

/// Bidirectional GRU over x: [B x L x D] -> [B x L x 2H], forward-direction
/// state first. Per direction, with zero initial state:
///
///   z  = sigmoid(x W_z + h U_z + b_z)
///   r  = sigmoid(x W_r + h U_r + b_r)
///   h~ = tanh(x W_h + (r * h) U_h + b_h)
///   h' = z * h + (1 - z) * h~
///
/// The backward direction reads the sequence from the last step to the first;
/// its state at step t is written to output step t.
class BiGru {
 public:
  Tensor forward(const Tensor& x, const GruWeights& fw, const GruWeights& bw) {
    detail::require(x.rank() == 3, "gru: input must be [B x L x D], got " + shape_str(x.shape()));
    const std::size_t H = check_weights(x.dim(2), fw);
    detail::require(check_weights(x.dim(2), bw) == H, "gru: directions differ in width");
    const std::size_t B = x.dim(0), L = x.dim(1);
    Tensor out({B, L, 2 * H});
    Cache cache;
    cache.input = x;
    cache.dirs[0] = run(x, fw, false, out, 0);
    cache.dirs[1] = run(x, bw, true, out, H);
    cache_ = std::move(cache);
    return out;
  }

  Tensor backward(const Tensor& grad_out, const GruGrads& fw, const GruGrads& bw) {
    detail::require_cache(cache_.has_value(), "gru");
    const Tensor& x = cache_->input;
    const std::size_t B = x.dim(0), L = x.dim(1);
    const std::size_t H = cache_->dirs[0].H;
    detail::require(grad_out.shape() == Shape({B, L, 2 * H}), "gru: grad shape mismatch");
    Tensor grad_in(x.shape());
    back(cache_->dirs[0], x, grad_out, 0, false, fw, grad_in);
    back(cache_->dirs[1], x, grad_out, H, true, bw, grad_in);
    cache_.reset();
    return grad_in;
  }

 private:
  struct DirCache {
    std::size_t H = 0;
    Tensor W, U;
    // Indexed [step][b][h] in processing order.
    std::vector<std::vector<double>> h_prev, z, r, cand;
  };
  struct Cache {
    Tensor input;
    DirCache dirs[2];
  };

  static std::size_t check_weights(std::size_t D, const GruWeights& w) {
    detail::require(w.U.rank() == 2 && w.U.dim(1) == 3 * w.U.dim(0),
                    "gru: recurrent weights must be [H x 3H], got " + shape_str(w.U.shape()));
    const std::size_t H = w.U.dim(0);
    detail::require(w.W.shape() == Shape({D, 3 * H}),
                    "gru: input weights " + shape_str(w.W.shape()) + " expected [" +
                        std::to_string(D) + "x" + std::to_string(3 * H) + "]");
    detail::require(w.b.shape() == Shape({3 * H}), "gru: bias shape " + shape_str(w.b.shape()));
    return H;
  }

  static DirCache run(const Tensor& x, const GruWeights& w, bool reverse, Tensor& out,
                      std::size_t out_offset) {
    const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    const std::size_t H = w.U.dim(0), G = 3 * H;
    DirCache c;
    c.H = H;
    c.W = w.W;
    c.U = w.U;
    c.h_prev.assign(L, std::vector<double>(B * H));
    c.z = c.r = c.cand = c.h_prev;

    std::vector<double> h(B * H, 0.0), a(G), rh(H);
    for (std::size_t step = 0; step < L; ++step) {
      const std::size_t t = reverse ? L - 1 - step : step;
      for (std::size_t bi = 0; bi < B; ++bi) {
        double* hb = &h[bi * H];
        for (std::size_t g = 0; g < G; ++g) a[g] = w.b[g];
        for (std::size_t d = 0; d < D; ++d) {
          const double xv = x(bi, t, d);
          const double* wr = w.W.data() + d * G;
          for (std::size_t g = 0; g < G; ++g) a[g] += xv * wr[g];
        }
        for (std::size_t k = 0; k < H; ++k) {
          const double* ur = w.U.data() + k * G;
          for (std::size_t g = 0; g < 2 * H; ++g) a[g] += hb[k] * ur[g];
        }
        for (std::size_t j = 0; j < H; ++j) {
          c.h_prev[step][bi * H + j] = hb[j];
          c.z[step][bi * H + j] = sigmoid(a[j]);
          c.r[step][bi * H + j] = sigmoid(a[H + j]);
          rh[j] = c.r[step][bi * H + j] * hb[j];
        }
        for (std::size_t k = 0; k < H; ++k) {
          const double* ur = w.U.data() + k * G + 2 * H;
          for (std::size_t j = 0; j < H; ++j) a[2 * H + j] += rh[k] * ur[j];
        }
        for (std::size_t j = 0; j < H; ++j) {
          const double cand = std::tanh(a[2 * H + j]);
          const double z = c.z[step][bi * H + j];
          c.cand[step][bi * H + j] = cand;
          hb[j] = z * hb[j] + (1.0 - z) * cand;
          out(bi, t, out_offset + j) = hb[j];
        }
      }
    }
    return c;
  }

  static void back(const DirCache& c, const Tensor& x, const Tensor& grad_out,
                   std::size_t out_offset, bool reverse, const GruGrads& grads, Tensor& grad_in) {
    const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    const std::size_t H = c.H, G = 3 * H;
    std::vector<double> dh_next(B * H, 0.0), da(G), drh(H), dh(H);
    for (std::size_t step = L; step-- > 0;) {
      const std::size_t t = reverse ? L - 1 - step : step;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const double* hp = &c.h_prev[step][bi * H];
        const double* z = &c.z[step][bi * H];
        const double* r = &c.r[step][bi * H];
        const double* cand = &c.cand[step][bi * H];
        double* dprev = &dh_next[bi * H];
        for (std::size_t j = 0; j < H; ++j) dh[j] = grad_out(bi, t, out_offset + j) + dprev[j];

        // candidate and update gate
        for (std::size_t j = 0; j < H; ++j) {
          const double dz = dh[j] * (hp[j] - cand[j]);
          const double dcand = dh[j] * (1.0 - z[j]);
          da[j] = dz * z[j] * (1.0 - z[j]);
          da[2 * H + j] = dcand * (1.0 - cand[j] * cand[j]);
          dprev[j] = dh[j] * z[j];
        }
        // (r * h) U_h
        for (std::size_t k = 0; k < H; ++k) {
          double acc = 0.0;
          const double* ur = c.U.data() + k * G + 2 * H;
          double* gur = grads.U.data() + k * G + 2 * H;
          const double rh = r[k] * hp[k];
          for (std::size_t j = 0; j < H; ++j) {
            acc += ur[j] * da[2 * H + j];
            gur[j] += rh * da[2 * H + j];
          }
          drh[k] = acc;
        }
        for (std::size_t k = 0; k < H; ++k) {
          const double dr = drh[k] * hp[k];
          dprev[k] += drh[k] * r[k];
          da[H + k] = dr * r[k] * (1.0 - r[k]);
        }
        // h U_{z,r}
        for (std::size_t k = 0; k < H; ++k) {
          const double* ur = c.U.data() + k * G;
          double* gur = grads.U.data() + k * G;
          double acc = 0.0;
          for (std::size_t g = 0; g < 2 * H; ++g) {
            acc += ur[g] * da[g];
            gur[g] += hp[k] * da[g];
          }
          dprev[k] += acc;
        }
        // x W + b
        for (std::size_t g = 0; g < G; ++g) grads.b[g] += da[g];
        for (std::size_t d = 0; d < D; ++d) {
          const double xv = x(bi, t, d);
          const double* wr = c.W.data() + d * G;
          double* gwr = grads.W.data() + d * G;
          double acc = 0.0;
          for (std::size_t g = 0; g < G; ++g) {
            acc += wr[g] * da[g];
            gwr[g] += xv * da[g];
          }
          grad_in(bi, t, d) += acc;
        }
      }
    }
  }

  std::optional<Cache> cache_;
};

// ---------------------------------------------------------------------------

/// Maxout output head: y[n, o] = max_k (x[n, :] . W[k, :, o] + b[k, o]),
/// weights shared across time. x: [... x D], W: [K x D x O], b: [K x O].
class Maxout {
 public:
  Tensor forward(const Tensor& x, const Tensor& W, const Tensor& b) {
    detail::require(W.rank() == 3 && W.dim(0) >= 2, "maxout: pieces must be [K x D x O] with K >= 2, got " +
                                                        shape_str(W.shape()));
    const std::size_t K = W.dim(0), D = W.dim(1), O = W.dim(2);
    detail::require(x.rank() >= 1 && x.shape().back() == D,
                    "maxout: input " + shape_str(x.shape()) + " vs pieces " + shape_str(W.shape()));
    detail::require(b.shape() == Shape({K, O}), "maxout: bias shape " + shape_str(b.shape()));
    const std::size_t N = x.size() / D;
    Shape out_shape = x.shape();
    out_shape.back() = O;
    Tensor out(out_shape);
    std::vector<std::size_t> argmax(N * O, 0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        double best = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          double v = b(k, o);
          for (std::size_t d = 0; d < D; ++d) v += x[n * D + d] * W(k, d, o);
          if (k == 0 || v > best) {
            best = v;
            argmax[n * O + o] = k;
          }
        }
        out[n * O + o] = best;
      }
    cache_ = Cache{x, W, std::move(argmax)};
    return out;
  }

  /// Gradient flows through the winning piece only.
  Tensor backward(const Tensor& grad_out, Tensor& grad_W, Tensor& grad_b) {
    detail::require_cache(cache_.has_value(), "maxout");
    const Tensor& x = cache_->input;
    const Tensor& W = cache_->weights;
    const std::size_t D = W.dim(1), O = W.dim(2), N = x.size() / D;
    detail::require(grad_out.size() == N * O, "maxout: grad shape mismatch");
    Tensor grad_in(x.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        const double g = grad_out[n * O + o];
        const std::size_t k = cache_->argmax[n * O + o];
        grad_b(k, o) += g;
        for (std::size_t d = 0; d < D; ++d) {
          grad_W(k, d, o) += x[n * D + d] * g;
          grad_in[n * D + d] += W(k, d, o) * g;
        }
      }
    cache_.reset();
    return grad_in;
  }

 private:
  struct Cache {
    Tensor input;
    Tensor weights;
    std::vector<std::size_t> argmax;
  };
  std::optional<Cache> cache_;
};

}  // namespace crnn::layers
