#pragma once

#include "dmamba/ops.hpp"

namespace dmamba {

enum class Mode { train, eval };

inline Tensor randn(Shape shape, std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor t = Tensor::uninit(std::move(shape));
  std::normal_distribution<double> d(mean, stddev);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = d(rng);
  return t;
}

inline Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t = Tensor::uninit(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = d(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out], undefined when the layer has no bias

  int64_t in() const { return weight.extent(1); }
  int64_t out() const { return weight.extent(0); }
};

inline LinearParams init_linear(int64_t in, int64_t out, bool with_bias, std::mt19937_64& rng,
                                double stddev = 0.02) {
  LinearParams p;
  p.weight = randn({out, in}, rng, 0.0, stddev);
  p.weight.set_requires_grad(true);
  if (with_bias) p.bias = Tensor::zeros({out}, /*requires_grad=*/true);
  return p;
}

struct LayerNormParams {
  Tensor gamma;  // [D]
  Tensor beta;   // [D]
  double epsilon = 1e-5;
};

inline LayerNormParams init_layer_norm(int64_t d) {
  LayerNormParams p;
  p.gamma = Tensor::full({d}, 1.0);
  p.gamma.set_requires_grad(true);
  p.beta = Tensor::zeros({d}, /*requires_grad=*/true);
  return p;
}

// Depthwise causal conv: one length-k filter per channel, no cross-channel
// mixing.
struct Conv1dParams {
  Tensor kernel;  // [C, k]
  Tensor bias;    // [C]

  int64_t channels() const { return kernel.extent(0); }
  int64_t kernel_size() const { return kernel.extent(1); }
};

inline Conv1dParams init_conv1d(int64_t channels, int64_t k, std::mt19937_64& rng,
                                double stddev = 0.02) {
  Conv1dParams p;
  p.kernel = randn({channels, k}, rng, 0.0, stddev);
  p.kernel.set_requires_grad(true);
  p.bias = Tensor::zeros({channels}, /*requires_grad=*/true);
  return p;
}

struct ChannelMlpParams {
  LinearParams up;    // [D -> 4D]
  LinearParams down;  // [4D -> D]
  double dropout_p = 0.1;
};

inline ChannelMlpParams init_channel_mlp(int64_t d, double dropout_p, std::mt19937_64& rng) {
  ChannelMlpParams p;
  p.up = init_linear(d, 4 * d, true, rng);
  p.down = init_linear(4 * d, d, true, rng);
  p.dropout_p = dropout_p;
  return p;
}

struct EmbeddingTable {
  Tensor table;  // [V, D]

  int64_t vocab() const { return table.extent(0); }
  int64_t dim() const { return table.extent(1); }
};

inline EmbeddingTable init_embedding(int64_t vocab, int64_t d, std::mt19937_64& rng,
                                     double stddev = 0.02) {
  EmbeddingTable e;
  e.table = randn({vocab, d}, rng, 0.0, stddev);
  e.table.set_requires_grad(true);
  return e;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

// y = x . weight^T + bias, applied over the last axis of x.
inline Tensor linear(const Tensor& x, const LinearParams& p) {
  detail::OpTimer optimer("linear");
  require(p.weight.dim() == 2, "linear weight must be 2-D, got ", shape_str(p.weight.shape()));
  const int64_t in = p.in(), out = p.out();
  require(x.dim() >= 1 && x.extent(x.dim() - 1) == in, "linear input ", shape_str(x.shape()),
          " incompatible with weight ", shape_str(p.weight.shape()));
  if (p.bias.defined())
    require(p.bias.numel() == out, "linear bias length ", p.bias.numel(), " != out ", out);

  const int64_t rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = out;
  Tensor y = Tensor::uninit(os);
  {
    ECMap X(x.data(), rows, in);
    ECMap W(p.weight.data(), out, in);
    EMap Y(y.data(), rows, out);
    Y.noalias() = X * W.transpose();
    if (p.bias.defined()) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(p.bias.data(), out);
  }

  const Tensor& w = p.weight;
  const Tensor& b = p.bias;
  if (grad_needed({&x, &w, &b})) {
    y.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = b, yc = y;
    Tape::active()->record("linear.b", {y}, [xc, wc, bc, yc, rows, in, out]() mutable {
      const double* go = yc.grad_or_null();
      if (!go) return;
      ECMap G(go, rows, out);
      if (xc.requires_grad()) {
        ECMap W(wc.data(), out, in);
        if (!xc.grad_allocated())
          EMap(xc.grad_uninit(), rows, in).noalias() = G * W;
        else
          EMap(xc.grad(), rows, in).noalias() += G * W;
      }
      if (wc.requires_grad()) {
        EMap GW(wc.grad(), out, in);
        ECMap X(xc.data(), rows, in);
        GW.noalias() += G.transpose() * X;
      }
      if (bc.defined() && bc.requires_grad())
        Eigen::Map<Eigen::RowVectorXd>(bc.grad(), out) += G.colwise().sum();
    });
  }
  return y;
}

// Per-position normalization over the channel axis, population variance.
inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  detail::OpTimer optimer("layernorm");
  const int64_t d = x.extent(x.dim() - 1);
  require(p.gamma.numel() == d && p.beta.numel() == d, "layer_norm params of length ",
          p.gamma.numel(), " do not match channel extent ", d);
  const int64_t rows = x.numel() / d;

  using AMap = Eigen::Map<Eigen::ArrayXd>;
  using CAMap = Eigen::Map<const Eigen::ArrayXd>;
  Tensor out = Tensor::uninit(x.shape());
  Tensor inv = Tensor::uninit({rows});  // saved 1/sigma per position
  Tensor mu = Tensor::uninit({rows});
  {
    CAMap G(p.gamma.data(), d), Bt(p.beta.data(), d);
    for (int64_t r = 0; r < rows; ++r) {
      CAMap X(x.data() + r * d, d);
      const double m = X.mean();
      const double var = (X - m).square().sum() / static_cast<double>(d);
      const double iv = 1.0 / std::sqrt(var + p.epsilon);
      mu.data()[r] = m;
      inv.data()[r] = iv;
      AMap(out.data() + r * d, d) = (X - m) * iv * G + Bt;
    }
  }

  const Tensor& gamma = p.gamma;
  const Tensor& beta = p.beta;
  if (grad_needed({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gamma, bc = beta, oc = out, ic = inv, mc = mu;
    Tape::active()->record("layernorm.b", {out}, [xc, gc, bc, oc, ic, mc, rows, d]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      CAMap G(gc.data(), d);
      Eigen::ArrayXd xhat(d), gg(d);
      for (int64_t r = 0; r < rows; ++r) {
        CAMap X(xc.data() + r * d, d), Go(go + r * d, d);
        const double iv = ic.data()[r];
        xhat = (X - mc.data()[r]) * iv;
        gg = Go * G;
        if (xc.requires_grad()) {
          const double gmean = gg.mean();
          const double gxmean = (gg * xhat).mean();
          AMap(xc.grad() + r * d, d) += iv * (gg - gmean - xhat * gxmean);
        }
        if (gc.requires_grad()) AMap(gc.grad(), d) += Go * xhat;
        if (bc.requires_grad()) AMap(bc.grad(), d) += Go;
      }
    });
  }
  return out;
}

// Strictly causal depthwise convolution along the sequence axis:
// y[b,t,c] = bias[c] + sum_j kernel[c,j] * x[b, t-(k-1)+j, c], zero-padded.
inline Tensor causal_conv1d(const Tensor& x, const Conv1dParams& p) {
  detail::OpTimer optimer("conv");
  require(x.dim() == 3, "causal_conv1d expects [B,L,C], got ", shape_str(x.shape()));
  const int64_t Bz = x.extent(0), L = x.extent(1), C = x.extent(2);
  const int64_t k = p.kernel_size();
  require(p.channels() == C, "conv kernel channels ", p.channels(),
          " do not match input channels ", C);

  Tensor y = Tensor::uninit(x.shape());
  const double* px = x.data();
  const double* pk = p.kernel.data();
  const double* pb = p.bias.data();
  double* py = y.data();
  for (int64_t b = 0; b < Bz; ++b)
    for (int64_t t = 0; t < L; ++t) {
      double* yr = py + (b * L + t) * C;
      for (int64_t c = 0; c < C; ++c) yr[c] = pb[c];
      for (int64_t j = 0; j < k; ++j) {
        const int64_t s = t - (k - 1) + j;
        if (s < 0) continue;
        const double* xr = px + (b * L + s) * C;
        for (int64_t c = 0; c < C; ++c) yr[c] += pk[c * k + j] * xr[c];
      }
    }

  const Tensor& kt = p.kernel;
  const Tensor& bt = p.bias;
  if (grad_needed({&x, &kt, &bt})) {
    y.set_requires_grad(true);
    Tensor xc = x, kc = kt, bc = bt, yc = y;
    Tape::active()->record("conv.b", {y}, [xc, kc, bc, yc, Bz, L, C, k]() mutable {
      const double* go = yc.grad_or_null();
      if (!go) return;
      double* gx = xc.requires_grad() ? xc.grad() : nullptr;
      double* gk = kc.requires_grad() ? kc.grad() : nullptr;
      double* gb = bc.requires_grad() ? bc.grad() : nullptr;
      const double* px2 = xc.data();
      const double* pk2 = kc.data();
      for (int64_t b = 0; b < Bz; ++b)
        for (int64_t t = 0; t < L; ++t) {
          const double* gr = go + (b * L + t) * C;
          if (gb)
            for (int64_t c = 0; c < C; ++c) gb[c] += gr[c];
          for (int64_t j = 0; j < k; ++j) {
            const int64_t s = t - (k - 1) + j;
            if (s < 0) continue;
            if (gx) {
              double* xr = gx + (b * L + s) * C;
              for (int64_t c = 0; c < C; ++c) xr[c] += pk2[c * k + j] * gr[c];
            }
            if (gk) {
              const double* xr = px2 + (b * L + s) * C;
              for (int64_t c = 0; c < C; ++c) gk[c * k + j] += xr[c] * gr[c];
            }
          }
        }
    });
  }
  return y;
}

// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
inline Tensor dropout(const Tensor& x, double p, Mode mode, std::mt19937_64& rng) {
  detail::OpTimer optimer("dropout");
  require(p >= 0.0 && p < 1.0, "dropout probability ", p, " outside [0,1)");
  if (mode == Mode::eval || p == 0.0) return x;
  Tensor mask = Tensor::uninit(x.shape());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double scale = 1.0 / (1.0 - p);
  for (int64_t i = 0; i < mask.numel(); ++i) mask.data()[i] = u(rng) < p ? 0.0 : scale;
  return mul(x, mask);
}

// Position-wise feedforward: Linear -> GELU -> Linear -> Dropout.
inline Tensor channel_mlp(const Tensor& x, const ChannelMlpParams& p, Mode mode,
                          std::mt19937_64& rng) {
  Tensor h = linear(gelu(linear(x, p.up)), p.down);
  return dropout(h, p.dropout_p, mode, rng);
}

inline Tensor embed(const EmbeddingTable& table, const ITensor& ids) {
  return embedding_lookup(table.table, ids);
}

}  // namespace dmamba
