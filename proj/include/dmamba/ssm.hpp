#pragma once

#include "dmamba/nn.hpp"

namespace dmamba {

enum class ScanMode { sequential, parallel };

// Selective-SSM parameter bundle. The state matrix is diagonal per
// (channel, state) entry and stored as a_log with A = -exp(a_log), so the
// continuous system is strictly stable by construction.
struct SsmParams {
  Tensor a_log;          // [Din, N]
  LinearParams b_proj;   // Din -> N, no bias
  LinearParams c_proj;   // Din -> N, no bias
  int64_t dt_rank = 0;   // R
  LinearParams dt_down;  // Din -> R, no bias
  LinearParams dt_up;    // R -> Din
  Tensor dt_bias;        // [Din]

  int64_t din() const { return a_log.extent(0); }
  int64_t state() const { return a_log.extent(1); }
};

// softplus^-1(y) = ln(e^y - 1)
inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

// A[d,n] = -(n+1)  (S4D-real diagonal initialization);
// dt_bias = softplus^-1 of samples log-uniform in [0.001, 0.1].
inline SsmParams init_ssm(int64_t din, int64_t n_state, std::mt19937_64& rng) {
  SsmParams p;
  p.a_log = Tensor::uninit({din, n_state});
  for (int64_t d = 0; d < din; ++d)
    for (int64_t n = 0; n < n_state; ++n)
      p.a_log.data()[d * n_state + n] = std::log(static_cast<double>(n + 1));
  p.a_log.set_requires_grad(true);

  p.b_proj = init_linear(din, n_state, /*with_bias=*/false, rng);
  p.c_proj = init_linear(din, n_state, /*with_bias=*/false, rng);

  p.dt_rank = (din + 15) / 16;
  p.dt_down = init_linear(din, p.dt_rank, /*with_bias=*/false, rng);
  p.dt_up = init_linear(p.dt_rank, din, /*with_bias=*/true, rng);

  p.dt_bias = Tensor::uninit({din});
  std::uniform_real_distribution<double> u(std::log(0.001), std::log(0.1));
  for (int64_t d = 0; d < din; ++d) p.dt_bias.data()[d] = softplus_inverse(std::exp(u(rng)));
  p.dt_bias.set_requires_grad(true);
  return p;
}

// Delta = Softplus(dt_bias + dt_up(dt_down(x))), strictly positive.
inline Tensor compute_delta(const Tensor& x, const SsmParams& p) {
  return softplus(add(linear(linear(x, p.dt_down), p.dt_up), p.dt_bias));
}

// ---------------------------------------------------------------------------
// ZOH discretization
// ---------------------------------------------------------------------------

// phi(z) = (exp(z) - 1) / z, the B-bar factor of the ZOH rule. The series
// removes the 0/0 singularity at z = 0.
inline double phi_series(double z) {
  return 1.0 + z * (1.0 / 2.0 + z * (1.0 / 6.0 + z * (1.0 / 24.0)));
}
inline double phi_direct(double z) { return (std::exp(z) - 1.0) / z; }
inline double phi(double z) { return std::abs(z) < 1e-6 ? phi_series(z) : phi_direct(z); }

namespace detail {
// d phi / dz; series branch widened to |z| < 1e-3 where the direct form
// cancels catastrophically.
inline double phi_prime(double z, double exp_z) {
  if (std::abs(z) < 1e-3)
    return 1.0 / 2.0 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0)));
  return (exp_z * (z - 1.0) + 1.0) / (z * z);
}
}  // namespace detail

// Per-step discrete system: a_bar = exp(Delta*A) and the ready-made input
// injection b_bar_x = phi(Delta*A) * Delta * B * x, both [B,L,Din,N].
struct Discretized {
  Tensor a_bar;
  Tensor b_bar_x;
};

inline Discretized zoh_discretize(const Tensor& delta, const Tensor& a_log, const Tensor& b,
                                  const Tensor& x) {
  detail::OpTimer optimer("zoh");
  require(delta.dim() == 3 && x.dim() == 3 && b.dim() == 3 && a_log.dim() == 2,
          "zoh_discretize shapes: delta ", shape_str(delta.shape()), ", a_log ",
          shape_str(a_log.shape()), ", b ", shape_str(b.shape()), ", x ", shape_str(x.shape()));
  const int64_t Bz = delta.extent(0), L = delta.extent(1), Din = delta.extent(2);
  const int64_t N = a_log.extent(1);
  require(a_log.extent(0) == Din, "a_log rows ", a_log.extent(0), " != channel count ", Din);
  require(b.extent(0) == Bz && b.extent(1) == L && b.extent(2) == N, "B projection shape ",
          shape_str(b.shape()), " inconsistent with delta ", shape_str(delta.shape()));
  require(x.shape() == delta.shape(), "x shape ", shape_str(x.shape()), " != delta shape ",
          shape_str(delta.shape()));
  for (int64_t i = 0; i < delta.numel(); ++i)
    require(delta.data()[i] > 0.0, "zoh_discretize requires delta > 0, got ", delta.data()[i]);

  Discretized out;
  out.a_bar = Tensor::uninit({Bz, L, Din, N});
  out.b_bar_x = Tensor::uninit({Bz, L, Din, N});

  using AMap = Eigen::Map<Eigen::ArrayXd>;
  using CAMap = Eigen::Map<const Eigen::ArrayXd>;

  // A = -exp(a_log) and 1/A, flat [Din*N]; with A constant per (d,n) the
  // direct branch phi(z)*delta = (a_bar - 1)/A needs no per-element division.
  Tensor A_t = Tensor::uninit({Din, N});
  Tensor invA_t = Tensor::uninit({Din, N});
  AMap(A_t.data(), Din * N) = -CAMap(a_log.data(), Din * N).exp();
  AMap(invA_t.data(), Din * N) = 1.0 / CAMap(A_t.data(), Din * N);

  const int64_t slab = Din * N;
  Tensor z_scratch = Tensor::uninit({Din, N});
  for (int64_t bl = 0; bl < Bz * L; ++bl) {
    const double* dl = delta.data() + bl * Din;
    const double* xv = x.data() + bl * Din;
    CAMap bv(b.data() + bl * N, N);
    double* za = z_scratch.data();
    for (int64_t d = 0; d < Din; ++d)
      AMap(za + d * N, N) = dl[d] * CAMap(A_t.data() + d * N, N);
    double* ab = out.a_bar.data() + bl * slab;
    AMap(ab, slab) = CAMap(za, slab).exp();
    double* ub = out.b_bar_x.data() + bl * slab;
    for (int64_t d = 0; d < Din; ++d) {
      CAMap zrow(za + d * N, N), arow(ab + d * N, N), invA(invA_t.data() + d * N, N);
      // phi(z)*delta, series branch below |z| = 1e-6
      auto series = 1.0 + zrow * (0.5 + zrow * (1.0 / 6.0 + zrow * (1.0 / 24.0)));
      AMap(ub + d * N, N) = (zrow.abs() >= 1e-6).select((arow - 1.0) * invA, series * dl[d]) *
                            (xv[d] * bv);
    }
  }

  if (grad_needed({&delta, &a_log, &b, &x})) {
    out.a_bar.set_requires_grad(true);
    out.b_bar_x.set_requires_grad(true);
    Tensor dc = delta, lc = a_log, bc = b, xc = x, abar = out.a_bar, ubar = out.b_bar_x;
    Tape::active()->record(
        "zoh.b", {out.a_bar, out.b_bar_x},
        [dc, lc, bc, xc, abar, ubar, A_t, invA_t, Bz, L, Din, N]() mutable {
          const double* ga = abar.grad_or_null();
          const double* gu = ubar.grad_or_null();
          if (!ga && !gu) return;
          double* gd = dc.requires_grad() ? dc.grad() : nullptr;
          double* gl = lc.requires_grad() ? lc.grad() : nullptr;
          double* gb = bc.requires_grad() ? bc.grad() : nullptr;
          double* gx = xc.requires_grad() ? xc.grad() : nullptr;
          const int64_t slab = Din * N;
          Tensor invA2_t = Tensor::uninit({Din, N});
          AMap(invA2_t.data(), slab) = CAMap(invA_t.data(), slab).square();
          const double* Av = A_t.data();
          const double* inv1 = invA_t.data();
          const double* inv2 = invA2_t.data();
          for (int64_t bl = 0; bl < Bz * L; ++bl) {
            const double* dl = dc.data() + bl * Din;
            const double* xv = xc.data() + bl * Din;
            const double* bv = bc.data() + bl * N;
            const double* ab = abar.data() + bl * slab;
            const double* gar = ga ? ga + bl * slab : nullptr;
            const double* gur = gu ? gu + bl * slab : nullptr;
            double* gbr = gb ? gb + bl * N : nullptr;
            for (int64_t d = 0; d < Din; ++d) {
              const double dd = dl[d], xd = xv[d];
              const double inv_dd = 1.0 / dd, ddxd = dd * xd;
              const int64_t off = d * N;
              double acc_d = 0.0, acc_x = 0.0;
              // single fused pass; branchless selects vectorize cleanly
              for (int64_t n = 0; n < N; ++n) {
                const double An = Av[off + n];
                const double z = dd * An;
                const double e = ab[off + n];
                double dz = gar ? gar[off + n] * e : 0.0;
                if (gur) {
                  const double gun = gur[off + n];
                  const double phi_series =
                      1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0)));
                  const double phi =
                      std::abs(z) >= 1e-6 ? (e - 1.0) * inv1[off + n] * inv_dd : phi_series;
                  // d(phi)/dz, series widened to |z| < 1e-3 against
                  // catastrophic cancellation in the direct form
                  const double phip_series =
                      0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0)));
                  const double phip_direct =
                      (e * (z - 1.0) + 1.0) * inv2[off + n] * inv_dd * inv_dd;
                  const double phip = std::abs(z) >= 1e-3 ? phip_direct : phip_series;
                  dz += gun * phip * (ddxd * bv[n]);
                  const double guphi = gun * phi;
                  acc_d += guphi * bv[n] * xd;
                  acc_x += guphi * bv[n] * dd;
                  if (gbr) gbr[n] += guphi * ddxd;
                }
                acc_d += dz * An;
                if (gl) gl[off + n] += dz * dd * An;
              }
              if (gd) gd[bl * Din + d] += acc_d;
              if (gx) gx[bl * Din + d] += acc_x;
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

// One element of the linear recurrence h <- a*h + u viewed as an associative
// operator: applying p1 then p2 composes to (a1*a2, a2*u1 + u2).
struct ScanPair {
  double a = 1.0;
  double u = 0.0;
};

inline constexpr ScanPair scan_identity() { return ScanPair{1.0, 0.0}; }

inline ScanPair scan_compose(const ScanPair& p1, const ScanPair& p2) {
  return ScanPair{p1.a * p2.a, p1.u * p2.a + p2.u};
}

namespace detail {

// Sequential recurrence, writing every intermediate state into h [B,L,Din,N].
inline void scan_states_sequential(const double* abar, const double* ubar, int64_t Bz, int64_t L,
                                   int64_t lanes, double* h) {
  using AMap = Eigen::Map<Eigen::ArrayXd>;
  using CAMap = Eigen::Map<const Eigen::ArrayXd>;
  for (int64_t b = 0; b < Bz; ++b) {
    const double* prev = nullptr;
    for (int64_t t = 0; t < L; ++t) {
      const int64_t off = (b * L + t) * lanes;
      if (prev)
        AMap(h + off, lanes) =
            CAMap(abar + off, lanes) * CAMap(prev, lanes) + CAMap(ubar + off, lanes);
      else
        std::copy_n(ubar + off, lanes, h + off);
      prev = h + off;
    }
  }
}

// Work-efficient two-sweep (Blelloch) scan over the time axis, vectorized
// across the (d,n) lanes. Produces the same h as the sequential recurrence
// up to floating-point reassociation.
inline void scan_states_parallel(const double* abar, const double* ubar, int64_t Bz, int64_t L,
                                 int64_t lanes, double* h) {
  int64_t Lp = 1;
  while (Lp < L) Lp <<= 1;
  std::vector<double> aw(static_cast<size_t>(Lp * lanes)), uw(static_cast<size_t>(Lp * lanes));
  using AMap = Eigen::Map<Eigen::ArrayXd>;
  using CAMap = Eigen::Map<const Eigen::ArrayXd>;

  for (int64_t b = 0; b < Bz; ++b) {
    std::copy_n(abar + b * L * lanes, L * lanes, aw.data());
    std::copy_n(ubar + b * L * lanes, L * lanes, uw.data());
    for (int64_t t = L; t < Lp; ++t) {
      std::fill_n(aw.data() + t * lanes, lanes, 1.0);
      std::fill_n(uw.data() + t * lanes, lanes, 0.0);
    }

    // up-sweep: node i accumulates the composition of its subtree
    for (int64_t s = 1; s < Lp; s <<= 1)
      for (int64_t i = 2 * s - 1; i < Lp; i += 2 * s) {
        AMap al(aw.data() + (i - s) * lanes, lanes), ar(aw.data() + i * lanes, lanes);
        AMap ul(uw.data() + (i - s) * lanes, lanes), ur(uw.data() + i * lanes, lanes);
        ur += ul * ar;
        ar *= al;
      }

    // down-sweep: convert to exclusive prefixes
    std::fill_n(aw.data() + (Lp - 1) * lanes, lanes, 1.0);
    std::fill_n(uw.data() + (Lp - 1) * lanes, lanes, 0.0);
    std::vector<double> ta(static_cast<size_t>(lanes)), tu(static_cast<size_t>(lanes));
    for (int64_t s = Lp >> 1; s >= 1; s >>= 1)
      for (int64_t i = 2 * s - 1; i < Lp; i += 2 * s) {
        double* al = aw.data() + (i - s) * lanes;
        double* ul = uw.data() + (i - s) * lanes;
        double* ar = aw.data() + i * lanes;
        double* ur = uw.data() + i * lanes;
        std::copy_n(al, lanes, ta.data());
        std::copy_n(ul, lanes, tu.data());
        std::copy_n(ar, lanes, al);
        std::copy_n(ur, lanes, ul);
        // right child = parent prefix composed with left-subtree sum
        AMap Ar(ar, lanes), Ur(ur, lanes);
        CAMap Ta(ta.data(), lanes), Tu(tu.data(), lanes);
        Ur = Ur * Ta + Tu;
        Ar *= Ta;
      }

    // inclusive = exclusive o p_t; with h_{-1} = 0 the state is the u part
    for (int64_t t = 0; t < L; ++t) {
      const int64_t off = (b * L + t) * lanes;
      AMap H(h + off, lanes);
      CAMap Eu(uw.data() + t * lanes, lanes);
      CAMap Pa(abar + off, lanes), Pu(ubar + off, lanes);
      H = Eu * Pa + Pu;
    }
  }
}

}  // namespace detail

// y[b,t,d] = sum_n c[b,t,n] * h[b,t,d,n] with h_t = a_bar_t * h_{t-1} + b_bar_x_t.
// Both modes produce identical results up to floating-point reassociation;
// the backward pass runs the reverse recurrence over the stored states.
inline Tensor selective_scan(const Discretized& d, const Tensor& c, ScanMode mode) {
  detail::OpTimer optimer("scan");
  const Tensor& abar = d.a_bar;
  const Tensor& ubar = d.b_bar_x;
  require(abar.dim() == 4 && ubar.shape() == abar.shape(), "discretized tensors must be [B,L,Din,N]");
  const int64_t Bz = abar.extent(0), L = abar.extent(1), Din = abar.extent(2), N = abar.extent(3);
  require(c.dim() == 3 && c.extent(0) == Bz && c.extent(1) == L && c.extent(2) == N,
          "C projection shape ", shape_str(c.shape()), " inconsistent with ",
          shape_str(abar.shape()));

  const int64_t lanes = Din * N;
  Tensor h = Tensor::uninit({Bz, L, Din, N});
  if (mode == ScanMode::sequential)
    detail::scan_states_sequential(abar.data(), ubar.data(), Bz, L, lanes, h.data());
  else
    detail::scan_states_parallel(abar.data(), ubar.data(), Bz, L, lanes, h.data());

  Tensor y = Tensor::uninit({Bz, L, Din});
  {
    using CMatMap = Eigen::Map<const EMat>;
    for (int64_t bl = 0; bl < Bz * L; ++bl)
      Eigen::Map<Eigen::VectorXd>(y.data() + bl * Din, Din).noalias() =
          CMatMap(h.data() + bl * lanes, Din, N) *
          Eigen::Map<const Eigen::VectorXd>(c.data() + bl * N, N);
  }

  if (grad_needed({&abar, &ubar, &c})) {
    y.set_requires_grad(true);
    Tensor ac = abar, uc = ubar, cc = c, hc = h, yc = y;
    Tape::active()->record("scan.b", {y}, [ac, uc, cc, hc, yc, Bz, L, Din, N, lanes]() mutable {
      const double* gy = yc.grad_or_null();
      if (!gy) return;
      // a_bar/b_bar_x gradients cover every element here, so a first touch
      // writes straight into uninitialized buffers
      const bool ga_fresh = ac.requires_grad() && !ac.grad_allocated();
      const bool gu_fresh = uc.requires_grad() && !uc.grad_allocated();
      double* ga = ac.requires_grad() ? (ga_fresh ? ac.grad_uninit() : ac.grad()) : nullptr;
      double* gu = uc.requires_grad() ? (gu_fresh ? uc.grad_uninit() : uc.grad()) : nullptr;
      double* gc = cc.requires_grad() ? cc.grad() : nullptr;
      Tensor dh_t = Tensor::zeros({lanes});
      Tensor gcacc_t = Tensor::uninit({N});
      double* dh = dh_t.data();
      double* gcacc = gcacc_t.data();
      for (int64_t b = 0; b < Bz; ++b) {
        std::fill_n(dh, lanes, 0.0);
        for (int64_t t = L - 1; t >= 0; --t) {
          const int64_t off = (b * L + t) * lanes;
          const double* hv = hc.data() + off;
          const double* hprev = t > 0 ? hc.data() + off - lanes : nullptr;
          const double* av = ac.data() + off;
          const double* cv = cc.data() + (b * L + t) * N;
          const double* gyr = gy + (b * L + t) * Din;
          if (gc) std::fill_n(gcacc, N, 0.0);
          for (int64_t d = 0; d < Din; ++d) {
            const double g = gyr[d];
            double* dhr = dh + d * N;
            const double* hr = hv + d * N;
            // dL/dh_t gains gy_t x c_t; y_t = h_t . c_t also feeds gc
            for (int64_t n = 0; n < N; ++n) dhr[n] += g * cv[n];
            if (gc)
              for (int64_t n = 0; n < N; ++n) gcacc[n] += g * hr[n];
            if (ga) {
              double* gar = ga + off + d * N;
              if (hprev) {
                const double* hp = hprev + d * N;
                if (ga_fresh)
                  for (int64_t n = 0; n < N; ++n) gar[n] = dhr[n] * hp[n];
                else
                  for (int64_t n = 0; n < N; ++n) gar[n] += dhr[n] * hp[n];
              } else if (ga_fresh) {
                for (int64_t n = 0; n < N; ++n) gar[n] = 0.0;  // h_{-1} = 0
              }
            }
            if (gu) {
              double* gur = gu + off + d * N;
              if (gu_fresh)
                for (int64_t n = 0; n < N; ++n) gur[n] = dhr[n];
              else
                for (int64_t n = 0; n < N; ++n) gur[n] += dhr[n];
            }
            const double* ar = av + d * N;
            for (int64_t n = 0; n < N; ++n) dhr[n] *= ar[n];
          }
          if (gc) {
            double* gcr = gc + (b * L + t) * N;
            for (int64_t n = 0; n < N; ++n) gcr[n] += gcacc[n];
          }
        }
      }
    });
  }
  return y;
}

}  // namespace dmamba
