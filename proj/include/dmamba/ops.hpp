#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "dmamba/tensor.hpp"

namespace dmamba {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

namespace detail {

// Odometer over the cells of `out`, tracking element offsets into two
// broadcast operands. body(i, off_a, off_b).
template <class F>
void for_each_bcast2(const Shape& out, const std::vector<int64_t>& sa,
                     const std::vector<int64_t>& sb, F&& body) {
  const int64_t n = numel(out);
  const size_t r = out.size();
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    body(i, oa, ob);
    for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// b's shape equals the trailing dims of a's shape (e.g. bias add): the flat
// index of b is flat(a) % numel(b).
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (trailing-dimension broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

// fwd(a,b) -> y;  bwd accumulates (ga_term, gb_term) given (go, a, b).
template <class Fwd, class DA, class DB>
Tensor binary_op(const char* bname, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  detail::OpTimer timer(bname);
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::uninit(os);
  const int64_t n = out.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();

  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else if (os == a.shape() && is_suffix(b.shape(), a.shape())) {
    const int64_t nb = b.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i % nb]);
  } else if (os == b.shape() && is_suffix(a.shape(), b.shape())) {
    const int64_t na = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i % na], pb[i]);
  } else {
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    for_each_bcast2(os, sa, sb,
                    [&](int64_t i, int64_t oa, int64_t ob) { po[i] = fwd(pa[oa], pb[ob]); });
  }

  if (grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record(bname, {out}, [ac, bc, oc, da, db]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      const Shape& os2 = oc.shape();
      double* ga = ac.requires_grad() ? ac.grad() : nullptr;
      double* gb = bc.requires_grad() ? bc.grad() : nullptr;
      const double* pa = ac.data();
      const double* pb = bc.data();
      const int64_t n2 = oc.numel();
      if (ac.shape() == bc.shape()) {
        if (ga)
          for (int64_t i = 0; i < n2; ++i) ga[i] += da(go[i], pa[i], pb[i]);
        if (gb)
          for (int64_t i = 0; i < n2; ++i) gb[i] += db(go[i], pa[i], pb[i]);
      } else if (os2 == ac.shape() && is_suffix(bc.shape(), ac.shape())) {
        const int64_t nb = bc.numel();
        if (ga)
          for (int64_t i = 0; i < n2; ++i) ga[i] += da(go[i], pa[i], pb[i % nb]);
        if (gb)
          for (int64_t i = 0; i < n2; ++i) gb[i % nb] += db(go[i], pa[i], pb[i % nb]);
      } else if (os2 == bc.shape() && is_suffix(ac.shape(), bc.shape())) {
        const int64_t na = ac.numel();
        if (ga)
          for (int64_t i = 0; i < n2; ++i) ga[i % na] += da(go[i], pa[i % na], pb[i]);
        if (gb)
          for (int64_t i = 0; i < n2; ++i) gb[i] += db(go[i], pa[i % na], pb[i]);
      } else {
        const auto sa = broadcast_strides(ac.shape(), os2);
        const auto sb = broadcast_strides(bc.shape(), os2);
        for_each_bcast2(os2, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
          if (ga) ga[oa] += da(go[i], pa[oa], pb[ob]);
          if (gb) gb[ob] += db(go[i], pa[oa], pb[ob]);
        });
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// dydx(x, y) is the local derivative evaluated from the stored forward pair.
template <class Fwd, class Dydx>
Tensor unary_op(const Tensor& x, Fwd fwd, Dydx dydx) {
  detail::OpTimer timer("unary");
  Tensor out = Tensor::uninit(x.shape());
  const int64_t n = x.numel();
  const double* px = x.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);

  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("unary.b", {out}, [xc, oc, dydx]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      const double* px2 = xc.data();
      const double* py = oc.data();
      const int64_t n2 = xc.numel();
      for (int64_t i = 0; i < n2; ++i) gx[i] += go[i] * dydx(px2[i], py[i]);
    });
  }
  return out;
}

inline double sigmoid_val(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// ln(1+e^x); linear branch above 30 keeps large delta biases finite.
inline double softplus_val(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace detail

inline Tensor neg(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor exp(const Tensor& x) {
  detail::OpTimer optimer("exp");
  Tensor out = Tensor::uninit(x.shape());
  const int64_t n = x.numel();
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) =
      Eigen::Map<const Eigen::ArrayXd>(x.data(), n).exp();
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("exp.b", {out}, [xc, oc]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      const double* py = oc.data();
      for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += go[i] * py[i];
    });
  }
  return out;
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor reciprocal(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return detail::sigmoid_val(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor softplus(const Tensor& x) {
  detail::OpTimer optimer("softplus");
  using AMap = Eigen::Map<Eigen::ArrayXd>;
  using CAMap = Eigen::Map<const Eigen::ArrayXd>;
  Tensor out = Tensor::uninit(x.shape());
  const int64_t n = x.numel();
  {
    CAMap X(x.data(), n);
    AMap(out.data(), n) = (X > 30.0).select(X, (-X.abs()).exp().log1p() + X.max(0.0));
  }
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("softplus.b", {out}, [xc, oc]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      const int64_t n2 = xc.numel();
      CAMap X(xc.data(), n2), G(go, n2);
      AMap(xc.grad(), n2) += G / (1.0 + (-X).exp());
    });
  }
  return out;
}

inline Tensor silu(const Tensor& x) {
  detail::OpTimer optimer("silu");
  using AMap = Eigen::Map<Eigen::ArrayXd>;
  using CAMap = Eigen::Map<const Eigen::ArrayXd>;
  const int64_t n = x.numel();
  Tensor sig = Tensor::uninit(x.shape());
  Tensor out = Tensor::uninit(x.shape());
  {
    CAMap X(x.data(), n);
    AMap S(sig.data(), n);
    S = 1.0 / (1.0 + (-X).exp());
    AMap(out.data(), n) = X * S;
  }
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out, sc = sig;
    Tape::active()->record("silu.b", {out}, [xc, oc, sc]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      const int64_t n2 = xc.numel();
      CAMap X(xc.data(), n2), S(sc.data(), n2), G(go, n2);
      AMap(xc.grad(), n2) += G * S * (1.0 + X * (1.0 - S));
    });
  }
  return out;
}

// Exact Gaussian-CDF form: x * Phi(x). The forward pass saves Phi for the
// backward rule, so erf is evaluated once.
inline Tensor gelu(const Tensor& x) {
  detail::OpTimer optimer("gelu");
  using AMap = Eigen::Map<Eigen::ArrayXd>;
  using CAMap = Eigen::Map<const Eigen::ArrayXd>;
  const int64_t n = x.numel();
  Tensor cdf = Tensor::uninit(x.shape());
  Tensor out = Tensor::uninit(x.shape());
  {
    const double* px = x.data();
    double* pc = cdf.data();
    for (int64_t i = 0; i < n; ++i) pc[i] = 0.5 * (1.0 + std::erf(px[i] * detail::kInvSqrt2));
    AMap(out.data(), n) = CAMap(px, n) * CAMap(pc, n);
  }
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out, cc = cdf;
    Tape::active()->record("gelu.b", {out}, [xc, oc, cc]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      const int64_t n2 = xc.numel();
      CAMap X(xc.data(), n2), C(cc.data(), n2), G(go, n2);
      AMap(xc.grad(), n2) +=
          G * (C + X * detail::kInvSqrt2Pi * (-0.5 * X.square()).exp());
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }

// ---------------------------------------------------------------------------
// matmul: a [..,M,K] x b [..,K,P] -> [..,M,P], leading batch dims broadcast
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::OpTimer optimer("matmul");
  require(a.dim() >= 2 && b.dim() >= 2, "matmul requires rank >= 2, got ", shape_str(a.shape()),
          " and ", shape_str(b.shape()));
  const int64_t M = a.extent(a.dim() - 2), K = a.extent(a.dim() - 1);
  const int64_t K2 = b.extent(b.dim() - 2), P = b.extent(b.dim() - 1);
  require(K == K2, "matmul inner dimension mismatch: ", shape_str(a.shape()), " x ",
          shape_str(b.shape()));

  const Shape ab(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shape(ab, bb);
  Shape os = batch;
  os.push_back(M);
  os.push_back(P);
  Tensor out = Tensor::uninit(os);

  const auto sa = broadcast_strides(ab, batch);
  const auto sb = broadcast_strides(bb, batch);
  detail::for_each_bcast2(batch, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
    ECMap A(a.data() + oa * M * K, M, K);
    ECMap B(b.data() + ob * K * P, K, P);
    EMap C(out.data() + i * M * P, M, P);
    C.noalias() = A * B;
  });

  if (grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record("matmul.b", {out}, [ac, bc, oc, batch, sa, sb, M, K, P]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* ga = ac.requires_grad() ? ac.grad() : nullptr;
      double* gb = bc.requires_grad() ? bc.grad() : nullptr;
      detail::for_each_bcast2(batch, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
        ECMap G(go + i * M * P, M, P);
        ECMap A(ac.data() + oa * M * K, M, K);
        ECMap B(bc.data() + ob * K * P, K, P);
        if (ga) EMap(ga + oa * M * K, M, K).noalias() += G * B.transpose();
        if (gb) EMap(gb + ob * K * P, K, P).noalias() += A.transpose() * G;
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<bool> reduce_mask(const Shape& s, const std::vector<int64_t>& axes) {
  std::vector<bool> m(s.size(), axes.empty());
  for (int64_t ax : axes) {
    require(ax >= 0 && ax < static_cast<int64_t>(s.size()), "reduce axis ", ax,
            " out of range for shape ", shape_str(s));
    m[static_cast<size_t>(ax)] = true;
  }
  return m;
}

inline Tensor reduce_impl(const Tensor& x, const std::vector<int64_t>& axes, bool keepdims,
                          bool is_mean) {
  detail::OpTimer optimer("reduce");
  const auto mask = reduce_mask(x.shape(), axes);
  Shape kept = x.shape();
  int64_t count = 1;
  for (size_t d = 0; d < mask.size(); ++d)
    if (mask[d]) {
      count *= kept[d];
      kept[d] = 1;
    }
  Shape final_shape;
  for (size_t d = 0; d < mask.size(); ++d) {
    if (!mask[d])
      final_shape.push_back(x.shape()[d]);
    else if (keepdims)
      final_shape.push_back(1);
  }

  // out offset per x element: strides of the kept-dims layout, 0 on reduced.
  auto kst = row_major_strides(kept);
  std::vector<int64_t> xmap(x.dim(), 0);
  for (size_t d = 0; d < mask.size(); ++d) xmap[d] = mask[d] ? 0 : kst[d];

  Tensor out = Tensor::zeros(final_shape);
  const double scale = is_mean ? 1.0 / static_cast<double>(count) : 1.0;
  double* po = out.data();
  const double* px = x.data();
  const auto zero = std::vector<int64_t>(x.dim(), 0);
  detail::for_each_bcast2(x.shape(), xmap, zero,
                          [&](int64_t i, int64_t oo, int64_t) { po[oo] += px[i] * scale; });

  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("reduce.b", {out}, [xc, oc, xmap, zero, scale]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      detail::for_each_bcast2(xc.shape(), xmap, zero,
                              [&](int64_t i, int64_t oo, int64_t) { gx[i] += go[oo] * scale; });
    });
  }
  return out;
}

}  // namespace detail

inline Tensor sum(const Tensor& x, const std::vector<int64_t>& axes = {}, bool keepdims = false) {
  return detail::reduce_impl(x, axes, keepdims, false);
}

inline Tensor mean(const Tensor& x, const std::vector<int64_t>& axes = {}, bool keepdims = false) {
  return detail::reduce_impl(x, axes, keepdims, true);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::OpTimer optimer("reshape");
  require(numel(shape) == x.numel(), "reshape element-count mismatch: ", shape_str(x.shape()),
          " -> ", shape_str(shape));
  Tensor out = Tensor::uninit(std::move(shape));
  std::copy_n(x.data(), x.numel(), out.data());
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("reshape.b", {out}, [xc, oc]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& x, int64_t d0, int64_t d1) {
  require(d0 >= 0 && d0 < x.dim() && d1 >= 0 && d1 < x.dim(), "transpose dims (", d0, ",", d1,
          ") out of range for ", shape_str(x.shape()));
  Shape os = x.shape();
  std::swap(os[static_cast<size_t>(d0)], os[static_cast<size_t>(d1)]);
  auto xs = row_major_strides(x.shape());
  std::swap(xs[static_cast<size_t>(d0)], xs[static_cast<size_t>(d1)]);

  Tensor out = Tensor::uninit(os);
  double* po = out.data();
  const double* px = x.data();
  const auto zero = std::vector<int64_t>(os.size(), 0);
  detail::for_each_bcast2(os, xs, zero,
                          [&](int64_t i, int64_t ox, int64_t) { po[i] = px[ox]; });
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("transpose.b", {out}, [xc, oc, os, xs, zero]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      detail::for_each_bcast2(os, xs, zero,
                              [&](int64_t i, int64_t ox, int64_t) { gx[ox] += go[i]; });
    });
  }
  return out;
}

// Single-axis strided slice [start, stop) with step >= 1.
inline Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t stop, int64_t step = 1) {
  detail::OpTimer optimer("slice");
  require(axis >= 0 && axis < x.dim(), "slice axis ", axis, " out of range for ",
          shape_str(x.shape()));
  const int64_t e = x.extent(axis);
  require(step >= 1 && start >= 0 && start <= stop && stop <= e, "slice range [", start, ",",
          stop, ") step ", step, " invalid for extent ", e);
  const int64_t ne = (stop - start + step - 1) / step;
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = ne;

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.extent(d);
  for (int64_t d = axis + 1; d < x.dim(); ++d) inner *= x.extent(d);

  Tensor out = Tensor::uninit(os);
  double* po = out.data();
  const double* px = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < ne; ++j)
      std::copy_n(px + (o * e + start + j * step) * inner, inner, po + (o * ne + j) * inner);

  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("slice.b", {out}, [xc, oc, outer, inner, e, ne, start, step]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < ne; ++j) {
          double* dst = gx + (o * e + start + j * step) * inner;
          const double* src = go + (o * ne + j) * inner;
          for (int64_t k = 0; k < inner; ++k) dst[k] += src[k];
        }
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  detail::OpTimer optimer("concat");
  require(!parts.empty(), "concat of zero tensors");
  const Tensor& first = parts.front();
  require(axis >= 0 && axis < first.dim(), "concat axis ", axis, " out of range for ",
          shape_str(first.shape()));
  int64_t total = 0;
  for (const Tensor& p : parts) {
    require(p.dim() == first.dim(), "concat rank mismatch");
    for (int64_t d = 0; d < first.dim(); ++d)
      require(d == axis || p.extent(d) == first.extent(d), "concat extent mismatch at dim ", d,
              ": ", shape_str(p.shape()), " vs ", shape_str(first.shape()));
    total += p.extent(axis);
  }
  Shape os = first.shape();
  os[static_cast<size_t>(axis)] = total;

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= first.extent(d);
  for (int64_t d = axis + 1; d < first.dim(); ++d) inner *= first.extent(d);

  Tensor out = Tensor::uninit(os);
  double* po = out.data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t pe = p.extent(axis);
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * pe * inner, pe * inner, po + (o * total + off) * inner);
    off += pe;
  }

  bool any_grad = false;
  for (const Tensor& p : parts)
    if (grad_needed({&p})) any_grad = true;
  if (any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> pc = parts;
    Tensor oc = out;
    Tape::active()->record("concat.b", {out}, [pc, oc, outer, inner, total, axis]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      int64_t off2 = 0;
      for (Tensor& p : pc) {
        const int64_t pe = p.extent(axis);
        if (p.requires_grad()) {
          double* gp = p.grad();
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = go + (o * total + off2) * inner;
            double* dst = gp + o * pe * inner;
            for (int64_t k = 0; k < pe * inner; ++k) dst[k] += src[k];
          }
        }
        off2 += pe;
      }
    });
  }
  return out;
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  require(broadcast_shape(x.shape(), shape) == shape, "cannot broadcast ", shape_str(x.shape()),
          " to ", shape_str(shape));
  Tensor out = Tensor::uninit(shape);
  const auto sx = broadcast_strides(x.shape(), shape);
  const auto zero = std::vector<int64_t>(shape.size(), 0);
  double* po = out.data();
  const double* px = x.data();
  detail::for_each_bcast2(shape, sx, zero,
                          [&](int64_t i, int64_t ox, int64_t) { po[i] = px[ox]; });
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("broadcast.b", {out}, [xc, oc, shape, sx, zero]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      detail::for_each_bcast2(shape, sx, zero,
                              [&](int64_t i, int64_t ox, int64_t) { gx[ox] += go[i]; });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification helpers
// ---------------------------------------------------------------------------

// log-softmax along the last axis.
inline Tensor log_softmax(const Tensor& x) {
  detail::OpTimer optimer("logsoftmax");
  require(x.dim() >= 1, "log_softmax requires rank >= 1");
  const int64_t C = x.extent(x.dim() - 1);
  const int64_t rows = x.numel() / C;
  Tensor out = Tensor::uninit(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * C;
    double m = xr[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, xr[c]);
    double s = 0;
    for (int64_t c = 0; c < C; ++c) s += std::exp(xr[c] - m);
    const double lse = m + std::log(s);
    for (int64_t c = 0; c < C; ++c) po[r * C + c] = xr[c] - lse;
  }
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    Tape::active()->record("logsoftmax.b", {out}, [xc, oc, rows, C]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      const double* py = oc.data();
      for (int64_t r = 0; r < rows; ++r) {
        double gsum = 0;
        for (int64_t c = 0; c < C; ++c) gsum += go[r * C + c];
        for (int64_t c = 0; c < C; ++c)
          gx[r * C + c] += go[r * C + c] - std::exp(py[r * C + c]) * gsum;
      }
    });
  }
  return out;
}

// Picks x[..., ids[...]] along the last axis; ids shape == x shape minus last.
inline Tensor gather_index(const Tensor& x, const ITensor& ids) {
  require(x.dim() >= 1, "gather_index requires rank >= 1");
  const Shape lead(x.shape().begin(), x.shape().end() - 1);
  require(ids.shape == lead, "gather_index ids shape ", shape_str(ids.shape),
          " does not match leading dims of ", shape_str(x.shape()));
  const int64_t C = x.extent(x.dim() - 1);
  const int64_t rows = x.numel() / C;
  Tensor out = Tensor::uninit(lead);
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t id = ids.v[static_cast<size_t>(r)];
    require(id >= 0 && id < C, "gather index ", id, " out of range [0,", C, ")");
    out.data()[r] = x.data()[r * C + id];
  }
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    auto idv = ids.v;
    Tape::active()->record("gather.b", {out}, [xc, oc, idv, rows, C]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gx = xc.grad();
      for (int64_t r = 0; r < rows; ++r) gx[r * C + idv[static_cast<size_t>(r)]] += go[r];
    });
  }
  return out;
}

// Row gather from an embedding table [V,D]; ids of any shape -> [*ids, D].
inline Tensor embedding_lookup(const Tensor& table, const ITensor& ids) {
  detail::OpTimer optimer("embed");
  require(table.dim() == 2, "embedding table must be 2-D, got ", shape_str(table.shape()));
  const int64_t V = table.extent(0), D = table.extent(1);
  Shape os = ids.shape;
  os.push_back(D);
  Tensor out = Tensor::uninit(os);
  for (int64_t r = 0; r < ids.numel(); ++r) {
    const int64_t id = ids.v[static_cast<size_t>(r)];
    require(id >= 0 && id < V, "embedding id ", id, " out of range [0,", V, ")");
    std::copy_n(table.data() + id * D, D, out.data() + r * D);
  }
  if (grad_needed({&table})) {
    out.set_requires_grad(true);
    Tensor tc = table, oc = out;
    auto idv = ids.v;
    Tape::active()->record("embed.b", {out}, [tc, oc, idv, D]() mutable {
      const double* go = oc.grad_or_null();
      if (!go) return;
      double* gt = tc.grad();
      for (size_t r = 0; r < idv.size(); ++r) {
        double* dst = gt + idv[r] * D;
        const double* src = go + static_cast<int64_t>(r) * D;
        for (int64_t k = 0; k < D; ++k) dst[k] += src[k];
      }
    });
  }
  return out;
}

}  // namespace dmamba
