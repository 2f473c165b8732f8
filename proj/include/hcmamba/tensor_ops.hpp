#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "tensor.hpp"

// Differentiable tensor ops. Layout is row-major, images are channels-last
// [B, H, W, C]. Broadcasting is trailing-axis (numpy-style, right aligned).
// Backward closures work on raw buffers only; they never call public ops, so
// nothing records while the tape unwinds.

namespace hcm {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t k = 1; k <= r; ++k) {
    int64_t da = k <= a.size() ? a[a.size() - k] : 1;
    int64_t db = k <= b.size() ? b[b.size() - k] : 1;
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " do not broadcast");
    out[r - k] = std::max(da, db);
  }
  return out;
}

// Right-aligned strides into `shape` for an operand of shape `s`
// (0 on broadcast axes).
inline std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t acc = 1;
  for (size_t k = 1; k <= s.size(); ++k) {
    size_t oi = out.size() - k;
    int64_t d = s[s.size() - k];
    st[oi] = (d == 1 && out[oi] != 1) ? 0 : acc;
    acc *= d;
  }
  return st;
}

// out[i] = fn(a[ia], b[ib]) under trailing-axis broadcasting.
template <typename T, typename F>
void bc_binary(const Shape& ash, const T* a, const Shape& bsh, const T* b, const Shape& osh,
               T* out, F&& fn) {
  int64_t n = shape_numel(osh);
  if (ash == bsh) {  // same-shape fast path
    for (int64_t i = 0; i < n; ++i) out[i] = fn(a[i], b[i]);
    return;
  }
  if (shape_numel(bsh) == 1) {
    T bv = b[0];
    for (int64_t i = 0; i < n; ++i) out[i] = fn(a[i], bv);
    return;
  }
  if (shape_numel(ash) == 1) {
    T av = a[0];
    for (int64_t i = 0; i < n; ++i) out[i] = fn(av, b[i]);
    return;
  }
  // Row fast path: b is [C] against a [..., C].
  if (bsh.size() == 1 && !ash.empty() && ash.back() == bsh[0] && ash == osh) {
    int64_t c = bsh[0];
    for (int64_t i = 0; i < n; i += c)
      for (int64_t j = 0; j < c; ++j) out[i + j] = fn(a[i + j], b[j]);
    return;
  }
  std::vector<int64_t> sa = bcast_strides(ash, osh), sb = bcast_strides(bsh, osh);
  size_t r = osh.size();
  std::vector<int64_t> idx(r, 0);
  int64_t offa = 0, offb = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = fn(a[offa], b[offb]);
    for (size_t k = r; k-- > 0;) {
      if (++idx[k] < osh[k]) {
        offa += sa[k];
        offb += sb[k];
        break;
      }
      offa -= sa[k] * (osh[k] - 1);
      offb -= sb[k] * (osh[k] - 1);
      idx[k] = 0;
    }
  }
}

// Accumulates a gradient of shape `gsh` into a buffer of shape `tsh`
// (reverse of broadcasting: sum over expanded axes).
template <typename T>
void reduce_into(const Shape& gsh, const T* g, const Shape& tsh, T* acc) {
  if (gsh == tsh) {
    for (int64_t i = 0, n = shape_numel(gsh); i < n; ++i) acc[i] += g[i];
    return;
  }
  std::vector<int64_t> st = bcast_strides(tsh, gsh);
  size_t r = gsh.size();
  std::vector<int64_t> idx(r, 0);
  int64_t off = 0;
  int64_t n = shape_numel(gsh);
  for (int64_t i = 0; i < n; ++i) {
    acc[off] += g[i];
    for (size_t k = r; k-- > 0;) {
      if (++idx[k] < gsh[k]) {
        off += st[k];
        break;
      }
      off -= st[k] * (gsh[k] - 1);
      idx[k] = 0;
    }
  }
}

template <typename T>
struct BinKind {
  // dfa/dfb give the local partials as functions of (a, b).
  static T add(T a, T b) { return a + b; }
  static T sub(T a, T b) { return a - b; }
  static T mul(T a, T b) { return a * b; }
  static T div(T a, T b) { return a / b; }
};

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Shape osh = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = Tensor<T>::zeros(osh);
  detail::bc_binary(a.shape(), a.data(), b.shape(), b.data(), osh, out.mutable_data(),
                    detail::BinKind<T>::add);
  detail::check_finite("add", out);
  if (detail::wants_grad<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record("add", out, {a, b}, [ac, bc, oc]() {
      const std::vector<T>& g = oc.grad();
      if (ac.requires_grad())
        detail::reduce_into(oc.shape(), g.data(), ac.shape(), ac.grad_ref().data());
      if (bc.requires_grad())
        detail::reduce_into(oc.shape(), g.data(), bc.shape(), bc.grad_ref().data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Shape osh = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = Tensor<T>::zeros(osh);
  detail::bc_binary(a.shape(), a.data(), b.shape(), b.data(), osh, out.mutable_data(),
                    detail::BinKind<T>::sub);
  detail::check_finite("sub", out);
  if (detail::wants_grad<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record("sub", out, {a, b}, [ac, bc, oc]() {
      const std::vector<T>& g = oc.grad();
      if (ac.requires_grad())
        detail::reduce_into(oc.shape(), g.data(), ac.shape(), ac.grad_ref().data());
      if (bc.requires_grad()) {
        std::vector<T> ng(g.size());
        for (size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
        detail::reduce_into(oc.shape(), ng.data(), bc.shape(), bc.grad_ref().data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape osh = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = Tensor<T>::zeros(osh);
  detail::bc_binary(a.shape(), a.data(), b.shape(), b.data(), osh, out.mutable_data(),
                    detail::BinKind<T>::mul);
  detail::check_finite("mul", out);
  if (detail::wants_grad<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record("mul", out, {a, b}, [ac, bc, oc]() {
      const std::vector<T>& g = oc.grad();
      std::vector<T> tmp(g.size());
      if (ac.requires_grad()) {
        detail::bc_binary(oc.shape(), g.data(), bc.shape(), bc.data(), oc.shape(), tmp.data(),
                          detail::BinKind<T>::mul);
        detail::reduce_into(oc.shape(), tmp.data(), ac.shape(), ac.grad_ref().data());
      }
      if (bc.requires_grad()) {
        detail::bc_binary(oc.shape(), g.data(), ac.shape(), ac.data(), oc.shape(), tmp.data(),
                          detail::BinKind<T>::mul);
        detail::reduce_into(oc.shape(), tmp.data(), bc.shape(), bc.grad_ref().data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  Shape osh = detail::broadcast_shape(a.shape(), b.shape(), "divide");
  Tensor<T> out = Tensor<T>::zeros(osh);
  detail::bc_binary(a.shape(), a.data(), b.shape(), b.data(), osh, out.mutable_data(),
                    detail::BinKind<T>::div);
  detail::check_finite("divide", out);
  if (detail::wants_grad<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record("divide", out, {a, b}, [ac, bc, oc]() {
      const std::vector<T>& g = oc.grad();
      std::vector<T> tmp(g.size());
      if (ac.requires_grad()) {
        detail::bc_binary(oc.shape(), g.data(), bc.shape(), bc.data(), oc.shape(), tmp.data(),
                          detail::BinKind<T>::div);
        detail::reduce_into(oc.shape(), tmp.data(), ac.shape(), ac.grad_ref().data());
      }
      if (bc.requires_grad()) {
        // d(a/b)/db = -a / b^2; reuse the forward output: -out/b.
        detail::bc_binary(oc.shape(), oc.data(), bc.shape(), bc.data(), oc.shape(), tmp.data(),
                          detail::BinKind<T>::div);
        for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = -tmp[i] * g[i];
        detail::reduce_into(oc.shape(), tmp.data(), bc.shape(), bc.grad_ref().data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.mutable_data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) op[i] = c * xp[i];
  detail::check_finite("scale", out);
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("scale", out, {x}, [xc, oc, c]() {
      const std::vector<T>& g = oc.grad();
      std::vector<T>& gx = xc.grad_ref();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.mutable_data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) op[i] = xp[i] + c;
  detail::check_finite("add_scalar", out);
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("add_scalar", out, {x}, [xc, oc]() {
      const std::vector<T>& g = oc.grad();
      std::vector<T>& gx = xc.grad_ref();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

namespace detail {

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  // softplus(x) = log(1 + e^x); the two branches avoid overflow at |x| >> 0.
  if (x > T(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// Generic unary op: fwd(x) and dfdx(x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F&& fwd, D&& dfdx) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.mutable_data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) op[i] = fwd(xp[i]);
  check_finite(name, out);
  if (wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    D df = dfdx;
    Tape<T>::active()->record(name, out, {x}, [xc, oc, df]() {
      const std::vector<T>& g = oc.grad();
      std::vector<T>& gx = xc.grad_ref();
      const T* xp2 = xc.data();
      const T* yp = oc.data();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += df(xp2[i], yp[i]) * g[i];
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      "silu", x, [](T v) { return v * detail::stable_sigmoid(v); },
      [](T v, T) {
        T s = detail::stable_sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      "softplus", x, [](T v) { return detail::stable_softplus(v); },
      [](T v, T) { return detail::stable_sigmoid(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      "sigmoid", x, [](T v) { return detail::stable_sigmoid(v); },
      [](T, T y) { return y * (T(1) - y); });
}

namespace detail {

// C[m,n] += A[m,k] B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += G[m,n] B^T  (B stored [k,n])
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    T* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T s = T(0);
      for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k,n] += A^T G  (A stored [m,k], G stored [m,n])
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

// 2-D matrix product [m,k] x [k,n] -> [m,n]. Higher-rank inputs go through
// reshape() at call sites.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::gemm_nn(a.data(), b.data(), out.mutable_data(), m, k, n);
  detail::check_finite("matmul", out);
  if (detail::wants_grad<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record("matmul", out, {a, b}, [ac, bc, oc, m, k, n]() {
      const T* g = oc.grad().data();
      if (ac.requires_grad()) detail::gemm_nt(g, bc.data(), ac.grad_ref().data(), m, n, k);
      if (bc.requires_grad()) detail::gemm_tn(ac.data(), g, bc.grad_ref().data(), m, k, n);
    });
  }
  return out;
}

// Copies values into a new shape with the same element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
  Tensor<T> out = Tensor<T>::from(std::move(shape), x.vec());
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("reshape", out, {x}, [xc, oc]() {
      const std::vector<T>& g = oc.grad();
      std::vector<T>& gx = xc.grad_ref();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// Concatenation over the last axis.
template <typename T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() < 1)
    throw DimensionError("concat_lastdim: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  for (int i = 0; i + 1 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw DimensionError("concat_lastdim: leading dims differ: " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
  int64_t ca = a.dim(a.rank() - 1), cb = b.dim(b.rank() - 1);
  Shape osh = a.shape();
  osh.back() = ca + cb;
  Tensor<T> out = Tensor<T>::zeros(osh);
  int64_t rows = a.numel() / ca;
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(op + r * (ca + cb), ap + r * ca, sizeof(T) * static_cast<size_t>(ca));
    std::memcpy(op + r * (ca + cb) + ca, bp + r * cb, sizeof(T) * static_cast<size_t>(cb));
  }
  if (detail::wants_grad<T>({&a, &b})) {
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record("concat_lastdim", out, {a, b}, [ac, bc, oc, rows, ca, cb]() {
      const T* g = oc.grad().data();
      if (ac.requires_grad()) {
        T* ga = ac.grad_ref().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < ca; ++j) ga[r * ca + j] += g[r * (ca + cb) + j];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad_ref().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < cb; ++j) gb[r * cb + j] += g[r * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

// x[..., from:to) over the last axis.
template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, int64_t from, int64_t to) {
  int64_t c = x.dim(x.rank() - 1);
  if (from < 0 || to > c || from >= to)
    throw DimensionError("slice_lastdim: range [" + std::to_string(from) + ", " +
                         std::to_string(to) + ") invalid for last dim " + std::to_string(c));
  Shape osh = x.shape();
  osh.back() = to - from;
  Tensor<T> out = Tensor<T>::zeros(osh);
  int64_t w = to - from, rows = x.numel() / c;
  const T* xp = x.data();
  T* op = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(op + r * w, xp + r * c + from, sizeof(T) * static_cast<size_t>(w));
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("slice_lastdim", out, {x}, [xc, oc, rows, c, w, from]() {
      const T* g = oc.grad().data();
      T* gx = xc.grad_ref().data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < w; ++j) gx[r * c + from + j] += g[r * w + j];
    });
  }
  return out;
}

// out[..., j] = x[..., perm[j]]. perm must be a permutation of 0..C-1.
template <typename T>
Tensor<T> permute_lastdim(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  int64_t c = x.dim(x.rank() - 1);
  if (static_cast<int64_t>(perm.size()) != c)
    throw DimensionError("permute_lastdim: perm size " + std::to_string(perm.size()) +
                         " vs last dim " + std::to_string(c));
  std::vector<char> seen(static_cast<size_t>(c), 0);
  for (int64_t p : perm) {
    if (p < 0 || p >= c || seen[static_cast<size_t>(p)])
      throw ContractError("permute_lastdim: not a permutation");
    seen[static_cast<size_t>(p)] = 1;
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  int64_t rows = x.numel() / c;
  const T* xp = x.data();
  T* op = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) op[r * c + j] = xp[r * c + perm[static_cast<size_t>(j)]];
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    std::vector<int64_t> pm = perm;
    Tape<T>::active()->record("permute_lastdim", out, {x}, [xc, oc, rows, c, pm]() {
      const T* g = oc.grad().data();
      T* gx = xc.grad_ref().data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) gx[r * c + pm[static_cast<size_t>(j)]] += g[r * c + j];
    });
  }
  return out;
}

// Layer normalization over the last axis with affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  int64_t c = x.dim(x.rank() - 1);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(c) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(rows) * 2);
  const T* xp = x.data();
  const T* gm = gamma.data();
  const T* bt = beta.data();
  T* op = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    T mean = T(0);
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int64_t j = 0; j < c; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    T inv = T(1) / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(2 * r)] = mean;
    (*stats)[static_cast<size_t>(2 * r + 1)] = inv;
    T* orow = op + r * c;
    for (int64_t j = 0; j < c; ++j) orow[j] = (row[j] - mean) * inv * gm[j] + bt[j];
  }
  detail::check_finite("layer_norm", out);
  if (detail::wants_grad<T>({&x, &gamma, &beta})) {
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    Tape<T>::active()->record("layer_norm", out, {x, gamma, beta}, [xc, gc, bc, oc, stats, rows,
                                                                    c]() {
      const T* g = oc.grad().data();
      const T* xp2 = xc.data();
      const T* gm2 = gc.data();
      T* gx = xc.requires_grad() ? xc.grad_ref().data() : nullptr;
      T* gg = gc.requires_grad() ? gc.grad_ref().data() : nullptr;
      T* gb = bc.requires_grad() ? bc.grad_ref().data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        T mean = (*stats)[static_cast<size_t>(2 * r)];
        T inv = (*stats)[static_cast<size_t>(2 * r + 1)];
        const T* row = xp2 + r * c;
        const T* grow = g + r * c;
        // xhat_j = (x_j - mean) * inv;  out_j = xhat_j * gamma_j + beta_j
        if (gg || gb) {
          for (int64_t j = 0; j < c; ++j) {
            T xhat = (row[j] - mean) * inv;
            if (gg) gg[j] += grow[j] * xhat;
            if (gb) gb[j] += grow[j];
          }
        }
        if (gx) {
          // dx = inv * (q - mean(q) - xhat * mean(q * xhat)), q_j = g_j * gamma_j
          T qmean = T(0), qxmean = T(0);
          for (int64_t j = 0; j < c; ++j) {
            T q = grow[j] * gm2[j];
            T xhat = (row[j] - mean) * inv;
            qmean += q;
            qxmean += q * xhat;
          }
          qmean /= static_cast<T>(c);
          qxmean /= static_cast<T>(c);
          T* gxrow = gx + r * c;
          for (int64_t j = 0; j < c; ++j) {
            T q = grow[j] * gm2[j];
            T xhat = (row[j] - mean) * inv;
            gxrow[j] += inv * (q - qmean - xhat * qxmean);
          }
        }
      }
    });
  }
  return out;
}

// Numerically stable softmax over the last axis.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  int64_t c = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    T* orow = op + r * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int64_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    T invs = T(1) / s;
    for (int64_t j = 0; j < c; ++j) orow[j] *= invs;
  }
  detail::check_finite("softmax_lastdim", out);
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("softmax_lastdim", out, {x}, [xc, oc, rows, c]() {
      const T* g = oc.grad().data();
      const T* p = oc.data();
      T* gx = xc.grad_ref().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* prow = p + r * c;
        const T* grow = g + r * c;
        T dot = T(0);
        for (int64_t j = 0; j < c; ++j) dot += grow[j] * prow[j];
        T* gxrow = gx + r * c;
        for (int64_t j = 0; j < c; ++j) gxrow[j] += prow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = T(0);
  const T* xp = x.data();
  for (int64_t i = 0, n = x.numel(); i < n; ++i) s += xp[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  detail::check_finite("sum_all", out);
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("sum_all", out, {x}, [xc, oc]() {
      T g = oc.grad()[0];
      std::vector<T>& gx = xc.grad_ref();
      for (T& v : gx) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Nearest-neighbor spatial upsampling of [B, H, W, C] by an integer factor.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  if (x.rank() != 4) throw DimensionError("upsample_nearest: want [B,H,W,C], got " + shape_str(x.shape()));
  if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
  int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), f = factor;
  Tensor<T> out = Tensor<T>::zeros({b, h * f, w * f, c});
  const T* xp = x.data();
  T* op = out.mutable_data();
  int64_t ow = w * f;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t oy = 0; oy < h * f; ++oy) {
      int64_t iy = oy / f;
      for (int64_t ox = 0; ox < ow; ++ox) {
        int64_t ix = ox / f;
        std::memcpy(op + ((bi * h * f + oy) * ow + ox) * c, xp + ((bi * h + iy) * w + ix) * c,
                    sizeof(T) * static_cast<size_t>(c));
      }
    }
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("upsample_nearest", out, {x}, [xc, oc, b, h, w, c, f]() {
      const T* g = oc.grad().data();
      T* gx = xc.grad_ref().data();
      int64_t ow = w * f;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t oy = 0; oy < h * f; ++oy) {
          int64_t iy = oy / f;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox / f;
            const T* grow = g + ((bi * h * f + oy) * ow + ox) * c;
            T* gxrow = gx + ((bi * h + iy) * w + ix) * c;
            for (int64_t j = 0; j < c; ++j) gxrow[j] += grow[j];
          }
        }
    });
  }
  return out;
}

namespace detail {

// One axis of bilinear resampling at output-pixel centers (half-pixel
// convention) with edge clamping: output o draws from source samples lo and
// hi = lo+1 with weight w_hi on hi; clamped edges collapse to a single tap.
struct BilinearTap {
  int64_t lo = 0, hi = 0;
  double w_hi = 0;
};

inline std::vector<BilinearTap> bilinear_taps(int64_t n, int64_t f) {
  std::vector<BilinearTap> taps(static_cast<size_t>(n * f));
  for (int64_t o = 0; o < n * f; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(f) - 0.5;
    double fl = std::floor(src);
    BilinearTap t;
    t.lo = static_cast<int64_t>(fl);
    t.w_hi = src - fl;
    t.hi = t.lo + 1;
    if (t.lo < 0) {
      t.lo = t.hi = 0;
      t.w_hi = 0;
    } else if (t.hi > n - 1) {
      t.lo = t.hi = n - 1;
      t.w_hi = 0;
    }
    taps[static_cast<size_t>(o)] = t;
  }
  return taps;
}

}  // namespace detail

// Bilinear spatial upsampling of [B, H, W, C] by an integer factor. Unlike
// nearest-neighbor, the output varies linearly between source samples, so a
// downstream argmax can place class boundaries between coarse-grid positions
// instead of snapping to factor-sized blocks.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor) {
  if (x.rank() != 4)
    throw DimensionError("upsample_bilinear: want [B,H,W,C], got " + shape_str(x.shape()));
  if (factor < 1) throw ContractError("upsample_bilinear: factor must be >= 1");
  int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), f = factor;
  const auto ty = detail::bilinear_taps(h, f);
  const auto tx = detail::bilinear_taps(w, f);
  Tensor<T> out = Tensor<T>::zeros({b, h * f, w * f, c});
  const T* xp = x.data();
  T* op = out.mutable_data();
  const int64_t ow = w * f;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t oy = 0; oy < h * f; ++oy) {
      const auto& y = ty[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < ow; ++ox) {
        const auto& xt = tx[static_cast<size_t>(ox)];
        const T* r00 = xp + ((bi * h + y.lo) * w + xt.lo) * c;
        const T* r01 = xp + ((bi * h + y.lo) * w + xt.hi) * c;
        const T* r10 = xp + ((bi * h + y.hi) * w + xt.lo) * c;
        const T* r11 = xp + ((bi * h + y.hi) * w + xt.hi) * c;
        const T w11 = static_cast<T>(y.w_hi * xt.w_hi);
        const T w10 = static_cast<T>(y.w_hi * (1.0 - xt.w_hi));
        const T w01 = static_cast<T>((1.0 - y.w_hi) * xt.w_hi);
        const T w00 = static_cast<T>((1.0 - y.w_hi) * (1.0 - xt.w_hi));
        T* orow = op + ((bi * h * f + oy) * ow + ox) * c;
        for (int64_t j = 0; j < c; ++j)
          orow[j] = w00 * r00[j] + w01 * r01[j] + w10 * r10[j] + w11 * r11[j];
      }
    }
  detail::check_finite("upsample_bilinear", out);
  if (detail::wants_grad<T>({&x})) {
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record("upsample_bilinear", out, {x}, [xc, oc, b, h, w, c, f, ty, tx]() {
      const T* g = oc.grad().data();
      T* gx = xc.grad_ref().data();
      const int64_t ow = w * f;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t oy = 0; oy < h * f; ++oy) {
          const auto& y = ty[static_cast<size_t>(oy)];
          for (int64_t ox = 0; ox < ow; ++ox) {
            const auto& xt = tx[static_cast<size_t>(ox)];
            const T w11 = static_cast<T>(y.w_hi * xt.w_hi);
            const T w10 = static_cast<T>(y.w_hi * (1.0 - xt.w_hi));
            const T w01 = static_cast<T>((1.0 - y.w_hi) * xt.w_hi);
            const T w00 = static_cast<T>((1.0 - y.w_hi) * (1.0 - xt.w_hi));
            const T* grow = g + ((bi * h * f + oy) * ow + ox) * c;
            T* g00 = gx + ((bi * h + y.lo) * w + xt.lo) * c;
            T* g01 = gx + ((bi * h + y.lo) * w + xt.hi) * c;
            T* g10 = gx + ((bi * h + y.hi) * w + xt.lo) * c;
            T* g11 = gx + ((bi * h + y.hi) * w + xt.hi) * c;
            for (int64_t j = 0; j < c; ++j) {
              g00[j] += w00 * grow[j];
              g01[j] += w01 * grow[j];
              g10[j] += w10 * grow[j];
              g11[j] += w11 * grow[j];
            }
          }
        }
    });
  }
  return out;
}

}  // namespace hcm
