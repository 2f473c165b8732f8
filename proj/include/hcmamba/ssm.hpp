#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"
#include "tensor_ops.hpp"

namespace hcm {

// Continuous-time state-space system with diagonal state matrix. The diagonal
// must be strictly negative so the system is stable and every discretization
// below lands inside the unit disk.
template <typename T>
struct ContinuousSSM {
  std::vector<T> a_diag;  // [N]
  std::vector<T> b;       // [N]
  std::vector<T> c;       // [N]
  T d = T(0);

  ContinuousSSM(std::vector<T> a_diag_in, std::vector<T> b_in, std::vector<T> c_in,
                T d_in)
      : a_diag(std::move(a_diag_in)), b(std::move(b_in)), c(std::move(c_in)), d(d_in) {
    if (a_diag.empty())
      throw DomainError("ContinuousSSM: state size must be at least 1");
    if (b.size() != a_diag.size() || c.size() != a_diag.size())
      throw DimensionError("ContinuousSSM: A/B/C must share the state size");
    for (size_t i = 0; i < a_diag.size(); ++i)
      if (!(a_diag[i] < T(0)))
        throw DomainError("ContinuousSSM: diagonal entry " + std::to_string(i) +
                          " is not strictly negative");
  }

  int64_t state_size() const { return static_cast<int64_t>(a_diag.size()); }
};

template <typename T>
struct DiscreteSSM {
  std::vector<T> a_bar;  // [N]
  std::vector<T> b_bar;  // [N]
  std::vector<T> c;      // [N]
  T d = T(0);
  T delta = T(0);

  int64_t state_size() const { return static_cast<int64_t>(a_bar.size()); }
};

// Zero-order-hold discretization of a diagonal system:
//   a_bar = exp(delta*a),  b_bar = ((exp(delta*a) - 1) / a) * b,
// evaluated with expm1 so the difference never cancels, and with the series
// limit delta*b once |delta*a| is below 1e-8.
template <typename T>
DiscreteSSM<T> discretize_zoh(const ContinuousSSM<T>& ssm, T delta) {
  if (!(delta > T(0)))
    throw DomainError("discretize_zoh: step size must be positive, got " +
                      std::to_string(static_cast<double>(delta)));
  const int64_t n = ssm.state_size();
  DiscreteSSM<T> out;
  out.a_bar.resize(static_cast<size_t>(n));
  out.b_bar.resize(static_cast<size_t>(n));
  out.c = ssm.c;
  out.d = ssm.d;
  out.delta = delta;
  for (int64_t i = 0; i < n; ++i) {
    T a = ssm.a_diag[static_cast<size_t>(i)];
    T z = delta * a;
    out.a_bar[static_cast<size_t>(i)] = std::exp(z);
    T factor = std::abs(z) < T(1e-8) ? delta : std::expm1(z) / a;
    out.b_bar[static_cast<size_t>(i)] = factor * ssm.b[static_cast<size_t>(i)];
  }
  return out;
}

namespace detail {

template <typename T>
void check_scan_input(const char* op, const DiscreteSSM<T>& ssm, const Tensor<T>& x) {
  if (x.rank() != 1)
    throw DimensionError(std::string(op) + ": expected a rank-1 sequence, got shape " +
                         shape_str(x.shape()));
  if (x.numel() == 0) throw DomainError(std::string(op) + ": empty sequence");
  if (ssm.state_size() == 0) throw DomainError(std::string(op) + ": empty state");
}

}  // namespace detail

// Sequential evaluation of the discrete recurrence
//   h_t = a_bar * h_{t-1} + b_bar * x_t,   y_t = c . h_t + d * x_t,
// differentiable with respect to x.
template <typename T>
Tensor<T> scan_recurrent(const DiscreteSSM<T>& ssm, const Tensor<T>& x) {
  detail::check_scan_input("scan_recurrent", ssm, x);
  const int64_t len = x.numel();
  const int64_t n = ssm.state_size();
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  std::vector<T> h(static_cast<size_t>(n), T(0));
  const T* xp = x.data();
  T* yp = y.mutable_data();
  for (int64_t t = 0; t < len; ++t) {
    T acc = ssm.d * xp[t];
    for (int64_t i = 0; i < n; ++i) {
      h[static_cast<size_t>(i)] = ssm.a_bar[static_cast<size_t>(i)] * h[static_cast<size_t>(i)] +
                                  ssm.b_bar[static_cast<size_t>(i)] * xp[t];
      acc += ssm.c[static_cast<size_t>(i)] * h[static_cast<size_t>(i)];
    }
    yp[t] = acc;
  }
  detail::check_finite("scan_recurrent", y);
  if (detail::wants_grad<T>({&x})) {
    DiscreteSSM<T> params = ssm;
    Tape<T>::active()->record("scan_recurrent", y, {x}, [x, y, params]() {
      const int64_t len = x.numel();
      const int64_t n = params.state_size();
      const std::vector<T>& g = y.grad();
      std::vector<T>& gx = x.grad_ref();
      // Reverse-time adjoint: gh carries d(loss)/d(h_t) back through the
      // linear recurrence.
      std::vector<T> gh(static_cast<size_t>(n), T(0));
      for (int64_t t = len - 1; t >= 0; --t) {
        T acc = params.d * g[static_cast<size_t>(t)];
        for (int64_t i = 0; i < n; ++i) {
          gh[static_cast<size_t>(i)] += g[static_cast<size_t>(t)] * params.c[static_cast<size_t>(i)];
          acc += gh[static_cast<size_t>(i)] * params.b_bar[static_cast<size_t>(i)];
          gh[static_cast<size_t>(i)] *= params.a_bar[static_cast<size_t>(i)];
        }
        gx[static_cast<size_t>(t)] += acc;
      }
    });
  }
  return y;
}

// Exposes the state trajectory [L, N] for diagnostics; never recorded.
template <typename T>
Tensor<T> scan_states(const DiscreteSSM<T>& ssm, const Tensor<T>& x) {
  detail::check_scan_input("scan_states", ssm, x);
  const int64_t len = x.numel();
  const int64_t n = ssm.state_size();
  Tensor<T> states = Tensor<T>::zeros({len, n});
  std::vector<T> h(static_cast<size_t>(n), T(0));
  const T* xp = x.data();
  T* sp = states.mutable_data();
  for (int64_t t = 0; t < len; ++t) {
    for (int64_t i = 0; i < n; ++i) {
      h[static_cast<size_t>(i)] = ssm.a_bar[static_cast<size_t>(i)] * h[static_cast<size_t>(i)] +
                                  ssm.b_bar[static_cast<size_t>(i)] * xp[t];
      sp[t * n + i] = h[static_cast<size_t>(i)];
    }
  }
  return states;
}

// Equivalent global-convolution evaluation: y = x (*) K + d * x with the
// structured kernel K[s] = c . (a_bar^s * b_bar).
template <typename T>
Tensor<T> scan_convolutional(const DiscreteSSM<T>& ssm, const Tensor<T>& x) {
  detail::check_scan_input("scan_convolutional", ssm, x);
  const int64_t len = x.numel();
  const int64_t n = ssm.state_size();
  std::vector<T> kernel(static_cast<size_t>(len), T(0));
  std::vector<T> pow_b = ssm.b_bar;  // a_bar^s * b_bar, updated per tap
  for (int64_t s = 0; s < len; ++s) {
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
      acc += ssm.c[static_cast<size_t>(i)] * pow_b[static_cast<size_t>(i)];
      pow_b[static_cast<size_t>(i)] *= ssm.a_bar[static_cast<size_t>(i)];
    }
    kernel[static_cast<size_t>(s)] = acc;
  }
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* yp = y.mutable_data();
  for (int64_t t = 0; t < len; ++t) {
    T acc = ssm.d * xp[t];
    for (int64_t s = 0; s <= t; ++s) acc += kernel[static_cast<size_t>(s)] * xp[t - s];
    yp[t] = acc;
  }
  detail::check_finite("scan_convolutional", y);
  if (detail::wants_grad<T>({&x})) {
    T d = ssm.d;
    Tape<T>::active()->record("scan_convolutional", y, {x}, [x, y, kernel, d]() {
      const int64_t len = x.numel();
      const std::vector<T>& g = y.grad();
      std::vector<T>& gx = x.grad_ref();
      for (int64_t u = 0; u < len; ++u) {
        T acc = d * g[static_cast<size_t>(u)];
        for (int64_t t = u; t < len; ++t)
          acc += kernel[static_cast<size_t>(t - u)] * g[static_cast<size_t>(t)];
        gx[static_cast<size_t>(u)] += acc;
      }
    });
  }
  return y;
}

// Learned projections that make the scan parameters input-dependent. The step
// size comes from a rank-reduced map plus bias fed through softplus; B and C
// are plain linear maps of the input.
template <typename T>
struct SelectivityWeights {
  Tensor<T> w_dt_down;  // [D, R]
  Tensor<T> w_dt_up;    // [R, D]
  Tensor<T> b_dt;       // [D]
  Tensor<T> w_b;        // [D, N]
  Tensor<T> b_b;        // [N]
  Tensor<T> w_c;        // [D, N]
  Tensor<T> b_c;        // [N]
};

// Fused selective-scan recurrence. Inputs:
//   x  [B, L, D]   sequence features
//   dt [B, L, D]   positive per-step sizes
//   bt [B, L, N]   per-step input projections
//   ct [B, L, N]   per-step output projections
//   a  [D, N]      shared (negative) state diagonal
//   d_skip [D]     shared skip coefficients
// Per channel d: a_bar = exp(dt*a[d,:]), h_t = a_bar*h_{t-1} + dt*bt_t*x_t,
// y_t = ct_t . h_t + d_skip[d]*x_t. One tape node with a hand-written adjoint;
// forward state and decay factors are kept only while recording.
template <typename T>
Tensor<T> selective_scan_core(const Tensor<T>& x, const Tensor<T>& dt, const Tensor<T>& bt,
                              const Tensor<T>& ct, const Tensor<T>& a,
                              const Tensor<T>& d_skip) {
  if (x.rank() != 3)
    throw DimensionError("selective_scan: expected input [B, L, D], got shape " +
                         shape_str(x.shape()));
  const int64_t nb = x.dim(0), len = x.dim(1), d_feat = x.dim(2);
  if (len == 0) throw DomainError("selective_scan: empty sequence");
  if (a.rank() != 2 || a.dim(0) != d_feat)
    throw DimensionError("selective_scan: state diagonal must be [" +
                         std::to_string(d_feat) + ", N], got shape " + shape_str(a.shape()));
  const int64_t n_state = a.dim(1);
  if (dt.shape() != x.shape())
    throw DimensionError("selective_scan: step sizes must match input shape " +
                         shape_str(x.shape()) + ", got " + shape_str(dt.shape()));
  Shape bln = {nb, len, n_state};
  if (bt.shape() != bln || ct.shape() != bln)
    throw DimensionError("selective_scan: per-step B/C must have shape " + shape_str(bln));
  if (d_skip.rank() != 1 || d_skip.dim(0) != d_feat)
    throw DimensionError("selective_scan: skip coefficients must be [" +
                         std::to_string(d_feat) + "], got shape " + shape_str(d_skip.shape()));

  const bool rec = detail::wants_grad<T>({&x, &dt, &bt, &ct, &a, &d_skip});
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  // Forward state h and decay a_bar per (b, d, t, n); only kept for backward.
  auto h_buf = rec ? std::make_shared<std::vector<T>>(
                         static_cast<size_t>(nb * d_feat * len * n_state))
                   : nullptr;
  auto abar_buf = rec ? std::make_shared<std::vector<T>>(
                            static_cast<size_t>(nb * d_feat * len * n_state))
                      : nullptr;

  const T* xp = x.data();
  const T* dtp = dt.data();
  const T* btp = bt.data();
  const T* ctp = ct.data();
  const T* ap = a.data();
  const T* dp = d_skip.data();
  T* yp = y.mutable_data();
  std::vector<T> h(static_cast<size_t>(n_state));
  for (int64_t b = 0; b < nb; ++b) {
    for (int64_t d = 0; d < d_feat; ++d) {
      std::fill(h.begin(), h.end(), T(0));
      const T* ad = ap + d * n_state;
      T* hb = h_buf ? h_buf->data() + ((b * d_feat + d) * len) * n_state : nullptr;
      T* ab = abar_buf ? abar_buf->data() + ((b * d_feat + d) * len) * n_state : nullptr;
      for (int64_t t = 0; t < len; ++t) {
        const int64_t xi = (b * len + t) * d_feat + d;
        const T xv = xp[xi];
        const T step = dtp[xi];
        const T* btt = btp + (b * len + t) * n_state;
        const T* ctt = ctp + (b * len + t) * n_state;
        T acc = dp[d] * xv;
        for (int64_t i = 0; i < n_state; ++i) {
          const T abar = std::exp(step * ad[i]);
          h[static_cast<size_t>(i)] = abar * h[static_cast<size_t>(i)] + step * btt[i] * xv;
          acc += ctt[i] * h[static_cast<size_t>(i)];
          if (hb) {
            hb[t * n_state + i] = h[static_cast<size_t>(i)];
            ab[t * n_state + i] = abar;
          }
        }
        yp[xi] = acc;
      }
    }
  }
  detail::check_finite("selective_scan", y);

  if (rec) {
    Tape<T>::active()->record(
        "selective_scan", y, {x, dt, bt, ct, a, d_skip},
        [x, dt, bt, ct, a, d_skip, y, h_buf, abar_buf]() {
          const int64_t nb = x.dim(0), len = x.dim(1), d_feat = x.dim(2);
          const int64_t n_state = a.dim(1);
          const std::vector<T>& g = y.grad();
          const T* xp = x.data();
          const T* dtp = dt.data();
          const T* btp = bt.data();
          const T* ctp = ct.data();
          const T* ap = a.data();
          const T* dp = d_skip.data();
          const bool wx = x.requires_grad(), wdt = dt.requires_grad();
          const bool wb = bt.requires_grad(), wc = ct.requires_grad();
          const bool wa = a.requires_grad(), wd = d_skip.requires_grad();
          T* gx = wx ? x.grad_ref().data() : nullptr;
          T* gdt = wdt ? dt.grad_ref().data() : nullptr;
          T* gbt = wb ? bt.grad_ref().data() : nullptr;
          T* gct = wc ? ct.grad_ref().data() : nullptr;
          T* ga = wa ? a.grad_ref().data() : nullptr;
          T* gd = wd ? d_skip.grad_ref().data() : nullptr;
          std::vector<T> gh(static_cast<size_t>(n_state));
          for (int64_t b = 0; b < nb; ++b) {
            for (int64_t d = 0; d < d_feat; ++d) {
              std::fill(gh.begin(), gh.end(), T(0));
              const T* ad = ap + d * n_state;
              const T* hb = h_buf->data() + ((b * d_feat + d) * len) * n_state;
              const T* ab = abar_buf->data() + ((b * d_feat + d) * len) * n_state;
              for (int64_t t = len - 1; t >= 0; --t) {
                const int64_t xi = (b * len + t) * d_feat + d;
                const T xv = xp[xi];
                const T step = dtp[xi];
                const T gy = g[static_cast<size_t>(xi)];
                const T* btt = btp + (b * len + t) * n_state;
                const T* ctt = ctp + (b * len + t) * n_state;
                const T* ht = hb + t * n_state;
                const T* at = ab + t * n_state;
                if (gd) gd[d] += gy * xv;
                T gx_acc = gy * dp[d];
                T gdt_acc = T(0);
                for (int64_t i = 0; i < n_state; ++i) {
                  T ghi = gh[static_cast<size_t>(i)] + gy * ctt[i];
                  if (gct) gct[(b * len + t) * n_state + i] += gy * ht[i];
                  const T h_prev = t > 0 ? ht[i - n_state] : T(0);
                  gx_acc += ghi * step * btt[i];
                  gdt_acc += ghi * (at[i] * ad[i] * h_prev + btt[i] * xv);
                  if (ga) ga[d * n_state + i] += ghi * at[i] * step * h_prev;
                  if (gbt) gbt[(b * len + t) * n_state + i] += ghi * step * xv;
                  gh[static_cast<size_t>(i)] = ghi * at[i];
                }
                if (gx) gx[xi] += gx_acc;
                if (gdt) gdt[xi] += gdt_acc;
              }
            }
          }
        });
  }
  return y;
}

// Full selective scan: derives per-step parameters from the input through the
// learned projections, then runs the fused recurrence.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SelectivityWeights<T>& w,
                         const Tensor<T>& a, const Tensor<T>& d_skip) {
  if (x.rank() != 3)
    throw DimensionError("selective_scan: expected input [B, L, D], got shape " +
                         shape_str(x.shape()));
  const int64_t nb = x.dim(0), len = x.dim(1), d_feat = x.dim(2);
  if (len == 0) throw DomainError("selective_scan: empty sequence");
  if (a.rank() != 2 || a.dim(0) != d_feat)
    throw DimensionError("selective_scan: state diagonal must be [" +
                         std::to_string(d_feat) + ", N], got shape " + shape_str(a.shape()));
  const int64_t n_state = a.dim(1);
  if (w.w_dt_down.rank() != 2 || w.w_dt_down.dim(0) != d_feat ||
      w.w_dt_up.rank() != 2 || w.w_dt_up.dim(1) != d_feat ||
      w.w_dt_down.dim(1) != w.w_dt_up.dim(0))
    throw DimensionError("selective_scan: step projection shapes " +
                         shape_str(w.w_dt_down.shape()) + " and " +
                         shape_str(w.w_dt_up.shape()) + " do not chain over [" +
                         std::to_string(d_feat) + "] features");
  Shape dn = {d_feat, n_state};
  if (w.w_b.shape() != dn || w.w_c.shape() != dn)
    throw DimensionError("selective_scan: B/C projections must have shape " + shape_str(dn));

  auto flat = reshape(x, {nb * len, d_feat});
  auto dt = softplus(add(matmul(matmul(flat, w.w_dt_down), w.w_dt_up), w.b_dt));
  auto bt = add(matmul(flat, w.w_b), w.b_b);
  auto ct = add(matmul(flat, w.w_c), w.b_c);
  return selective_scan_core(x, reshape(dt, x.shape()), reshape(bt, {nb, len, n_state}),
                             reshape(ct, {nb, len, n_state}), a, d_skip);
}

}  // namespace hcm
