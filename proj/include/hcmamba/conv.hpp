#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tensor.hpp"
#include "tensor_ops.hpp"

namespace hcm {

// Cross-correlation spec for channels-last inputs [B, H, W, C]. Weights are
// [out_channels, in_channels/groups, kh, kw]; padding is explicit per side.
struct Conv2dSpec {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t kh = 1, kw = 1;
  int64_t dh = 1, dw = 1;
  int64_t groups = 1;
  int64_t pt = 0, pb = 0, pl = 0, pr = 0;
  int64_t sh = 1, sw = 1;

  // Stride-1 convolution that preserves H and W; odd kernels only.
  static Conv2dSpec same(int64_t cin, int64_t cout, int64_t k, int64_t dilation = 1) {
    if (k < 1 || k % 2 == 0)
      throw ContractError("Conv2dSpec::same: kernel " + std::to_string(k) +
                          " must be odd for size-preserving padding");
    Conv2dSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kh = s.kw = k;
    s.dh = s.dw = dilation;
    s.pt = s.pb = s.pl = s.pr = dilation * (k - 1) / 2;
    return s;
  }

  static Conv2dSpec depthwise(int64_t channels, int64_t k, int64_t multiplier = 1,
                              int64_t dilation = 1) {
    Conv2dSpec s = same(channels, channels * multiplier, k, dilation);
    s.groups = channels;
    return s;
  }

  static Conv2dSpec pointwise(int64_t cin, int64_t cout) { return same(cin, cout, 1); }

  bool is_depthwise() const { return groups == in_channels && in_channels > 0; }
  bool is_pointwise() const {
    return kh == 1 && kw == 1 && dh == 1 && dw == 1 && groups == 1 && sh == 1 && sw == 1;
  }

  int64_t weight_count() const { return out_channels * (in_channels / groups) * kh * kw; }

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || kh < 1 || kw < 1 || dh < 1 || dw < 1 ||
        groups < 1 || sh < 1 || sw < 1 || pt < 0 || pb < 0 || pl < 0 || pr < 0)
      throw ContractError("conv2d: spec fields must be positive (padding non-negative)");
    if (in_channels % groups != 0 || out_channels % groups != 0)
      throw ContractError("conv2d: channels " + std::to_string(in_channels) + "->" +
                          std::to_string(out_channels) + " not divisible by groups " +
                          std::to_string(groups));
  }
};

namespace detail {

// Weights rearranged to [group][tap][ci][co_in_group] so the inner forward
// loop is a contiguous axpy over the group's output channels.
template <typename T>
std::shared_ptr<std::vector<T>> regroup_conv_weight(const Conv2dSpec& spec,
                                                    const Tensor<T>& w) {
  const int64_t cg = spec.in_channels / spec.groups;
  const int64_t og = spec.out_channels / spec.groups;
  const int64_t taps = spec.kh * spec.kw;
  auto out = std::make_shared<std::vector<T>>(
      static_cast<size_t>(spec.groups * taps * cg * og));
  const T* wp = w.data();
  for (int64_t g = 0; g < spec.groups; ++g)
    for (int64_t co = 0; co < og; ++co)
      for (int64_t ci = 0; ci < cg; ++ci)
        for (int64_t tap = 0; tap < taps; ++tap)
          (*out)[static_cast<size_t>(((g * taps + tap) * cg + ci) * og + co)] =
              wp[((g * og + co) * cg + ci) * taps + tap];
  return out;
}

}  // namespace detail

// Dilated, strided, grouped 2-D cross-correlation with zero padding,
// differentiable with respect to input, weights, and bias. Pass a
// default-constructed tensor to skip the bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dSpec& spec, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  spec.validate();
  if (x.rank() != 4 || x.dim(3) != spec.in_channels)
    throw DimensionError("conv2d: expected input [B, H, W, " +
                         std::to_string(spec.in_channels) + "], got shape " +
                         shape_str(x.shape()));
  const int64_t cg = spec.in_channels / spec.groups;
  Shape wshape = {spec.out_channels, cg, spec.kh, spec.kw};
  if (weight.shape() != wshape)
    throw DimensionError("conv2d: weight shape " + shape_str(weight.shape()) +
                         " does not match spec shape " + shape_str(wshape));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != spec.out_channels))
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) +
                         " does not match out channels " + std::to_string(spec.out_channels));
  const int64_t nb = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t span_h = (spec.kh - 1) * spec.dh + 1;
  const int64_t span_w = (spec.kw - 1) * spec.dw + 1;
  const int64_t oh = (h + spec.pt + spec.pb - span_h) / spec.sh + 1;
  const int64_t ow = (w + spec.pl + spec.pr - span_w) / spec.sw + 1;
  if (h + spec.pt + spec.pb < span_h || w + spec.pl + spec.pr < span_w || oh < 1 || ow < 1)
    throw DimensionError("conv2d: kernel span exceeds padded input (" +
                         std::to_string(h) + "x" + std::to_string(w) + ", kernel span " +
                         std::to_string(span_h) + "x" + std::to_string(span_w) + ")");

  const int64_t og = spec.out_channels / spec.groups;
  const int64_t taps = spec.kh * spec.kw;
  auto wt2 = detail::regroup_conv_weight(spec, weight);
  Tensor<T> y = Tensor<T>::zeros({nb, oh, ow, spec.out_channels});
  const T* xp = x.data();
  const T* bp = bias.defined() ? bias.data() : nullptr;
  T* yp = y.mutable_data();
  for (int64_t b = 0; b < nb; ++b) {
    for (int64_t i = 0; i < oh; ++i) {
      const int64_t ih0 = i * spec.sh - spec.pt;
      for (int64_t j = 0; j < ow; ++j) {
        const int64_t iw0 = j * spec.sw - spec.pl;
        T* yrow = yp + ((b * oh + i) * ow + j) * spec.out_channels;
        if (bp)
          std::copy(bp, bp + spec.out_channels, yrow);
        for (int64_t u = 0; u < spec.kh; ++u) {
          const int64_t ih = ih0 + u * spec.dh;
          if (ih < 0 || ih >= h) continue;
          for (int64_t v = 0; v < spec.kw; ++v) {
            const int64_t iw = iw0 + v * spec.dw;
            if (iw < 0 || iw >= w) continue;
            const T* xrow = xp + ((b * h + ih) * w + iw) * spec.in_channels;
            const int64_t tap = u * spec.kw + v;
            for (int64_t g = 0; g < spec.groups; ++g) {
              const T* wtap = wt2->data() + ((g * taps + tap) * cg) * og;
              const T* xg = xrow + g * cg;
              T* yg = yrow + g * og;
              for (int64_t ci = 0; ci < cg; ++ci) {
                const T xv = xg[ci];
                const T* wrow = wtap + ci * og;
                for (int64_t co = 0; co < og; ++co) yg[co] += xv * wrow[co];
              }
            }
          }
        }
      }
    }
  }
  detail::check_finite("conv2d", y);

  bool rec = bias.defined() ? detail::wants_grad<T>({&x, &weight, &bias})
                            : detail::wants_grad<T>({&x, &weight});
  if (rec) {
    auto backward = [x, weight, bias, y, spec, wt2, oh, ow]() {
      const int64_t nb = x.dim(0), h = x.dim(1), w = x.dim(2);
      const int64_t cg = spec.in_channels / spec.groups;
      const int64_t og = spec.out_channels / spec.groups;
      const int64_t taps = spec.kh * spec.kw;
      const std::vector<T>& g = y.grad();
      const T* xp = x.data();
      const bool wx = x.requires_grad(), ww = weight.requires_grad();
      const bool wb = bias.defined() && bias.requires_grad();
      T* gx = wx ? x.grad_ref().data() : nullptr;
      T* gb = wb ? bias.grad_ref().data() : nullptr;
      std::vector<T> gw2;
      if (ww) gw2.assign(wt2->size(), T(0));
      for (int64_t b = 0; b < nb; ++b) {
        for (int64_t i = 0; i < oh; ++i) {
          const int64_t ih0 = i * spec.sh - spec.pt;
          for (int64_t j = 0; j < ow; ++j) {
            const int64_t iw0 = j * spec.sw - spec.pl;
            const T* grow = g.data() + ((b * oh + i) * ow + j) * spec.out_channels;
            if (gb)
              for (int64_t co = 0; co < spec.out_channels; ++co) gb[co] += grow[co];
            for (int64_t u = 0; u < spec.kh; ++u) {
              const int64_t ih = ih0 + u * spec.dh;
              if (ih < 0 || ih >= h) continue;
              for (int64_t v = 0; v < spec.kw; ++v) {
                const int64_t iw = iw0 + v * spec.dw;
                if (iw < 0 || iw >= w) continue;
                const int64_t tap = u * spec.kw + v;
                const int64_t xoff = ((b * h + ih) * w + iw) * spec.in_channels;
                for (int64_t gi = 0; gi < spec.groups; ++gi) {
                  const T* wtap = wt2->data() + ((gi * taps + tap) * cg) * og;
                  const T* gg = grow + gi * og;
                  if (gx) {
                    T* gxr = gx + xoff + gi * cg;
                    for (int64_t ci = 0; ci < cg; ++ci) {
                      const T* wrow = wtap + ci * og;
                      T acc = T(0);
                      for (int64_t co = 0; co < og; ++co) acc += gg[co] * wrow[co];
                      gxr[ci] += acc;
                    }
                  }
                  if (ww) {
                    const T* xg = xp + xoff + gi * cg;
                    T* gwtap = gw2.data() + ((gi * taps + tap) * cg) * og;
                    for (int64_t ci = 0; ci < cg; ++ci) {
                      const T xv = xg[ci];
                      T* gwrow = gwtap + ci * og;
                      for (int64_t co = 0; co < og; ++co) gwrow[co] += xv * gg[co];
                    }
                  }
                }
              }
            }
          }
        }
      }
      if (ww) {
        T* gw = weight.grad_ref().data();
        for (int64_t gi = 0; gi < spec.groups; ++gi)
          for (int64_t co = 0; co < og; ++co)
            for (int64_t ci = 0; ci < cg; ++ci)
              for (int64_t tap = 0; tap < taps; ++tap)
                gw[((gi * og + co) * cg + ci) * taps + tap] +=
                    gw2[static_cast<size_t>(((gi * taps + tap) * cg + ci) * og + co)];
      }
    };
    if (bias.defined())
      Tape<T>::active()->record("conv2d", y, {x, weight, bias}, backward);
    else
      Tape<T>::active()->record("conv2d", y, {x, weight}, backward);
  }
  return y;
}

// Depthwise stage followed by a pointwise stage; the standard factorized
// replacement for a dense convolution.
template <typename T>
Tensor<T> depthwise_separable(const Tensor<T>& x, const Conv2dSpec& dw_spec,
                              const Tensor<T>& dw_weight, const Tensor<T>& dw_bias,
                              const Conv2dSpec& pw_spec, const Tensor<T>& pw_weight,
                              const Tensor<T>& pw_bias) {
  if (!dw_spec.is_depthwise())
    throw ContractError("depthwise_separable: first stage is not depthwise (groups " +
                        std::to_string(dw_spec.groups) + ", in " +
                        std::to_string(dw_spec.in_channels) + ")");
  if (!pw_spec.is_pointwise())
    throw ContractError("depthwise_separable: second stage is not pointwise 1x1");
  if (pw_spec.in_channels != dw_spec.out_channels)
    throw ContractError("depthwise_separable: channel chain mismatch, depthwise out " +
                        std::to_string(dw_spec.out_channels) + " vs pointwise in " +
                        std::to_string(pw_spec.in_channels));
  return conv2d(conv2d(x, dw_spec, dw_weight, dw_bias), pw_spec, pw_weight, pw_bias);
}

namespace detail {

inline void check_schedule(const char* op, const std::vector<int64_t>& rates, int64_t k) {
  if (k < 1 || k % 2 == 0)
    throw ContractError(std::string(op) + ": kernel " + std::to_string(k) + " must be odd");
  for (int64_t r : rates)
    if (r < 1) throw ContractError(std::string(op) + ": dilation rates must be >= 1");
}

}  // namespace detail

// Receptive field of a stride-1 stack of equal odd kernels with the given
// dilation schedule: 1 + sum (k-1) * rate.
inline int64_t receptive_field(const std::vector<int64_t>& rates, int64_t k) {
  detail::check_schedule("receptive_field", rates, k);
  int64_t rf = 1;
  for (int64_t r : rates) rf += (k - 1) * r;
  return rf;
}

// Exact set of 1-D input offsets reachable from one output position through
// the stack (iterated Minkowski sum of the tap sets). `continuous` is true
// iff the offsets form a gap-free integer interval — the no-gridding
// condition.
struct GriddingCoverage {
  std::vector<int64_t> offsets;  // sorted ascending
  bool continuous = false;
};

inline GriddingCoverage gridding_coverage(const std::vector<int64_t>& rates, int64_t k) {
  detail::check_schedule("gridding_coverage", rates, k);
  std::vector<int64_t> reach = {0};
  const int64_t half = (k - 1) / 2;
  for (int64_t r : rates) {
    std::vector<int64_t> next;
    next.reserve(reach.size() * static_cast<size_t>(k));
    for (int64_t base : reach)
      for (int64_t tap = -half; tap <= half; ++tap) next.push_back(base + tap * r);
    std::sort(next.begin(), next.end());
    next.erase(std::unique(next.begin(), next.end()), next.end());
    reach = std::move(next);
  }
  GriddingCoverage cov;
  cov.offsets = std::move(reach);
  cov.continuous = static_cast<int64_t>(cov.offsets.size()) ==
                   cov.offsets.back() - cov.offsets.front() + 1;
  return cov;
}

}  // namespace hcm
