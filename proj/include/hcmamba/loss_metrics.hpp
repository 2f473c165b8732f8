#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tensor.hpp"
#include "tensor_ops.hpp"

namespace hcm {

struct LossWeights {
  double w_miou = 0.4;
  double w_dice = 0.4;
  double w_boundary = 0.2;
};

struct MetricReport {
  double miou = 0;
  double dsc = 0;
  double acc = 0;
  double spe = 0;
  double sen = 0;
  double hd95 = 0;
  std::vector<double> per_class_dsc;
};

namespace detail {

constexpr double kSoftEps = 1e-6;

template <typename T>
void check_probs_pair(const char* op, const Tensor<T>& probs, const Tensor<T>& onehot) {
  if (probs.rank() < 2)
    throw DimensionError(std::string(op) + ": expected [..., K] probabilities, got shape " +
                         shape_str(probs.shape()));
  if (probs.shape() != onehot.shape())
    throw DimensionError(std::string(op) + ": probabilities shape " + shape_str(probs.shape()) +
                         " does not match target shape " + shape_str(onehot.shape()));
}

}  // namespace detail

// Soft mean-IoU loss: per class, intersection = sum p*g and union =
// sum (p + g - p*g); loss = 1 - mean_k (I+eps)/(U+eps). The target enters the
// gradient too when it carries one.
template <typename T>
Tensor<T> soft_miou_loss(const Tensor<T>& probs, const Tensor<T>& onehot) {
  detail::check_probs_pair("soft_miou_loss", probs, onehot);
  const int64_t k = probs.dim(probs.rank() - 1);
  const int64_t rows = probs.numel() / k;
  const T eps = T(detail::kSoftEps);
  std::vector<T> inter(static_cast<size_t>(k), T(0)), uni(static_cast<size_t>(k), T(0));
  const T* p = probs.data();
  const T* g = onehot.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < k; ++c) {
      const T pv = p[r * k + c], gv = g[r * k + c];
      inter[static_cast<size_t>(c)] += pv * gv;
      uni[static_cast<size_t>(c)] += pv + gv - pv * gv;
    }
  T mean_iou = T(0);
  for (int64_t c = 0; c < k; ++c)
    mean_iou += (inter[static_cast<size_t>(c)] + eps) / (uni[static_cast<size_t>(c)] + eps);
  mean_iou /= T(k);
  Tensor<T> loss = Tensor<T>::scalar(T(1) - mean_iou);
  detail::check_finite("soft_miou_loss", loss);
  if (detail::wants_grad<T>({&probs, &onehot})) {
    Tape<T>::active()->record(
        "soft_miou_loss", loss, {probs, onehot}, [probs, onehot, loss, inter, uni, k, rows, eps]() {
          const T gy = loss.grad()[0];
          const T* p = probs.data();
          const T* g = onehot.data();
          T* gp = probs.requires_grad() ? probs.grad_ref().data() : nullptr;
          T* gg = onehot.requires_grad() ? onehot.grad_ref().data() : nullptr;
          const T scale = -gy / T(k);
          for (int64_t c = 0; c < k; ++c) {
            const T i_eps = inter[static_cast<size_t>(c)] + eps;
            const T u_eps = uni[static_cast<size_t>(c)] + eps;
            const T inv_u = T(1) / u_eps;
            const T ratio = i_eps * inv_u * inv_u;
            for (int64_t r = 0; r < rows; ++r) {
              const T pv = p[r * k + c], gv = g[r * k + c];
              if (gp) gp[r * k + c] += scale * (gv * inv_u - (T(1) - gv) * ratio);
              if (gg) gg[r * k + c] += scale * (pv * inv_u - (T(1) - pv) * ratio);
            }
          }
        });
  }
  return loss;
}

// Soft Dice loss: per class D = (2I + eps) / (sum p + sum g + eps);
// loss = 1 - mean_k D.
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot) {
  detail::check_probs_pair("soft_dice_loss", probs, onehot);
  const int64_t k = probs.dim(probs.rank() - 1);
  const int64_t rows = probs.numel() / k;
  const T eps = T(detail::kSoftEps);
  std::vector<T> inter(static_cast<size_t>(k), T(0)), total(static_cast<size_t>(k), T(0));
  const T* p = probs.data();
  const T* g = onehot.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < k; ++c) {
      const T pv = p[r * k + c], gv = g[r * k + c];
      inter[static_cast<size_t>(c)] += pv * gv;
      total[static_cast<size_t>(c)] += pv + gv;
    }
  T mean_dice = T(0);
  for (int64_t c = 0; c < k; ++c)
    mean_dice += (T(2) * inter[static_cast<size_t>(c)] + eps) /
                 (total[static_cast<size_t>(c)] + eps);
  mean_dice /= T(k);
  Tensor<T> loss = Tensor<T>::scalar(T(1) - mean_dice);
  detail::check_finite("soft_dice_loss", loss);
  if (detail::wants_grad<T>({&probs, &onehot})) {
    Tape<T>::active()->record(
        "soft_dice_loss", loss, {probs, onehot}, [probs, onehot, loss, inter, total, k, rows, eps]() {
          const T gy = loss.grad()[0];
          const T* p = probs.data();
          const T* g = onehot.data();
          T* gp = probs.requires_grad() ? probs.grad_ref().data() : nullptr;
          T* gg = onehot.requires_grad() ? onehot.grad_ref().data() : nullptr;
          const T scale = -gy / T(k);
          for (int64_t c = 0; c < k; ++c) {
            const T num = T(2) * inter[static_cast<size_t>(c)] + eps;
            const T inv_s = T(1) / (total[static_cast<size_t>(c)] + eps);
            const T ratio = num * inv_s * inv_s;
            for (int64_t r = 0; r < rows; ++r) {
              const T pv = p[r * k + c], gv = g[r * k + c];
              if (gp) gp[r * k + c] += scale * (T(2) * gv * inv_s - ratio);
              if (gg) gg[r * k + c] += scale * (T(2) * pv * inv_s - ratio);
            }
          }
        });
  }
  return loss;
}

// One-hot encoding of integer labels; errors name the offending pixel.
template <typename T>
Tensor<T> one_hot(const Tensor<int32_t>& labels, int64_t num_classes) {
  Shape osh = labels.shape();
  osh.push_back(num_classes);
  Tensor<T> out = Tensor<T>::zeros(osh);
  const int32_t* lp = labels.data();
  T* op = out.mutable_data();
  for (int64_t i = 0; i < labels.numel(); ++i) {
    if (lp[i] < 0 || lp[i] >= num_classes)
      throw DataError("one_hot: label " + std::to_string(lp[i]) + " out of range [0, " +
                      std::to_string(num_classes) + ") at pixel index " + std::to_string(i));
    op[i * num_classes + lp[i]] = T(1);
  }
  return out;
}

// Argmax over the trailing axis, first maximum wins.
template <typename T>
Tensor<int32_t> argmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1)
    throw DimensionError("argmax_lastdim: scalar input has no class axis");
  const int64_t k = x.dim(x.rank() - 1);
  Shape osh(x.shape().begin(), x.shape().end() - 1);
  Tensor<int32_t> out = Tensor<int32_t>::zeros(osh);
  const T* xp = x.data();
  int32_t* op = out.mutable_data();
  const int64_t rows = x.numel() / k;
  for (int64_t r = 0; r < rows; ++r) {
    int64_t best = 0;
    for (int64_t c = 1; c < k; ++c)
      if (xp[r * k + c] > xp[r * k + best]) best = c;
    op[r] = static_cast<int32_t>(best);
  }
  return out;
}

namespace detail {

// Boundary pixels: foreground with at least one background 4-neighbor; the
// image border counts as background.
inline std::vector<int64_t> boundary_pixels(const int32_t* m, int64_t h, int64_t w) {
  std::vector<int64_t> pts;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      if (m[i * w + j] == 0) continue;
      if (i == 0 || j == 0 || i == h - 1 || j == w - 1 || m[(i - 1) * w + j] == 0 ||
          m[(i + 1) * w + j] == 0 || m[i * w + j - 1] == 0 || m[i * w + j + 1] == 0)
        pts.push_back(i * w + j);
    }
  return pts;
}

// Large finite stand-in for "no site"; keeps the parabola intersections free
// of inf-inf NaNs while staying far above any reachable squared distance.
constexpr double kEdtBig = 1e20;

// One-dimensional squared distance transform (lower envelope of parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d,
                   std::vector<int64_t>& v, std::vector<double>& z, int64_t n) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int64_t rk = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int64_t q = 1; q < n; ++q) {
    double s;
    for (;;) {
      const int64_t p = v[static_cast<size_t>(rk)];
      s = ((f[static_cast<size_t>(q)] + static_cast<double>(q * q)) -
           (f[static_cast<size_t>(p)] + static_cast<double>(p * p))) /
          static_cast<double>(2 * q - 2 * p);
      if (s > z[static_cast<size_t>(rk)]) break;
      --rk;
    }
    ++rk;
    v[static_cast<size_t>(rk)] = q;
    z[static_cast<size_t>(rk)] = s;
    z[static_cast<size_t>(rk + 1)] = kInf;
  }
  rk = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(rk + 1)] < static_cast<double>(q)) ++rk;
    const int64_t p = v[static_cast<size_t>(rk)];
    d[static_cast<size_t>(q)] = static_cast<double>((q - p) * (q - p)) + f[static_cast<size_t>(p)];
  }
}

// Exact squared Euclidean distance transform to the given site pixels.
inline std::vector<double> edt_squared(const std::vector<int64_t>& sites, int64_t h,
                                       int64_t w) {
  std::vector<double> grid(static_cast<size_t>(h * w), kEdtBig);
  for (int64_t s : sites) grid[static_cast<size_t>(s)] = 0.0;
  const int64_t n = std::max(h, w);
  std::vector<double> f(static_cast<size_t>(n)), d(static_cast<size_t>(n));
  std::vector<int64_t> v(static_cast<size_t>(n));
  std::vector<double> z(static_cast<size_t>(n + 1));
  for (int64_t j = 0; j < w; ++j) {  // columns first
    for (int64_t i = 0; i < h; ++i) f[static_cast<size_t>(i)] = grid[static_cast<size_t>(i * w + j)];
    edt_1d(f, d, v, z, h);
    for (int64_t i = 0; i < h; ++i) grid[static_cast<size_t>(i * w + j)] = d[static_cast<size_t>(i)];
  }
  for (int64_t i = 0; i < h; ++i) {  // then rows
    for (int64_t j = 0; j < w; ++j) f[static_cast<size_t>(j)] = grid[static_cast<size_t>(i * w + j)];
    edt_1d(f, d, v, z, w);
    for (int64_t j = 0; j < w; ++j) grid[static_cast<size_t>(i * w + j)] = d[static_cast<size_t>(j)];
  }
  return grid;
}

inline void check_mask_pair(const char* op, const Tensor<int32_t>& a,
                            const Tensor<int32_t>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": masks must share a [H, W] shape, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Directed nearest-boundary distances from each pixel in `from` to the set
// `to` (which must be non-empty), exact.
inline std::vector<double> directed_boundary_distances(const std::vector<int64_t>& from,
                                                       const std::vector<int64_t>& to,
                                                       int64_t h, int64_t w) {
  std::vector<double> sq = edt_squared(to, h, w);
  std::vector<double> out;
  out.reserve(from.size());
  for (int64_t p : from) out.push_back(std::sqrt(sq[static_cast<size_t>(p)]));
  return out;
}

}  // namespace detail

// Symmetric mean boundary distance between the foreground boundaries of two
// masks. Degenerate conventions: both boundaries empty -> 0; exactly one
// empty -> each directed term is the image diagonal. Not differentiable.
inline double boundary_loss(const Tensor<int32_t>& pred_mask, const Tensor<int32_t>& gt_mask) {
  detail::check_mask_pair("boundary_loss", pred_mask, gt_mask);
  const int64_t h = pred_mask.dim(0), w = pred_mask.dim(1);
  auto bp = detail::boundary_pixels(pred_mask.data(), h, w);
  auto bg = detail::boundary_pixels(gt_mask.data(), h, w);
  if (bp.empty() && bg.empty()) return 0.0;
  const double diag = std::sqrt(static_cast<double>(h * h + w * w));
  if (bp.empty() || bg.empty()) return diag;
  auto p_to_g = detail::directed_boundary_distances(bp, bg, h, w);
  auto g_to_p = detail::directed_boundary_distances(bg, bp, h, w);
  double mp = 0, mg = 0;
  for (double v : p_to_g) mp += v;
  for (double v : g_to_p) mg += v;
  mp /= static_cast<double>(p_to_g.size());
  mg /= static_cast<double>(g_to_p.size());
  return 0.5 * (mp + mg);
}

// 95th percentile (linear interpolation) of the pooled directed boundary
// distances in both directions.
inline double hd95(const Tensor<int32_t>& pred_mask, const Tensor<int32_t>& gt_mask) {
  detail::check_mask_pair("hd95", pred_mask, gt_mask);
  const int64_t h = pred_mask.dim(0), w = pred_mask.dim(1);
  auto bp = detail::boundary_pixels(pred_mask.data(), h, w);
  auto bg = detail::boundary_pixels(gt_mask.data(), h, w);
  if (bp.empty() && bg.empty()) return 0.0;
  std::vector<double> pooled;
  if (bp.empty() || bg.empty()) {
    const double diag = std::sqrt(static_cast<double>(h * h + w * w));
    pooled = {diag, diag};
  } else {
    pooled = detail::directed_boundary_distances(bp, bg, h, w);
    auto back = detail::directed_boundary_distances(bg, bp, h, w);
    pooled.insert(pooled.end(), back.begin(), back.end());
  }
  std::sort(pooled.begin(), pooled.end());
  const double rank = 0.95 * static_cast<double>(pooled.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= pooled.size()) return pooled.back();
  const double frac = rank - static_cast<double>(lo);
  return pooled[lo] + frac * (pooled[lo + 1] - pooled[lo]);
}

// Weighted sum of the soft mIoU loss, soft Dice loss, and the (constant,
// non-differentiable) boundary term computed on the argmax mask. Components
// with zero weight are skipped entirely, so boundary-only weights produce a
// loss with no gradient path.
template <typename T>
Tensor<T> composite_loss(const Tensor<T>& logits, const Tensor<int32_t>& labels,
                         const LossWeights& weights) {
  if (weights.w_miou < 0 || weights.w_dice < 0 || weights.w_boundary < 0 ||
      weights.w_miou + weights.w_dice + weights.w_boundary <= 0)
    throw ContractError("composite_loss: weights must be non-negative with positive sum");
  if (logits.rank() != 4)
    throw DimensionError("composite_loss: expected logits [B, H, W, K], got shape " +
                         shape_str(logits.shape()));
  Shape lsh = {logits.dim(0), logits.dim(1), logits.dim(2)};
  if (labels.shape() != lsh)
    throw DimensionError("composite_loss: labels shape " + shape_str(labels.shape()) +
                         " does not match logits " + shape_str(logits.shape()));
  const int64_t k = logits.dim(3);
  Tensor<T> total;
  if (weights.w_miou > 0 || weights.w_dice > 0) {
    auto onehot = one_hot<T>(labels, k);
    auto probs = softmax_lastdim(logits);
    if (weights.w_miou > 0) total = scale(soft_miou_loss(probs, onehot), T(weights.w_miou));
    if (weights.w_dice > 0) {
      auto dice = scale(soft_dice_loss(probs, onehot), T(weights.w_dice));
      total = total.defined() ? add(total, dice) : dice;
    }
  } else {
    // Validate labels even when only the boundary term is active.
    one_hot<T>(labels, k);
  }
  if (weights.w_boundary > 0) {
    const int64_t nb = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    auto pred = argmax_lastdim(logits);
    double acc = 0.0;
    for (int64_t b = 0; b < nb; ++b) {
      auto pm = Tensor<int32_t>::zeros({h, w});
      auto lm = Tensor<int32_t>::zeros({h, w});
      std::copy(pred.data() + b * h * w, pred.data() + (b + 1) * h * w, pm.mutable_data());
      std::copy(labels.data() + b * h * w, labels.data() + (b + 1) * h * w,
                lm.mutable_data());
      acc += boundary_loss(pm, lm);
    }
    auto bterm = Tensor<T>::scalar(T(weights.w_boundary * acc / static_cast<double>(nb)));
    total = total.defined() ? add(total, bterm) : bterm;
  }
  return total;
}

// Multi-class confusion matrix, row = ground truth, column = prediction.
inline std::vector<int64_t> confusion_matrix(const Tensor<int32_t>& pred,
                                             const Tensor<int32_t>& gt,
                                             int64_t num_classes) {
  if (pred.shape() != gt.shape())
    throw DimensionError("evaluate: mask shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(gt.shape()) + " differ");
  std::vector<int64_t> cm(static_cast<size_t>(num_classes * num_classes), 0);
  const int32_t* pp = pred.data();
  const int32_t* gp = gt.data();
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (pp[i] < 0 || pp[i] >= num_classes || gp[i] < 0 || gp[i] >= num_classes)
      throw DataError("evaluate: class " +
                      std::to_string(pp[i] < 0 || pp[i] >= num_classes ? pp[i] : gp[i]) +
                      " out of range [0, " + std::to_string(num_classes) +
                      ") at pixel index " + std::to_string(i));
    ++cm[static_cast<size_t>(gp[i] * num_classes + pp[i])];
  }
  return cm;
}

// Confusion-matrix metrics. Binary tasks treat class 1 as positive;
// multi-class tasks macro-average the per-class scores (accuracy stays the
// overall pixel accuracy). Empty denominators count as a perfect score.
inline MetricReport metrics_from_confusion(const std::vector<int64_t>& cm,
                                           int64_t num_classes) {
  MetricReport rep;
  int64_t total = 0, trace = 0;
  for (int64_t g = 0; g < num_classes; ++g)
    for (int64_t p = 0; p < num_classes; ++p) total += cm[static_cast<size_t>(g * num_classes + p)];
  auto safe = [](double num, double den) { return den == 0 ? 1.0 : num / den; };
  double sum_iou = 0, sum_dsc = 0, sum_sen = 0, sum_spe = 0;
  rep.per_class_dsc.resize(static_cast<size_t>(num_classes));
  for (int64_t c = 0; c < num_classes; ++c) {
    const int64_t tp = cm[static_cast<size_t>(c * num_classes + c)];
    int64_t row = 0, col = 0;
    for (int64_t j = 0; j < num_classes; ++j) {
      row += cm[static_cast<size_t>(c * num_classes + j)];
      col += cm[static_cast<size_t>(j * num_classes + c)];
    }
    const int64_t fn = row - tp, fp = col - tp, tn = total - tp - fn - fp;
    trace += tp;
    const double iou = safe(static_cast<double>(tp), static_cast<double>(tp + fp + fn));
    const double dsc = safe(static_cast<double>(2 * tp), static_cast<double>(2 * tp + fp + fn));
    rep.per_class_dsc[static_cast<size_t>(c)] = dsc;
    const double sen = safe(static_cast<double>(tp), static_cast<double>(tp + fn));
    const double spe = safe(static_cast<double>(tn), static_cast<double>(tn + fp));
    if (num_classes == 2 && c == 1) {
      rep.miou = iou;
      rep.dsc = dsc;
      rep.sen = sen;
      rep.spe = spe;
    }
    sum_iou += iou;
    sum_dsc += dsc;
    sum_sen += sen;
    sum_spe += spe;
  }
  rep.acc = total == 0 ? 1.0 : static_cast<double>(trace) / static_cast<double>(total);
  if (num_classes != 2) {
    const double d = static_cast<double>(num_classes);
    rep.miou = sum_iou / d;
    rep.dsc = sum_dsc / d;
    rep.sen = sum_sen / d;
    rep.spe = sum_spe / d;
  }
  return rep;
}

inline MetricReport evaluate(const Tensor<int32_t>& pred, const Tensor<int32_t>& gt,
                             int64_t num_classes) {
  detail::check_mask_pair("evaluate", pred, gt);
  MetricReport rep = metrics_from_confusion(confusion_matrix(pred, gt, num_classes),
                                            num_classes);
  rep.hd95 = hd95(pred, gt);
  return rep;
}

}  // namespace hcm
