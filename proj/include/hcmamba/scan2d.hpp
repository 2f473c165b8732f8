#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>

#include "tensor.hpp"
#include "tensor_ops.hpp"

namespace hcm {

namespace detail {

// Source spatial index (row-major flat) feeding position t of direction k.
// Directions: 0 rows forward, 1 rows reverse, 2 columns forward, 3 columns
// reverse.
inline int64_t scan_source(int64_t k, int64_t t, int64_t h, int64_t w) {
  const int64_t l = h * w;
  switch (k) {
    case 0: return t;
    case 1: return l - 1 - t;
    case 2: return (t % h) * w + t / h;
    default: {
      int64_t u = l - 1 - t;
      return (u % h) * w + u / h;
    }
  }
}

template <typename T>
void require_map(const char* op, const Tensor<T>& x) {
  if (x.rank() != 4)
    throw DimensionError(std::string(op) + ": expected a feature map [B, H, W, C], got shape " +
                         shape_str(x.shape()));
}

}  // namespace detail

// Unrolls a feature map [B, H, W, C] into four directional sequences
// [B, 4, L, C], L = H*W; each direction is a bijective reindexing of the
// spatial positions.
template <typename T>
Tensor<T> scan_expand(const Tensor<T>& x) {
  detail::require_map("scan_expand", x);
  const int64_t nb = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t l = h * w;
  Tensor<T> seqs = Tensor<T>::zeros({nb, 4, l, c});
  const T* xp = x.data();
  T* sp = seqs.mutable_data();
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t k = 0; k < 4; ++k)
      for (int64_t t = 0; t < l; ++t)
        std::memcpy(sp + (((b * 4 + k) * l) + t) * c,
                    xp + (b * l + detail::scan_source(k, t, h, w)) * c,
                    sizeof(T) * static_cast<size_t>(c));
  if (detail::wants_grad<T>({&x})) {
    Tape<T>::active()->record("scan_expand", seqs, {x}, [x, seqs, h, w]() {
      const int64_t nb = x.dim(0), c = x.dim(3), l = h * w;
      const std::vector<T>& g = seqs.grad();
      std::vector<T>& gx = x.grad_ref();
      for (int64_t b = 0; b < nb; ++b)
        for (int64_t k = 0; k < 4; ++k)
          for (int64_t t = 0; t < l; ++t) {
            const T* gs = g.data() + (((b * 4 + k) * l) + t) * c;
            T* gd = gx.data() + (b * l + detail::scan_source(k, t, h, w)) * c;
            for (int64_t i = 0; i < c; ++i) gd[i] += gs[i];
          }
    });
  }
  return seqs;
}

// Inverse-permutes each directional sequence back to map layout and sums the
// four reconstructions pairwise, (d0+d1) + (d2+d3), so an untouched
// expand/merge roundtrip is exactly 4*x.
template <typename T>
Tensor<T> scan_merge(const Tensor<T>& seqs, int64_t h, int64_t w) {
  if (seqs.rank() != 4 || seqs.dim(1) != 4)
    throw DimensionError("scan_merge: expected sequences [B, 4, L, C], got shape " +
                         shape_str(seqs.shape()));
  const int64_t nb = seqs.dim(0), l = seqs.dim(2), c = seqs.dim(3);
  if (l != h * w)
    throw DimensionError("scan_merge: sequence length " + std::to_string(l) +
                         " does not match " + std::to_string(h) + "x" + std::to_string(w));
  Tensor<T> out = Tensor<T>::zeros({nb, h, w, c});
  const T* sp = seqs.data();
  T* op = out.mutable_data();
  // Inverse of scan_source per direction, as t(k, s).
  auto inv = [h, w, l](int64_t k, int64_t s) -> int64_t {
    switch (k) {
      case 0: return s;
      case 1: return l - 1 - s;
      case 2: return (s % w) * h + s / w;
      default: return l - 1 - ((s % w) * h + s / w);
    }
  };
  for (int64_t b = 0; b < nb; ++b) {
    const T* d0 = sp + ((b * 4 + 0) * l) * c;
    const T* d1 = sp + ((b * 4 + 1) * l) * c;
    const T* d2 = sp + ((b * 4 + 2) * l) * c;
    const T* d3 = sp + ((b * 4 + 3) * l) * c;
    for (int64_t s = 0; s < l; ++s) {
      const T* r0 = d0 + inv(0, s) * c;
      const T* r1 = d1 + inv(1, s) * c;
      const T* r2 = d2 + inv(2, s) * c;
      const T* r3 = d3 + inv(3, s) * c;
      T* dst = op + (b * l + s) * c;
      for (int64_t i = 0; i < c; ++i) dst[i] = (r0[i] + r1[i]) + (r2[i] + r3[i]);
    }
  }
  if (detail::wants_grad<T>({&seqs})) {
    Tape<T>::active()->record("scan_merge", out, {seqs}, [seqs, out, h, w]() {
      const int64_t nb = seqs.dim(0), l = seqs.dim(2), c = seqs.dim(3);
      const std::vector<T>& g = out.grad();
      std::vector<T>& gs = seqs.grad_ref();
      for (int64_t b = 0; b < nb; ++b)
        for (int64_t k = 0; k < 4; ++k)
          for (int64_t t = 0; t < l; ++t) {
            const T* gsrc = g.data() + (b * l + detail::scan_source(k, t, h, w)) * c;
            T* gdst = gs.data() + (((b * 4 + k) * l) + t) * c;
            for (int64_t i = 0; i < c; ++i) gdst[i] += gsrc[i];
          }
    });
  }
  return out;
}

// Splits the channel axis in half, order preserved.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x) {
  detail::require_map("channel_split", x);
  const int64_t c = x.dim(3);
  if (c % 2 != 0)
    throw ContractError("channel_split: channel count " + std::to_string(c) + " is odd");
  return {slice_lastdim(x, 0, c / 2), slice_lastdim(x, c / 2, c)};
}

// Parameter-free channel mix: view channels as [groups, C/groups], transpose,
// flatten. out[j*groups + g] = in[g*(C/groups) + j].
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, int64_t groups) {
  if (x.rank() < 1)
    throw DimensionError("channel_shuffle: scalar input has no channel axis");
  const int64_t c = x.dim(x.rank() - 1);
  if (groups < 1 || c % groups != 0)
    throw ContractError("channel_shuffle: channel count " + std::to_string(c) +
                        " is not divisible by groups " + std::to_string(groups));
  std::vector<int64_t> perm(static_cast<size_t>(c));  // output slot -> source channel
  const int64_t per = c / groups;
  for (int64_t g = 0; g < groups; ++g)
    for (int64_t j = 0; j < per; ++j) perm[static_cast<size_t>(j * groups + g)] = g * per + j;
  return permute_lastdim(x, perm);
}

}  // namespace hcm
