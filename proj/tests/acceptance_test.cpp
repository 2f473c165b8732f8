// End-to-end acceptance suite: ten numbered criteria, each printing one
// PASS/FAIL line with the measured quantities and their limits. Criteria 9
// and 10 train real models and dominate the runtime (~15 minutes single
// core); everything else completes in seconds.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "hcmamba/config.hpp"
#include "hcmamba/conv.hpp"
#include "hcmamba/data.hpp"
#include "hcmamba/grad_check.hpp"
#include "hcmamba/loss_metrics.hpp"
#include "hcmamba/model.hpp"
#include "hcmamba/rng.hpp"
#include "hcmamba/scan2d.hpp"
#include "hcmamba/ssm.hpp"
#include "hcmamba/tensor_ops.hpp"
#include "hcmamba/train.hpp"

namespace {

namespace fs = std::filesystem;
using hcm::ContinuousSSM;
using hcm::SplitMix64;
using hcm::Tensor;

std::string fmt(const char* f, ...) {
  char buf[768];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void criterion(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  EXPECT_TRUE(pass) << "criterion " << id << ": " << detail;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<double> rnd(SplitMix64& rng, hcm::Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.mutable_data()[i] = rng.uniform(lo, hi);
  return t;
}

// ---------------------------------------------------------------------------
// 1. Recurrent and convolutional scan agree on random stable systems.
// ---------------------------------------------------------------------------
void criterion1() {
  auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(101);
  const int kTrials = 120;
  double max_err = 0.0;
  for (int trial = 0; trial < kTrials; ++trial) {
    const int64_t n = 1 + static_cast<int64_t>(rng.below(8));
    const int64_t len = 1 + static_cast<int64_t>(rng.below(64));
    std::vector<double> a(n), b(n), c(n);
    for (int64_t i = 0; i < n; ++i) {
      a[static_cast<size_t>(i)] = -rng.uniform(0.05, 4.0);
      b[static_cast<size_t>(i)] = rng.uniform(-2.0, 2.0);
      c[static_cast<size_t>(i)] = rng.uniform(-2.0, 2.0);
    }
    auto disc = hcm::discretize_zoh(ContinuousSSM<double>(a, b, c, rng.uniform(-1.0, 1.0)),
                                    rng.uniform(0.01, 1.0));
    std::vector<double> xs(static_cast<size_t>(len));
    for (auto& v : xs) v = rng.uniform(-3.0, 3.0);
    auto x = Tensor<double>::from({len}, xs);
    auto yr = hcm::scan_recurrent(disc, x);
    auto yc = hcm::scan_convolutional(disc, x);
    for (int64_t t = 0; t < len; ++t)
      max_err = std::max(max_err, std::abs(yr.at({t}) - yc.at({t})));
  }
  const double secs = seconds_since(t0);
  criterion(1, max_err < 1e-10 && secs < 5.0,
            fmt("scan modes: max |recurrent - convolutional| %.3g over %d systems "
                "(limit 1e-10) in %.2f s (limit 5 s)",
                max_err, kTrials, secs));
}

// ---------------------------------------------------------------------------
// 2. Discretization: semigroup law and direct closed-form evaluation,
//    including the small-step series branch.
// ---------------------------------------------------------------------------
void criterion2() {
  SplitMix64 rng(103);
  double worst_semi = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const double a = -rng.uniform(0.05, 8.0);
    const double delta = rng.uniform(1e-4, 1.5);
    auto whole = hcm::discretize_zoh(ContinuousSSM<double>({a}, {1.0}, {1.0}, 0.0), delta);
    auto half =
        hcm::discretize_zoh(ContinuousSSM<double>({a}, {1.0}, {1.0}, 0.0), delta / 2.0);
    worst_semi = std::max(worst_semi, std::abs(whole.a_bar[0] - half.a_bar[0] * half.a_bar[0]));
  }

  const double kA[] = {-0.25, -1.0, -3.0, -17.0};
  const double kDelta[] = {1e-13, 1e-11, 1e-9, 5e-9, 1e-7, 1e-4, 0.05, 0.7};
  double worst_b = 0.0, worst_a = 0.0;
  bool series_hit = false, expm1_hit = false;
  for (double a : kA) {
    for (double delta : kDelta) {
      (std::abs(delta * a) < 1e-8 ? series_hit : expm1_hit) = true;
      auto disc = hcm::discretize_zoh(ContinuousSSM<double>({a}, {1.0}, {1.0}, 0.0), delta);
      const double b_direct = (std::exp(delta * a) - 1.0) / a;
      worst_b = std::max(worst_b, std::abs(disc.b_bar[0] - b_direct));
      worst_a = std::max(worst_a, std::abs(disc.a_bar[0] - std::exp(delta * a)));
    }
  }
  criterion(2,
            worst_semi <= 1e-12 && worst_b <= 1e-12 && worst_a <= 1e-12 && series_hit &&
                expm1_hit,
            fmt("discretization: semigroup err %.3g, input-factor err vs direct form %.3g "
                "(limits 1e-12), series branch exercised: %s",
                worst_semi, worst_b, series_hit && expm1_hit ? "yes" : "NO"));
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient suite over every differentiable op and the
//    full dual-branch block.
// ---------------------------------------------------------------------------
void criterion3() {
  auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(105);
  double worst = 0.0;
  std::string failed;
  int cases = 0;

  auto run = [&](const char* name,
                 const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& f,
                 std::vector<Tensor<double>> inputs) {
    auto rep = hcm::grad_check(f, std::move(inputs), 1e-4);
    worst = std::max(worst, rep.max_rel_err);
    ++cases;
    if (!rep.pass) failed += std::string(failed.empty() ? "" : ", ") + name;
  };
  auto quad = [](const Tensor<double>& y) { return hcm::sum_all(hcm::mul(y, y)); };

  // Elementwise arithmetic: add, sub, mul, divide, scale, add_scalar.
  run("arith",
      [&](std::vector<Tensor<double>>& in) {
        auto den = hcm::add_scalar(hcm::scale(in[2], 0.5), 2.0);
        return hcm::sum_all(hcm::divide(hcm::mul(hcm::add(in[0], in[1]), hcm::sub(in[0], in[1])), den));
      },
      {rnd(rng, {2, 3}), rnd(rng, {2, 3}), rnd(rng, {2, 3}, 0.5, 1.5)});

  // Activations: silu, sigmoid, softplus, exp.
  run("activations",
      [&](std::vector<Tensor<double>>& in) {
        auto y = hcm::add(hcm::add(hcm::silu(in[0]), hcm::sigmoid(in[0])),
                          hcm::add(hcm::softplus(in[0]), hcm::exp(hcm::scale(in[0], 0.3))));
        return hcm::sum_all(hcm::mul(y, y));
      },
      {rnd(rng, {2, 3}, -1.5, 1.5)});

  run("matmul",
      [&](std::vector<Tensor<double>>& in) {
        return hcm::sum_all(hcm::mul(hcm::matmul(in[0], in[1]), hcm::matmul(in[0], in[1])));
      },
      {rnd(rng, {3, 4}), rnd(rng, {4, 2})});

  // Shape plumbing: reshape, slice, concat, permute.
  run("reshape-slice-concat-permute",
      [&](std::vector<Tensor<double>>& in) {
        auto flat = hcm::reshape(in[0], {3, 4});
        auto sl = hcm::slice_lastdim(in[0], 1, 4);
        auto cat = hcm::concat_lastdim(sl, in[1]);
        auto perm = hcm::permute_lastdim(cat, {4, 2, 0, 1, 3});
        return hcm::add(hcm::sum_all(hcm::mul(perm, perm)), hcm::sum_all(hcm::mul(flat, flat)));
      },
      {rnd(rng, {2, 6}), rnd(rng, {2, 2})});

  run("layer-norm",
      [&](std::vector<Tensor<double>>& in) {
        auto y = hcm::layer_norm(in[0], in[1], in[2]);
        return hcm::sum_all(hcm::mul(y, y));
      },
      {rnd(rng, {2, 5}), rnd(rng, {5}, 0.5, 1.5), rnd(rng, {5})});

  {
    auto w = rnd(rng, {2, 4});
    run("softmax-mean",
        [&, w](std::vector<Tensor<double>>& in) {
          auto a = hcm::sum_all(hcm::mul(hcm::softmax_lastdim(in[0]), w));
          return hcm::add(a, hcm::mean_all(hcm::mul(in[0], in[0])));
        },
        {rnd(rng, {2, 4}, -2.0, 2.0)});
  }

  run("upsample-nearest",
      [&](std::vector<Tensor<double>>& in) { return quad(hcm::upsample_nearest(in[0], 2)); },
      {rnd(rng, {1, 2, 3, 2})});
  run("upsample-bilinear",
      [&](std::vector<Tensor<double>>& in) { return quad(hcm::upsample_bilinear(in[0], 3)); },
      {rnd(rng, {1, 2, 3, 2})});

  {
    auto spec = hcm::Conv2dSpec::same(2, 3, 3, 2);  // dilated dense conv
    run("conv2d-dilated",
        [&, spec](std::vector<Tensor<double>>& in) {
          return quad(hcm::conv2d(in[0], spec, in[1], in[2]));
        },
        {rnd(rng, {1, 5, 5, 2}), rnd(rng, {3, 2, 3, 3}, -0.5, 0.5), rnd(rng, {3})});
  }
  {
    auto spec = hcm::Conv2dSpec::same(2, 2, 3, 1);  // strided, bias-free
    spec.sh = spec.sw = 2;
    run("conv2d-strided",
        [&, spec](std::vector<Tensor<double>>& in) {
          return quad(hcm::conv2d(in[0], spec, in[1], Tensor<double>()));
        },
        {rnd(rng, {1, 5, 5, 2}), rnd(rng, {2, 2, 3, 3}, -0.5, 0.5)});
  }
  {
    auto dw = hcm::Conv2dSpec::depthwise(3, 3);
    auto pw = hcm::Conv2dSpec::pointwise(3, 2);
    run("depthwise-separable",
        [&, dw, pw](std::vector<Tensor<double>>& in) {
          return quad(hcm::depthwise_separable(in[0], dw, in[1], in[2], pw, in[3], in[4]));
        },
        {rnd(rng, {1, 4, 4, 3}), rnd(rng, {3, 1, 3, 3}, -0.5, 0.5), rnd(rng, {3}),
         rnd(rng, {2, 3, 1, 1}, -0.5, 0.5), rnd(rng, {2})});
  }

  {
    auto disc = hcm::discretize_zoh(
        ContinuousSSM<double>({-0.7, -1.3}, {0.8, -0.5}, {1.1, 0.6}, 0.4), 0.3);
    run("scan-recurrent",
        [&, disc](std::vector<Tensor<double>>& in) { return quad(hcm::scan_recurrent(disc, in[0])); },
        {rnd(rng, {6}, -2.0, 2.0)});
    run("scan-convolutional",
        [&, disc](std::vector<Tensor<double>>& in) {
          return quad(hcm::scan_convolutional(disc, in[0]));
        },
        {rnd(rng, {6}, -2.0, 2.0)});
  }

  {
    const int64_t kL = 5, kD = 3, kN = 3, kR = 2;
    run("selective-scan",
        [&](std::vector<Tensor<double>>& in) {
          hcm::SelectivityWeights<double> w;
          w.w_dt_down = in[1];
          w.w_dt_up = in[2];
          w.b_dt = in[3];
          w.w_b = in[4];
          w.b_b = in[5];
          w.w_c = in[6];
          w.b_c = in[7];
          return quad(hcm::selective_scan(in[0], w, in[8], in[9]));
        },
        {rnd(rng, {1, kL, kD}), rnd(rng, {kD, kR}, -0.4, 0.4), rnd(rng, {kR, kD}, -0.4, 0.4),
         rnd(rng, {kD}, -0.2, 0.8), rnd(rng, {kD, kN}, -0.5, 0.5), rnd(rng, {kN}, -0.3, 0.3),
         rnd(rng, {kD, kN}, -0.5, 0.5), rnd(rng, {kN}, -0.3, 0.3),
         rnd(rng, {kD, kN}, -1.5, -0.5), rnd(rng, {kD}, -0.5, 1.5)});
  }

  run("scan-expand-merge",
      [&](std::vector<Tensor<double>>& in) {
        return quad(hcm::scan_merge(hcm::scan_expand(in[0]), 3, 4));
      },
      {rnd(rng, {1, 3, 4, 2})});

  run("channel-split-shuffle",
      [&](std::vector<Tensor<double>>& in) {
        auto halves = hcm::channel_split(in[0]);
        auto y = hcm::channel_shuffle(
            hcm::concat_lastdim(hcm::silu(halves.first), halves.second), 2);
        return hcm::sum_all(hcm::mul(y, y));
      },
      {rnd(rng, {1, 2, 2, 4})});

  run("linear",
      [&](std::vector<Tensor<double>>& in) {
        hcm::LinearParams<double> p{in[1], in[2]};
        return quad(hcm::linear(in[0], p));
      },
      {rnd(rng, {2, 3}), rnd(rng, {3, 2}, -0.5, 0.5), rnd(rng, {2})});

  run("patch-embed",
      [&](std::vector<Tensor<double>>& in) {
        hcm::PatchEmbedParams<double> p;
        p.w = in[1];
        p.b = in[2];
        p.norm.gamma = in[3];
        p.norm.beta = in[4];
        return quad(hcm::patch_embed(in[0], p));
      },
      {rnd(rng, {1, 8, 8, 3}), rnd(rng, {4, 3, 4, 4}, -0.3, 0.3), rnd(rng, {4}),
       rnd(rng, {4}, 0.5, 1.5), rnd(rng, {4})});

  run("patch-merge",
      [&](std::vector<Tensor<double>>& in) {
        hcm::MergeParams<double> p;
        p.norm.gamma = in[1];
        p.norm.beta = in[2];
        p.reduce.w = in[3];
        p.reduce.b = in[4];
        return quad(hcm::patch_merge(in[0], p));
      },
      {rnd(rng, {1, 4, 4, 4}), rnd(rng, {16}, 0.5, 1.5), rnd(rng, {16}),
       rnd(rng, {16, 8}, -0.4, 0.4), rnd(rng, {8})});

  {
    // Soft overlap losses against a fixed one-hot target.
    auto p = Tensor<double>::zeros({1, 3, 3, 2});
    auto g = Tensor<double>::zeros({1, 3, 3, 2});
    for (int64_t i = 0; i < 9; ++i) {
      const double v = rng.uniform(0.05, 0.95);
      p.mutable_data()[i * 2] = v;
      p.mutable_data()[i * 2 + 1] = 1 - v;
      g.mutable_data()[i * 2 + static_cast<int64_t>(rng.below(2))] = 1.0;
    }
    run("soft-losses",
        [&, g](std::vector<Tensor<double>>& in) {
          return hcm::add(hcm::soft_miou_loss(in[0], g), hcm::soft_dice_loss(in[0], g));
        },
        {p});
  }

  {
    // Full dual-branch block: every parameter and the input map.
    hcm::ModelConfig cfg;
    cfg.base_channels = 8;
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.state_size = 4;
    cfg.num_classes = 2;
    cfg.input_size = 32;
    cfg.dilation_schedule = {1, 2, 3, 1};
    cfg.conv_variant = hcm::ConvVariant::kBoth;
    SplitMix64 brng(11);
    auto block = hcm::init_block<double>(brng, 4, cfg);
    auto x = rnd(rng, {1, 4, 4, 8});
    std::vector<Tensor<double>> inputs;
    hcm::visit_block<double>("b", block, cfg,
                             [&](const std::string&, Tensor<double>& t) { inputs.push_back(t); });
    inputs.push_back(x);
    run("hc-ssm-block",
        [&, x](std::vector<Tensor<double>>&) { return quad(hcm::hc_ssm_block(x, block, cfg)); },
        inputs);
  }

  const double secs = seconds_since(t0);
  criterion(3, failed.empty() && secs < 120.0,
            fmt("gradients: %d op suites, worst rel err %.3g (limit 1e-4)%s%s in %.1f s "
                "(limit 120 s)",
                cases, worst, failed.empty() ? "" : ", FAILED: ", failed.c_str(), secs));
}

// ---------------------------------------------------------------------------
// 4. Directional scan roundtrip and per-direction bijectivity.
// ---------------------------------------------------------------------------
void criterion4() {
  SplitMix64 rng(107);
  bool roundtrip_ok = true;
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t h = 1 + static_cast<int64_t>(rng.below(6));
    const int64_t w = 1 + static_cast<int64_t>(rng.below(6));
    const int64_t b = 1 + static_cast<int64_t>(rng.below(2));
    const int64_t c = 1 + static_cast<int64_t>(rng.below(3));
    auto x = rnd(rng, {b, h, w, c}, -4.0, 4.0);
    auto merged = hcm::scan_merge(hcm::scan_expand(x), h, w);
    for (int64_t i = 0; i < x.numel(); ++i)
      if (merged.data()[i] != 4.0 * x.data()[i]) roundtrip_ok = false;
  }

  bool bijective = true;
  const int64_t dims[][2] = {{3, 5}, {5, 3}, {4, 4}, {1, 7}, {7, 1}};
  for (auto& d : dims) {
    const int64_t h = d[0], w = d[1], l = h * w;
    for (int64_t k = 0; k < 4; ++k) {
      std::vector<int64_t> inv(static_cast<size_t>(l), -1);
      for (int64_t t = 0; t < l; ++t) {
        const int64_t s = hcm::detail::scan_source(k, t, h, w);
        if (s < 0 || s >= l || inv[static_cast<size_t>(s)] != -1) bijective = false;
        else inv[static_cast<size_t>(s)] = t;
      }
      for (int64_t s = 0; s < l; ++s) {
        const int64_t t = inv[static_cast<size_t>(s)];
        if (t < 0 || hcm::detail::scan_source(k, t, h, w) != s) bijective = false;
      }
    }
  }
  criterion(4, roundtrip_ok && bijective,
            fmt("scan roundtrip: merge(expand(x)) == 4x bitwise on 50 maps: %s; all four "
                "direction permutations invert exactly: %s",
                roundtrip_ok ? "yes" : "NO", bijective ? "yes" : "NO"));
}

// ---------------------------------------------------------------------------
// 5. Channel shuffle bijectivity and the canonical 4-channel order.
// ---------------------------------------------------------------------------
void criterion5() {
  bool bijective = true;
  for (int64_t c = 2; c <= 64; c += 2) {
    auto x = Tensor<double>::zeros({1, 1, 1, c});
    for (int64_t i = 0; i < c; ++i) x.mutable_data()[i] = static_cast<double>(i);
    auto y = hcm::channel_shuffle(x, 2);
    std::vector<char> seen(static_cast<size_t>(c), 0);
    for (int64_t i = 0; i < c; ++i) {
      const int64_t v = static_cast<int64_t>(y.data()[i]);
      if (v < 0 || v >= c || seen[static_cast<size_t>(v)] ||
          y.data()[i] != static_cast<double>(v))
        bijective = false;
      else
        seen[static_cast<size_t>(v)] = 1;
    }
  }

  auto x4 = Tensor<double>::zeros({1, 1, 1, 4});
  for (int64_t i = 0; i < 4; ++i) x4.mutable_data()[i] = static_cast<double>(i);
  auto y4 = hcm::channel_shuffle(x4, 2);
  const double want[4] = {0, 2, 1, 3};
  bool order_ok = true;
  for (int64_t i = 0; i < 4; ++i)
    if (y4.data()[i] != want[i]) order_ok = false;
  criterion(5, bijective && order_ok,
            fmt("channel shuffle: bijective for every even C <= 64: %s; C=4 groups=2 -> "
                "[%g,%g,%g,%g] (want [0,2,1,3])",
                bijective ? "yes" : "NO", y4.data()[0], y4.data()[1], y4.data()[2],
                y4.data()[3]));
}

// ---------------------------------------------------------------------------
// 6. Receptive-field formula vs brute-force gradient support; gridding flags.
// ---------------------------------------------------------------------------
void criterion6() {
  const int64_t rf111 = hcm::receptive_field({1, 1, 1}, 3);
  const int64_t rf123 = hcm::receptive_field({1, 2, 3}, 3);
  const int64_t rf1231 = hcm::receptive_field({1, 2, 3, 1}, 3);
  bool formula_ok = rf111 == 7 && rf123 == 13 && rf1231 == 15;

  // Brute force: all-ones kernels, gradient of the center output pixel; the
  // nonzero-gradient columns through the center row must equal the coverage
  // offsets and the bounding box must match the formula.
  bool support_ok = true;
  const std::vector<std::vector<int64_t>> schedules = {
      {1, 1, 1}, {2, 2, 2}, {1, 2, 3}, {1, 2, 3, 1}};
  for (const auto& sched : schedules) {
    const int64_t rf = hcm::receptive_field(sched, 3);
    const int64_t n = rf + 6, ctr = n / 2;
    auto x = Tensor<double>::zeros({1, n, n, 1});
    std::fill(x.mutable_data(), x.mutable_data() + x.numel(), 1.0);
    auto pick = Tensor<double>::zeros({1, n, n, 1});
    pick.mutable_data()[ctr * n + ctr] = 1.0;

    hcm::Tape<double> tape;
    hcm::Tape<double>::Scope scope(tape);
    x.set_requires_grad(true);
    Tensor<double> y = x;
    std::vector<Tensor<double>> kernels;
    for (int64_t r : sched) {
      auto w = Tensor<double>::zeros({1, 1, 3, 3});
      std::fill(w.mutable_data(), w.mutable_data() + 9, 1.0);
      kernels.push_back(w);
      y = hcm::conv2d(y, hcm::Conv2dSpec::same(1, 1, 3, r), kernels.back(), Tensor<double>());
    }
    tape.backward(hcm::sum_all(hcm::mul(y, pick)));
    const auto& g = x.grad();

    int64_t rmin = n, rmax = -1, cmin = n, cmax = -1;
    std::vector<int64_t> row_offsets;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        if (g[static_cast<size_t>(i * n + j)] != 0.0) {
          rmin = std::min(rmin, i);
          rmax = std::max(rmax, i);
          cmin = std::min(cmin, j);
          cmax = std::max(cmax, j);
          if (i == ctr) row_offsets.push_back(j - ctr);
        }
    auto cov = hcm::gridding_coverage(sched, 3);
    if (rmax - rmin + 1 != rf || cmax - cmin + 1 != rf) support_ok = false;
    if (row_offsets != cov.offsets) support_ok = false;
  }

  const bool grid_ok = !hcm::gridding_coverage({2, 2, 2}, 3).continuous &&
                       hcm::gridding_coverage({1, 2, 3}, 3).continuous &&
                       hcm::gridding_coverage({1, 2, 3, 1}, 3).continuous;
  criterion(6, formula_ok && support_ok && grid_ok,
            fmt("receptive field: [1,1,1]->%lld, [1,2,3]->%lld, [1,2,3,1]->%lld (want "
                "7/13/15); gradient support matches formula and coverage offsets: %s; "
                "[2,2,2] discontinuous and sawtooth continuous: %s",
                static_cast<long long>(rf111), static_cast<long long>(rf123),
                static_cast<long long>(rf1231), support_ok ? "yes" : "NO",
                grid_ok ? "yes" : "NO"));
}

// ---------------------------------------------------------------------------
// 7. Loss and metric oracles.
// ---------------------------------------------------------------------------

// Independent brute-force oracles, deliberately written without the distance
// transform: boundary pixels by direct neighborhood inspection, distances by
// exhaustive nearest-neighbor search.
std::vector<int64_t> oracle_boundary(const Tensor<int32_t>& m) {
  const int64_t h = m.dim(0), w = m.dim(1);
  std::vector<int64_t> pts;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      if (m.data()[i * w + j] == 0) continue;
      const bool border = i == 0 || j == 0 || i == h - 1 || j == w - 1;
      if (border || m.data()[(i - 1) * w + j] == 0 || m.data()[(i + 1) * w + j] == 0 ||
          m.data()[i * w + j - 1] == 0 || m.data()[i * w + j + 1] == 0)
        pts.push_back(i * w + j);
    }
  return pts;
}

std::vector<double> oracle_directed(const std::vector<int64_t>& from,
                                    const std::vector<int64_t>& to, int64_t w) {
  std::vector<double> out;
  out.reserve(from.size());
  for (int64_t p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (int64_t q : to) {
      const double dy = static_cast<double>(p / w - q / w);
      const double dx = static_cast<double>(p % w - q % w);
      best = std::min(best, dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

double oracle_boundary_loss(const Tensor<int32_t>& pm, const Tensor<int32_t>& gm) {
  const int64_t h = pm.dim(0), w = pm.dim(1);
  auto bp = oracle_boundary(pm);
  auto bg = oracle_boundary(gm);
  if (bp.empty() && bg.empty()) return 0.0;
  const double diag = std::sqrt(static_cast<double>(h * h + w * w));
  if (bp.empty() || bg.empty()) return diag;
  auto fwd = oracle_directed(bp, bg, w);
  auto back = oracle_directed(bg, bp, w);
  double mp = 0, mg = 0;
  for (double v : fwd) mp += v;
  for (double v : back) mg += v;
  return 0.5 * (mp / static_cast<double>(fwd.size()) + mg / static_cast<double>(back.size()));
}

double oracle_hd95(const Tensor<int32_t>& pm, const Tensor<int32_t>& gm) {
  const int64_t h = pm.dim(0), w = pm.dim(1);
  auto bp = oracle_boundary(pm);
  auto bg = oracle_boundary(gm);
  if (bp.empty() && bg.empty()) return 0.0;
  std::vector<double> pooled;
  if (bp.empty() || bg.empty()) {
    const double diag = std::sqrt(static_cast<double>(h * h + w * w));
    pooled = {diag, diag};
  } else {
    pooled = oracle_directed(bp, bg, w);
    auto back = oracle_directed(bg, bp, w);
    pooled.insert(pooled.end(), back.begin(), back.end());
  }
  std::sort(pooled.begin(), pooled.end());
  const double rank = 0.95 * static_cast<double>(pooled.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= pooled.size()) return pooled.back();
  return pooled[lo] + (rank - static_cast<double>(lo)) * (pooled[lo + 1] - pooled[lo]);
}

void criterion7() {
  SplitMix64 rng(109);

  // Perfect prediction: strongly separated logits reproduce the labels, so
  // the composite loss vanishes and the metrics saturate.
  auto labels = Tensor<int32_t>::zeros({1, 8, 8});
  for (int64_t i = 0; i < 64; ++i)
    labels.mutable_data()[i] = static_cast<int32_t>(rng.below(2));
  auto logits = Tensor<float>::zeros({1, 8, 8, 2});
  for (int64_t i = 0; i < 64; ++i) {
    logits.mutable_data()[i * 2] = labels.data()[i] == 0 ? 10.0f : -10.0f;
    logits.mutable_data()[i * 2 + 1] = labels.data()[i] == 1 ? 10.0f : -10.0f;
  }
  const double perfect_loss =
      static_cast<double>(hcm::composite_loss(logits, labels, hcm::LossWeights{}).item());
  auto pred2d = Tensor<int32_t>::zeros({8, 8});
  auto pred = hcm::argmax_lastdim(logits);
  std::memcpy(pred2d.mutable_data(), pred.data(), sizeof(int32_t) * 64);
  auto gt2d = Tensor<int32_t>::zeros({8, 8});
  std::memcpy(gt2d.mutable_data(), labels.data(), sizeof(int32_t) * 64);
  auto perfect = hcm::evaluate(pred2d, gt2d, 2);
  const bool perfect_ok = perfect_loss < 1e-5 && perfect.miou == 1.0 && perfect.dsc == 1.0 &&
                          perfect.acc == 1.0 && perfect.hd95 == 0.0;

  // Disjoint hard masks: both overlap losses saturate at 1.
  auto probs = Tensor<float>::zeros({1, 4, 4, 2});
  auto onehot = Tensor<float>::zeros({1, 4, 4, 2});
  for (int64_t i = 0; i < 16; ++i) {
    probs.mutable_data()[i * 2] = 1.0f;    // everything predicted class 0
    onehot.mutable_data()[i * 2 + 1] = 1.0f;  // everything labeled class 1
  }
  const double miou_l = static_cast<double>(hcm::soft_miou_loss(probs, onehot).item());
  const double dice_l = static_cast<double>(hcm::soft_dice_loss(probs, onehot).item());
  const bool disjoint_ok = std::abs(miou_l - 1.0) <= 1e-6 && std::abs(dice_l - 1.0) <= 1e-6;

  // Metrics against a brute-force per-pixel confusion oracle.
  double worst_metric = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t k = 2 + trial % 3;
    auto pm = Tensor<int32_t>::zeros({8, 8});
    auto gm = Tensor<int32_t>::zeros({8, 8});
    for (int64_t i = 0; i < 64; ++i) {
      pm.mutable_data()[i] = static_cast<int32_t>(rng.below(static_cast<uint64_t>(k)));
      gm.mutable_data()[i] = static_cast<int32_t>(rng.below(static_cast<uint64_t>(k)));
    }
    auto rep = hcm::evaluate(pm, gm, k);
    auto safe = [](double num, double den) { return den == 0 ? 1.0 : num / den; };
    double sum_iou = 0, sum_dsc = 0, sum_sen = 0, sum_spe = 0, bin_iou = 0, bin_dsc = 0,
           bin_sen = 0, bin_spe = 0;
    int64_t agree = 0;
    for (int64_t c = 0; c < k; ++c) {
      int64_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (int64_t i = 0; i < 64; ++i) {
        const bool p = pm.data()[i] == c, g = gm.data()[i] == c;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
        tn += !p && !g;
      }
      const double iou = safe(static_cast<double>(tp), static_cast<double>(tp + fp + fn));
      const double dsc =
          safe(static_cast<double>(2 * tp), static_cast<double>(2 * tp + fp + fn));
      const double sen = safe(static_cast<double>(tp), static_cast<double>(tp + fn));
      const double spe = safe(static_cast<double>(tn), static_cast<double>(tn + fp));
      sum_iou += iou;
      sum_dsc += dsc;
      sum_sen += sen;
      sum_spe += spe;
      if (c == 1) bin_iou = iou, bin_dsc = dsc, bin_sen = sen, bin_spe = spe;
    }
    for (int64_t i = 0; i < 64; ++i) agree += pm.data()[i] == gm.data()[i];
    const double kk = static_cast<double>(k);
    const double want_iou = k == 2 ? bin_iou : sum_iou / kk;
    const double want_dsc = k == 2 ? bin_dsc : sum_dsc / kk;
    const double want_sen = k == 2 ? bin_sen : sum_sen / kk;
    const double want_spe = k == 2 ? bin_spe : sum_spe / kk;
    const double want_acc = static_cast<double>(agree) / 64.0;
    worst_metric = std::max({worst_metric, std::abs(rep.miou - want_iou),
                             std::abs(rep.dsc - want_dsc), std::abs(rep.sen - want_sen),
                             std::abs(rep.spe - want_spe), std::abs(rep.acc - want_acc)});
  }
  const bool metrics_ok = worst_metric <= 1e-12;

  // Boundary distances against exhaustive nearest-neighbor search.
  int exact = 0;
  const int kPairs = 50;
  for (int trial = 0; trial < kPairs; ++trial) {
    auto pm = Tensor<int32_t>::zeros({12, 12});
    auto gm = Tensor<int32_t>::zeros({12, 12});
    if (trial != 0) {  // trial 0 keeps both masks empty
      for (int64_t i = 0; i < 144; ++i) {
        if (trial != 1) pm.mutable_data()[i] = rng.uniform() < 0.35;  // trial 1: empty pred
        gm.mutable_data()[i] = rng.uniform() < 0.35;
      }
    }
    const bool same = hcm::boundary_loss(pm, gm) == oracle_boundary_loss(pm, gm) &&
                      hcm::hd95(pm, gm) == oracle_hd95(pm, gm);
    exact += same;
  }
  const bool boundary_ok = exact == kPairs;

  criterion(7, perfect_ok && disjoint_ok && metrics_ok && boundary_ok,
            fmt("losses/metrics: perfect-prediction loss %.3g (<1e-5) with saturated "
                "metrics: %s; disjoint losses %.8f/%.8f (=1 +- 1e-6); confusion oracle max "
                "dev %.3g over 200 pairs; boundary distances exact on %d/%d pairs",
                perfect_loss, perfect_ok ? "yes" : "NO", miou_l, dice_l, worst_metric, exact,
                kPairs));
}

// ---------------------------------------------------------------------------
// 8. Parameter-count ratios of the factorized variants.
// ---------------------------------------------------------------------------
void criterion8() {
  hcm::RunConfig rc;
  auto cfg = rc.model();
  auto total_of = [&](hcm::ConvVariant v) {
    auto c = cfg;
    c.conv_variant = v;
    return hcm::count_parameters(c).total;
  };
  const int64_t full = total_of(hcm::ConvVariant::kFull);
  const double r_dw = static_cast<double>(total_of(hcm::ConvVariant::kDwOnly)) /
                      static_cast<double>(full);
  const double r_both = static_cast<double>(total_of(hcm::ConvVariant::kBoth)) /
                        static_cast<double>(full);
  const bool ok = r_dw >= 0.4 && r_dw <= 0.6 && r_both >= 0.4 && r_both <= 0.6;
  criterion(8, ok,
            fmt("parameter ratios at default config: dw_only/full %.3f, both/full %.3f "
                "(window [0.4, 0.6])",
                r_dw, r_both));
}

}  // namespace

// ---------------------------------------------------------------------------
// 9 + 10. Desk-scale training: quality gate, determinism, and the factorized
// variant holding full-variant accuracy at roughly half the parameters.
// ---------------------------------------------------------------------------
TEST(Acceptance, AllCriteria) {
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7();
  criterion8();

  const std::string base = (fs::temp_directory_path() / "hcm_acceptance").string();
  fs::remove_all(base);
  fs::create_directories(base);

  hcm::RunConfig rc;  // 64x64, 200 images, 2 classes, C=32, N=8, 20 epochs
  rc.data_dir = base + "/data";
  rc.threads = 1;
  hcm::generate_synthetic(rc.synthetic_spec(), rc.data_dir);

  rc.out_dir = base + "/both_run1";
  auto t9 = std::chrono::steady_clock::now();
  auto both1 = hcm::train_model<float>(rc);
  const double secs_both = seconds_since(t9);

  rc.out_dir = base + "/both_run2";
  auto both2 = hcm::train_model<float>(rc);

  bool bitwise = both1.history.size() == both2.history.size();
  if (bitwise)
    for (size_t e = 0; e < both1.history.size(); ++e)
      if (std::memcmp(&both1.history[e].train_loss, &both2.history[e].train_loss,
                      sizeof(double)) != 0)
        bitwise = false;

  const auto& last = both1.history.back();
  criterion(9,
            last.val_miou >= 0.90 && last.val_dsc >= 0.94 && secs_both < 1800.0 && bitwise &&
                both1.history.size() <= 20,
            fmt("desk training ('both', %zu epochs, 1 thread): val mIoU %.4f (>= 0.90), "
                "val DSC %.4f (>= 0.94), %.0f s (< 1800 s), same-seed loss curves "
                "bitwise-identical: %s",
                both1.history.size(), last.val_miou, last.val_dsc, secs_both,
                bitwise ? "yes" : "NO"));

  rc.out_dir = base + "/full_run";
  rc.conv_variant = "full";
  auto full = hcm::train_model<float>(rc);
  const auto& last_full = full.history.back();

  auto cfg_both = rc.model();
  cfg_both.conv_variant = hcm::ConvVariant::kBoth;
  auto cfg_full = rc.model();
  cfg_full.conv_variant = hcm::ConvVariant::kFull;
  const double param_ratio = static_cast<double>(hcm::count_parameters(cfg_both).total) /
                             static_cast<double>(hcm::count_parameters(cfg_full).total);

  criterion(10,
            last.val_miou >= last_full.val_miou - 0.02 && param_ratio <= 0.60,
            fmt("ablation: 'both' val mIoU %.4f vs 'full' %.4f (allowed gap 0.02) at %.1f%% "
                "of full's parameters (limit 60%%)",
                last.val_miou, last_full.val_miou, 100.0 * param_ratio));
}
