#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hcmamba/grad_check.hpp"
#include "hcmamba/loss_metrics.hpp"
#include "hcmamba/rng.hpp"
#include "hcmamba/tensor_ops.hpp"

namespace {

using hcm::Tensor;

Tensor<int32_t> random_mask(int64_t h, int64_t w, uint64_t seed, double fg_prob = 0.4,
                            int32_t classes = 2) {
  hcm::SplitMix64 rng(seed);
  auto m = Tensor<int32_t>::zeros({h, w});
  for (int64_t i = 0; i < m.numel(); ++i) {
    if (classes == 2)
      m.mutable_data()[i] = rng.uniform() < fg_prob ? 1 : 0;
    else
      m.mutable_data()[i] = static_cast<int32_t>(rng.below(static_cast<uint64_t>(classes)));
  }
  return m;
}

TEST(SoftMiou, PerfectDisjointAndHandValue) {
  auto target = Tensor<double>::from({1, 2, 2, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
  EXPECT_NEAR(hcm::soft_miou_loss(target, target).item(), 0.0, 1e-5);

  auto flipped = Tensor<double>::from({1, 2, 2, 2}, {0, 1, 1, 0, 0, 1, 1, 0});
  EXPECT_NEAR(hcm::soft_miou_loss(flipped, target).item(), 1.0, 1e-5);

  // Single pixel, K=2, p=[0.5,0.5], g=[1,0]: IoUs 0.5 and 0, loss 0.75.
  auto p = Tensor<double>::from({1, 1, 1, 2}, {0.5, 0.5});
  auto g = Tensor<double>::from({1, 1, 1, 2}, {1.0, 0.0});
  EXPECT_NEAR(hcm::soft_miou_loss(p, g).item(), 0.75, 1e-5);

  EXPECT_THROW(hcm::soft_miou_loss(p, Tensor<double>::zeros({1, 1, 1, 3})),
               hcm::DimensionError);
}

TEST(SoftDice, PerfectDisjointAndUniformHalf) {
  auto target = Tensor<double>::from({1, 2, 2, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
  EXPECT_NEAR(hcm::soft_dice_loss(target, target).item(), 0.0, 1e-5);

  auto flipped = Tensor<double>::from({1, 2, 2, 2}, {0, 1, 1, 0, 0, 1, 1, 0});
  EXPECT_NEAR(hcm::soft_dice_loss(flipped, target).item(), 1.0, 1e-5);

  // p = 0.5 on all of G's support: Dice = 2(0.5n)/(0.5n + n) = 2/3, loss 1/3.
  const int64_t n = 6;
  auto p = Tensor<double>::full({1, 1, n, 1}, 0.5);
  auto g = Tensor<double>::full({1, 1, n, 1}, 1.0);
  EXPECT_NEAR(hcm::soft_dice_loss(p, g).item(), 1.0 / 3.0, 1e-5);
}

TEST(SoftLosses, DiceIouRelationOnRandomInputs) {
  hcm::SplitMix64 rng(301);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t k = 3;
    auto p = Tensor<double>::zeros({1, 4, 4, k});
    auto g = Tensor<double>::zeros({1, 4, 4, k});
    for (int64_t i = 0; i < 16; ++i) {
      double a = rng.uniform(), b = rng.uniform();
      double c = rng.uniform(), lo = std::min(a, b);
      p.mutable_data()[i * k] = lo * c;
      p.mutable_data()[i * k + 1] = lo * (1 - c);
      p.mutable_data()[i * k + 2] = 1 - lo;
      int64_t cls = static_cast<int64_t>(rng.below(k));
      g.mutable_data()[i * k + cls] = 1.0;
    }
    double j = 1.0 - hcm::soft_miou_loss(p, g).item();   // mean IoU
    double d = 1.0 - hcm::soft_dice_loss(p, g).item();   // mean Dice
    EXPECT_GE(d, j - 1e-9);
    // The per-class identity D = 2J/(1+J) survives the macro average only
    // approximately, but each class obeys it; verify classwise.
    for (int64_t cls = 0; cls < k; ++cls) {
      double inter = 0, uni = 0, s = 0;
      for (int64_t i = 0; i < 16; ++i) {
        double pv = p.data()[i * k + cls], gv = g.data()[i * k + cls];
        inter += pv * gv;
        uni += pv + gv - pv * gv;
        s += pv + gv;
      }
      double jc = inter / uni, dc = 2 * inter / s;
      EXPECT_NEAR(dc, 2 * jc / (1 + jc), 1e-9);
    }
  }
}

TEST(SoftLosses, GradientsMatchFiniteDifferences) {
  hcm::SplitMix64 rng(307);
  auto p = Tensor<double>::zeros({1, 3, 3, 2});
  auto g = Tensor<double>::zeros({1, 3, 3, 2});
  for (int64_t i = 0; i < 9; ++i) {
    double v = rng.uniform(0.05, 0.95);
    p.mutable_data()[i * 2] = v;
    p.mutable_data()[i * 2 + 1] = 1 - v;
    int64_t cls = rng.below(2);
    g.mutable_data()[i * 2 + cls] = 1.0;
  }
  std::vector<Tensor<double>> inputs = {p};
  auto miou = hcm::grad_check(
      [&](std::vector<Tensor<double>>& in) { return hcm::soft_miou_loss(in[0], g); },
      inputs);
  EXPECT_TRUE(miou.pass) << miou.message;
  auto dice = hcm::grad_check(
      [&](std::vector<Tensor<double>>& in) { return hcm::soft_dice_loss(in[0], g); },
      inputs);
  EXPECT_TRUE(dice.pass) << dice.message;
}

TEST(BoundaryLoss, IdenticalMasksAndPythagoreanPair) {
  auto m = random_mask(6, 6, 311);
  EXPECT_DOUBLE_EQ(hcm::boundary_loss(m, m), 0.0);

  // Single pixels at (0,0) and (3,4): distance 5 in both directions.
  auto a = Tensor<int32_t>::zeros({6, 6});
  auto b = Tensor<int32_t>::zeros({6, 6});
  a.mutable_data()[0] = 1;
  b.mutable_data()[3 * 6 + 4] = 1;
  EXPECT_DOUBLE_EQ(hcm::boundary_loss(a, b), 5.0);
  EXPECT_DOUBLE_EQ(hcm::boundary_loss(b, a), 5.0);
}

TEST(BoundaryLoss, EmptyMaskConventions) {
  auto empty = Tensor<int32_t>::zeros({3, 4});
  auto full = Tensor<int32_t>::zeros({3, 4});
  full.mutable_data()[5] = 1;
  double diag = std::sqrt(3.0 * 3.0 + 4.0 * 4.0);
  EXPECT_DOUBLE_EQ(hcm::boundary_loss(empty, full), diag);
  EXPECT_DOUBLE_EQ(hcm::boundary_loss(full, empty), diag);
  EXPECT_DOUBLE_EQ(hcm::boundary_loss(empty, empty), 0.0);
}

TEST(BoundaryLoss, InteriorPixelsAreNotBoundary) {
  // 3x3 block in a 5x5 image: the center is interior, the ring of 8 is the
  // boundary. Against a single center pixel: P->G mean = (4*1 + 4*sqrt2)/8,
  // G->P min distance = 1.
  auto block = Tensor<int32_t>::zeros({5, 5});
  for (int64_t i = 1; i <= 3; ++i)
    for (int64_t j = 1; j <= 3; ++j) block.mutable_data()[i * 5 + j] = 1;
  auto center = Tensor<int32_t>::zeros({5, 5});
  center.mutable_data()[2 * 5 + 2] = 1;
  double p_to_g = (4.0 * 1.0 + 4.0 * std::sqrt(2.0)) / 8.0;
  EXPECT_NEAR(hcm::boundary_loss(block, center), 0.5 * (p_to_g + 1.0), 1e-12);
}

TEST(BoundaryLoss, SymmetricAndMatchesBruteForce) {
  // Brute-force oracle: directed mean of exact nearest-neighbor distances
  // over explicitly extracted boundary sets.
  auto boundary_of = [](const Tensor<int32_t>& m) {
    std::vector<std::pair<int64_t, int64_t>> pts;
    int64_t h = m.dim(0), w = m.dim(1);
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        if (m.at({i, j}) == 0) continue;
        bool edge = i == 0 || j == 0 || i == h - 1 || j == w - 1;
        if (!edge && m.at({i - 1, j}) != 0 && m.at({i + 1, j}) != 0 &&
            m.at({i, j - 1}) != 0 && m.at({i, j + 1}) != 0)
          continue;
        pts.emplace_back(i, j);
      }
    return pts;
  };
  auto directed_mean = [](const std::vector<std::pair<int64_t, int64_t>>& from,
                          const std::vector<std::pair<int64_t, int64_t>>& to) {
    double total = 0;
    for (auto& p : from) {
      double best = 1e300;
      for (auto& q : to) {
        double dy = static_cast<double>(p.first - q.first);
        double dx = static_cast<double>(p.second - q.second);
        best = std::min(best, dy * dy + dx * dx);
      }
      total += std::sqrt(best);
    }
    return total / static_cast<double>(from.size());
  };

  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto a = random_mask(8, 8, 1000 + seed, 0.35);
    auto b = random_mask(8, 8, 2000 + seed, 0.35);
    auto ba = boundary_of(a);
    auto bb = boundary_of(b);
    if (ba.empty() || bb.empty()) continue;
    double expected = 0.5 * (directed_mean(ba, bb) + directed_mean(bb, ba));
    ASSERT_DOUBLE_EQ(hcm::boundary_loss(a, b), expected) << "seed " << seed;
    ASSERT_DOUBLE_EQ(hcm::boundary_loss(a, b), hcm::boundary_loss(b, a));
  }
}

TEST(CompositeLoss, PerfectLogitsAndDegenerateWeights) {
  auto labels = Tensor<int32_t>::from({1, 2, 2}, {1, 0, 0, 1});
  auto logits = Tensor<double>::zeros({1, 2, 2, 2});
  for (int64_t i = 0; i < 4; ++i) {
    int32_t cls = labels.data()[i];
    logits.mutable_data()[i * 2 + cls] = 20.0;
    logits.mutable_data()[i * 2 + (1 - cls)] = -20.0;
  }
  hcm::LossWeights w;
  EXPECT_NEAR(hcm::composite_loss(logits, labels, w).item(), 0.0, 1e-4);

  hcm::LossWeights miou_only{1.0, 0.0, 0.0};
  auto probs = hcm::softmax_lastdim(logits);
  auto onehot = hcm::one_hot<double>(labels, 2);
  EXPECT_NEAR(hcm::composite_loss(logits, labels, miou_only).item(),
              hcm::soft_miou_loss(probs, onehot).item(), 1e-12);
}

TEST(CompositeLoss, RecompositionOracle) {
  hcm::SplitMix64 rng(419);
  auto labels = random_mask(8, 8, 421);
  auto batch_labels = Tensor<int32_t>::zeros({1, 8, 8});
  std::copy(labels.data(), labels.data() + 64, batch_labels.mutable_data());
  auto logits = Tensor<double>::zeros({1, 8, 8, 2});
  for (int64_t i = 0; i < logits.numel(); ++i)
    logits.mutable_data()[i] = rng.uniform(-2.0, 2.0);

  hcm::LossWeights w{0.4, 0.4, 0.2};
  double total = hcm::composite_loss(logits, batch_labels, w).item();

  auto probs = hcm::softmax_lastdim(logits);
  auto onehot = hcm::one_hot<double>(batch_labels, 2);
  auto pred = hcm::argmax_lastdim(logits);
  auto pred_img = Tensor<int32_t>::zeros({8, 8});
  std::copy(pred.data(), pred.data() + 64, pred_img.mutable_data());
  double expected = 0.4 * hcm::soft_miou_loss(probs, onehot).item() +
                    0.4 * hcm::soft_dice_loss(probs, onehot).item() +
                    0.2 * hcm::boundary_loss(pred_img, labels);
  EXPECT_NEAR(total, expected, 1e-12);
}

TEST(CompositeLoss, BoundaryTermAveragesOverBatchAndStaysOutOfGradient) {
  hcm::SplitMix64 rng(431);
  auto labels = Tensor<int32_t>::zeros({2, 4, 4});
  for (int64_t i = 0; i < labels.numel(); ++i)
    labels.mutable_data()[i] = rng.uniform() < 0.4 ? 1 : 0;
  auto logits = Tensor<double>::zeros({2, 4, 4, 2});
  for (int64_t i = 0; i < logits.numel(); ++i)
    logits.mutable_data()[i] = rng.uniform(-1.5, 1.5);

  hcm::LossWeights bonly{0.0, 0.0, 1.0};
  double bl = hcm::composite_loss(logits, labels, bonly).item();
  double by_hand = 0.0;
  auto pred = hcm::argmax_lastdim(logits);
  for (int64_t b = 0; b < 2; ++b) {
    auto pm = Tensor<int32_t>::zeros({4, 4});
    auto lm = Tensor<int32_t>::zeros({4, 4});
    std::copy(pred.data() + b * 16, pred.data() + (b + 1) * 16, pm.mutable_data());
    std::copy(labels.data() + b * 16, labels.data() + (b + 1) * 16, lm.mutable_data());
    by_hand += hcm::boundary_loss(pm, lm);
  }
  EXPECT_NEAR(bl, by_hand / 2.0, 1e-12);

  // The boundary term must not contribute gradients: with boundary-only
  // weights the loss is constant in the logits.
  hcm::Tape<double> tape;
  hcm::Tape<double>::Scope scope(tape);
  logits.set_requires_grad();
  auto loss = hcm::composite_loss(logits, labels, bonly);
  // A constant loss is detached from the tape entirely.
  EXPECT_THROW(tape.backward(loss), hcm::TapeError);
}

TEST(CompositeLoss, ValidatesLabelsAndWeights) {
  auto labels = Tensor<int32_t>::from({1, 1, 2}, {0, 3});
  auto logits = Tensor<double>::zeros({1, 1, 2, 2});
  hcm::LossWeights w;
  try {
    hcm::composite_loss(logits, labels, w);
    FAIL() << "expected DataError";
  } catch (const hcm::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("pixel"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);  // pixel index 1
  }
  hcm::LossWeights zero{0.0, 0.0, 0.0};
  auto good = Tensor<int32_t>::from({1, 1, 2}, {0, 1});
  EXPECT_THROW(hcm::composite_loss(logits, good, zero), hcm::ContractError);
  hcm::LossWeights negative{0.5, -0.1, 0.0};
  EXPECT_THROW(hcm::composite_loss(logits, good, negative), hcm::ContractError);
}

TEST(Evaluate, PerfectPredictionAndHandConfusion) {
  auto gt = random_mask(8, 8, 443);
  auto perfect = hcm::evaluate(gt, gt, 2);
  EXPECT_DOUBLE_EQ(perfect.miou, 1.0);
  EXPECT_DOUBLE_EQ(perfect.dsc, 1.0);
  EXPECT_DOUBLE_EQ(perfect.acc, 1.0);
  EXPECT_DOUBLE_EQ(perfect.hd95, 0.0);

  // pred [[1,0],[0,0]] vs gt [[1,1],[0,0]]: TP=1 FP=0 FN=1 TN=2.
  auto pred = Tensor<int32_t>::from({2, 2}, {1, 0, 0, 0});
  auto truth = Tensor<int32_t>::from({2, 2}, {1, 1, 0, 0});
  auto rep = hcm::evaluate(pred, truth, 2);
  EXPECT_DOUBLE_EQ(rep.dsc, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(rep.miou, 0.5);
  EXPECT_DOUBLE_EQ(rep.sen, 0.5);
  EXPECT_DOUBLE_EQ(rep.spe, 1.0);
  EXPECT_DOUBLE_EQ(rep.acc, 0.75);
  ASSERT_EQ(rep.per_class_dsc.size(), 2u);
}

TEST(Evaluate, MatchesBruteForceCountingOracle) {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto pred = random_mask(8, 8, 3000 + seed);
    auto gt = random_mask(8, 8, 4000 + seed);
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (int64_t i = 0; i < 64; ++i) {
      bool p = pred.data()[i] == 1, g = gt.data()[i] == 1;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
      tn += !p && !g;
    }
    auto rep = hcm::evaluate(pred, gt, 2);
    auto safe = [](double num, double den) { return den == 0 ? 1.0 : num / den; };
    ASSERT_DOUBLE_EQ(rep.miou, safe(static_cast<double>(tp), static_cast<double>(tp + fp + fn)));
    ASSERT_DOUBLE_EQ(rep.dsc, safe(static_cast<double>(2 * tp), static_cast<double>(2 * tp + fp + fn)));
    ASSERT_DOUBLE_EQ(rep.sen, safe(static_cast<double>(tp), static_cast<double>(tp + fn)));
    ASSERT_DOUBLE_EQ(rep.spe, safe(static_cast<double>(tn), static_cast<double>(tn + fp)));
    ASSERT_DOUBLE_EQ(rep.acc, static_cast<double>(tp + tn) / 64.0);
  }
}

TEST(Evaluate, MultiClassMacroAverages) {
  auto pred = Tensor<int32_t>::from({2, 3}, {0, 1, 2, 2, 1, 0});
  auto gt = Tensor<int32_t>::from({2, 3}, {0, 1, 1, 2, 1, 0});
  auto rep = hcm::evaluate(pred, gt, 3);
  // Confusion (gt, pred): (0,0)=2 (1,1)=2 (1,2)=1 (2,2)=1.
  // IoU: c0 = 2/2 = 1; c1 = 2/3; c2 = 1/2. mIoU = (1 + 2/3 + 1/2)/3.
  EXPECT_NEAR(rep.miou, (1.0 + 2.0 / 3.0 + 0.5) / 3.0, 1e-12);
  // DSC: c0 = 1; c1 = 4/5; c2 = 2/3.
  EXPECT_NEAR(rep.dsc, (1.0 + 0.8 + 2.0 / 3.0) / 3.0, 1e-12);
  EXPECT_NEAR(rep.acc, 5.0 / 6.0, 1e-12);
  ASSERT_EQ(rep.per_class_dsc.size(), 3u);
  EXPECT_NEAR(rep.per_class_dsc[1], 0.8, 1e-12);
}

TEST(Evaluate, Hd95PropertiesAndValidation) {
  // HD95 never exceeds the max directed distance, and grows as a correct
  // prediction erodes away from the target.
  auto gt = Tensor<int32_t>::zeros({9, 9});
  for (int64_t i = 2; i <= 6; ++i)
    for (int64_t j = 2; j <= 6; ++j) gt.mutable_data()[i * 9 + j] = 1;
  auto small = Tensor<int32_t>::zeros({9, 9});
  for (int64_t i = 3; i <= 5; ++i)
    for (int64_t j = 3; j <= 5; ++j) small.mutable_data()[i * 9 + j] = 1;
  auto tiny = Tensor<int32_t>::zeros({9, 9});
  tiny.mutable_data()[4 * 9 + 4] = 1;

  double hd_same = hcm::evaluate(gt, gt, 2).hd95;
  double hd_small = hcm::evaluate(small, gt, 2).hd95;
  double hd_tiny = hcm::evaluate(tiny, gt, 2).hd95;
  EXPECT_DOUBLE_EQ(hd_same, 0.0);
  EXPECT_GT(hd_small, hd_same);
  EXPECT_GT(hd_tiny, hd_small);
  EXPECT_LE(hd_small, 2.0 * std::sqrt(2.0) + 1e-12);  // max corner-to-corner gap

  EXPECT_THROW(hcm::evaluate(gt, Tensor<int32_t>::zeros({8, 8}), 2), hcm::DimensionError);
  auto bad = Tensor<int32_t>::from({1, 2}, {0, 5});
  EXPECT_THROW(hcm::evaluate(bad, Tensor<int32_t>::zeros({1, 2}), 2), hcm::DataError);
}

}  // namespace
