#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pdss/eval.hpp"

using namespace pdss;
using namespace pdss::eval;

namespace {

Tensor softmax_probs(std::size_t N, std::size_t H, std::size_t W, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 2.0);
  Tensor p({N, H, W});
  const std::size_t plane = H * W;
  for (std::size_t q = 0; q < plane; ++q) {
    double s = 0;
    for (std::size_t k = 0; k < N; ++k) s += (p[k * plane + q] = std::exp(nd(rng)));
    for (std::size_t k = 0; k < N; ++k) p[k * plane + q] /= s;
  }
  return p;
}

Tensor random_labels(std::size_t H, std::size_t W, std::size_t N, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, N - 1);
  Tensor t({H, W});
  for (auto& v : t.vec()) v = static_cast<double>(d(rng));
  return t;
}

}  // namespace

TEST(CrossEntropy, Examples) {
  std::mt19937_64 rng(1);
  const auto labels = random_labels(4, 4, 3, rng);
  const auto y = apem::one_hot_encode(labels, 3);
  EXPECT_LE(cross_entropy(y.l, y).value, 1e-11);
  const Tensor uniform({3, 4, 4}, 1.0 / 3.0);
  EXPECT_NEAR(cross_entropy(uniform, y).value, std::log(3.0), 1e-14);
  const auto ign = apem::one_hot_encode(Tensor({4, 4}, apem::kIgnoreLabel), 3);
  const auto r = cross_entropy(uniform, ign);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.all_ignored);
}

TEST(CrossEntropy, IgnoredPixelsExcluded) {
  Tensor labels({1, 2}, {0.0, static_cast<double>(apem::kIgnoreLabel)});
  const auto y = apem::one_hot_encode(labels, 2);
  Tensor p({2, 1, 2}, {0.25, 0.5, 0.75, 0.5});
  EXPECT_NEAR(cross_entropy(p, y).value, -std::log(0.25), 1e-15);
}

TEST(Dice, Examples) {
  std::mt19937_64 rng(2);
  const auto y = apem::one_hot_encode(random_labels(5, 5, 3, rng), 3);
  EXPECT_LE(dice_loss(y.l, y).value, 1e-6);
  // Disjoint one-hots.
  Tensor other(y.l.shape());
  const std::size_t plane = 25;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t k = 0; k < 3; ++k)
      if (y.l[k * plane + p] == 1.0) other[((k + 1) % 3) * plane + p] = 1.0;
  EXPECT_DOUBLE_EQ(dice_loss(other, y).value, 1.0);
  const auto y1 = apem::one_hot_encode(Tensor({1, 1}, 1.0), 3);
  EXPECT_NEAR(dice_loss(Tensor({3, 1, 1}, 1.0 / 3.0), y1, 1e-300).value, 0.5, 1e-15);
  EXPECT_NEAR(dice_loss(Tensor({3, 1, 1}, 1.0 / 3.0), y1).value, 0.5, 1e-6);
  EXPECT_THROW(dice_loss(y.l, y, 0.0), Error);
}

TEST(Dice, ClassPermutationInvariant) {
  std::mt19937_64 rng(3);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  for (int rep = 0; rep < 20; ++rep) {
    const auto p = softmax_probs(4, 3, 5, rng);
    const auto y = apem::one_hot_encode(random_labels(3, 5, 4, rng), 4);
    Tensor pp(p.shape()), py(p.shape());
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t q = 0; q < 15; ++q) {
        pp[perm[k] * 15 + q] = p[k * 15 + q];
        py[perm[k] * 15 + q] = y.l[k * 15 + q];
      }
    EXPECT_NEAR(dice_loss(p, y).value, dice_loss(pp, {py}).value, 1e-14);
  }
}

TEST(Combined, SumOfTermsAndFlags) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    const auto p = softmax_probs(3, 4, 4, rng);
    const auto y = apem::one_hot_encode(random_labels(4, 4, 3, rng), 3);
    const auto c = combined_loss(p, y);
    EXPECT_EQ(c.total, cross_entropy(p, y).value + dice_loss(p, y).value);
    EXPECT_EQ(combined_loss(p, y, {false, true}).total, c.dice);
    EXPECT_EQ(combined_loss(p, y, {true, false}).total, c.ce);
  }
  const auto y = apem::one_hot_encode(Tensor({2, 2}, 1.0), 2);
  EXPECT_LE(combined_loss(y.l, y).total, 1e-6);
}

TEST(LossGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto p = softmax_probs(3, 3, 3, rng);
  auto labels = random_labels(3, 3, 3, rng);
  labels.at(1, 1) = apem::kIgnoreLabel;
  const auto y = apem::one_hot_encode(labels, 3);
  const auto gce = cross_entropy_grad(p, y), gd = dice_grad(p, y);
  const double h = 1e-7;
  for (std::size_t i = 0; i < p.size(); ++i) {
    Tensor a = p, b = p;
    a[i] += h;
    b[i] -= h;
    EXPECT_NEAR(gce[i], (cross_entropy(a, y).value - cross_entropy(b, y).value) / (2 * h), 1e-6);
    EXPECT_NEAR(gd[i], (dice_loss(a, y).value - dice_loss(b, y).value) / (2 * h), 1e-6);
  }
}

TEST(Confusion, Accumulate) {
  ConfusionMatrix cm(3);
  const Tensor two({10, 10}, 2.0);
  cm.accumulate(two, two);
  EXPECT_EQ(cm(2, 2), 100u);
  EXPECT_EQ(cm.total(), 100u);
  const Tensor ign({4, 4}, apem::kIgnoreLabel);
  ConfusionMatrix before = cm;
  cm.accumulate(Tensor({4, 4}), ign);
  EXPECT_EQ(cm.total(), before.total());
  EXPECT_EQ(cm.ignored(), 16u);
  EXPECT_THROW(cm.accumulate(Tensor({1, 1}, 3.0), Tensor({1, 1})), Error);
  EXPECT_THROW(cm.accumulate(Tensor({1, 2}), Tensor({2, 1})), Error);
}

TEST(Confusion, RowSumsAndAssociativity) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const auto g1 = random_labels(6, 7, 4, rng), p1 = random_labels(6, 7, 4, rng);
    const auto g2 = random_labels(5, 5, 4, rng), p2 = random_labels(5, 5, 4, rng);
    ConfusionMatrix a(4), b(4), t1(4), t2(4);
    a.accumulate(p1, g1);
    a.accumulate(p2, g2);
    b.accumulate(p2, g2);
    b.accumulate(p1, g1);
    EXPECT_EQ(a, b);
    t1.accumulate(p1, g1);
    t2.accumulate(p2, g2);
    t1 += t2;
    EXPECT_EQ(t1, a);
    for (std::size_t k = 0; k < 4; ++k) {
      std::uint64_t row = 0, count = 0;
      for (std::size_t j = 0; j < 4; ++j) row += a(k, j);
      for (auto v : g1.vec()) count += v == static_cast<double>(k);
      for (auto v : g2.vec()) count += v == static_cast<double>(k);
      EXPECT_EQ(row, count);
    }
  }
}

TEST(Metrics, Perfect) {
  std::mt19937_64 rng(7);
  const auto g = random_labels(8, 8, 3, rng);
  ConfusionMatrix cm(3);
  cm.accumulate(g, g);
  const auto r = metrics(cm);
  EXPECT_EQ(r.oa, 1.0);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_EQ(r.mean_f1, 1.0);
}

TEST(Metrics, HandConfusionMatrix) {
  ConfusionMatrix cm(2);
  cm(0, 0) = 3;
  cm(0, 1) = 1;
  cm(1, 0) = 1;
  cm(1, 1) = 3;
  const auto r = metrics(cm);
  EXPECT_EQ(r.oa, 0.75);
  EXPECT_EQ(r.iou[0], 0.6);
  EXPECT_EQ(r.iou[1], 0.6);
  EXPECT_EQ(r.miou, 0.6);
  EXPECT_EQ(r.f1[0], 0.75);
  EXPECT_EQ(r.precision[0], 0.75);
  EXPECT_EQ(r.recall[0], 0.75);
}

TEST(Metrics, AbsentClassExcluded) {
  ConfusionMatrix cm(3);
  cm(0, 0) = 5;
  cm(1, 1) = 2;
  cm(1, 0) = 2;
  const auto r = metrics(cm);
  EXPECT_FALSE(r.present[2]);
  EXPECT_TRUE(r.present[0]);
  EXPECT_NEAR(r.miou, (5.0 / 7.0 + 0.5) / 2.0, 1e-15);
  const auto j = to_json(r);
  EXPECT_EQ(j["class_present"][2], false);
  EXPECT_EQ(j["total_pixels"], 9u);
  EXPECT_EQ(j["classes"].size(), 3u);
}

TEST(Metrics, RangesOnRandomMatrices) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::uint64_t> d(0, 20);
  for (int rep = 0; rep < 200; ++rep) {
    ConfusionMatrix cm(4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) cm(i, j) = d(rng);
    if (cm.total() == 0) continue;
    const auto r = metrics(cm);
    EXPECT_GE(r.oa, 0.0);
    EXPECT_LE(r.oa, 1.0);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_GE(r.iou[k], 0.0);
      EXPECT_LE(r.iou[k], 1.0);
      EXPECT_GE(r.f1[k], 0.0);
      EXPECT_LE(r.f1[k], 1.0);
      EXPECT_LE(r.f1[k], std::max(r.precision[k], r.recall[k]) + 1e-15);
      EXPECT_GE(r.f1[k], std::min(r.precision[k], r.recall[k]) - 1e-15);
    }
  }
}

TEST(Metrics, EmptyMatrixRejected) { EXPECT_THROW(metrics(ConfusionMatrix(2)), Error); }
