#include <gtest/gtest.h>

#include <random>

#include "pdss/gradcheck.hpp"
#include "pdss/sobel.hpp"

using namespace pdss;

TEST(Sobel, ConstantIsZero) {
  Tensor x({2, 6, 5}, 3.7);
  const auto s = sobel_structure(x);
  for (auto v : s.vec()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Sobel, VerticalStepEdge) {
  const std::size_t H = 5, W = 6;
  Tensor x({1, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 3; j < W; ++j) x.at(0, i, j) = 1.0;
  const auto s = sobel_structure(x);
  // Hand stencil: Gx = (1,2,1) . (x[j+1] - x[j-1]) = 4 on both edge columns,
  // Gy = 0 since every row is identical.
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double expect = (j == 2 || j == 3) ? 4.0 : 0.0;
      EXPECT_DOUBLE_EQ(s.at(0, i, j), expect) << i << "," << j;
    }
}

TEST(Sobel, ReflectBorder) {
  // Single bright pixel in the corner; reflect-101 mirrors it around the
  // border so the corner response itself is zero.
  Tensor x({1, 4, 4});
  x.at(0, 0, 0) = 1.0;
  const auto r = sobel_response(x);
  EXPECT_EQ(r.gx.at(0, 0, 0), 0.0);
  EXPECT_EQ(r.gy.at(0, 0, 0), 0.0);
  // At (1,1): neighbours (0,0) has weight -1 in both Gx and Gy.
  EXPECT_EQ(r.gx.at(0, 1, 1), -1.0);
  EXPECT_EQ(r.gy.at(0, 1, 1), -1.0);
  // At (0,1): the row above is reflected onto row 1, so (0,0) only enters Gx
  // through the middle row with weight -2.
  EXPECT_EQ(r.gx.at(0, 0, 1), -2.0);
  EXPECT_EQ(r.gy.at(0, 0, 1), 0.0);
}

TEST(Sobel, NonNegativeAndSinglePixel) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  Tensor x({3, 7, 9});
  for (auto& v : x.vec()) v = nd(rng);
  const auto s = sobel_structure(x);
  for (auto v : s.vec()) EXPECT_GE(v, 0.0);
  Tensor one({2, 1, 1}, {1.0, -4.0});
  const auto s1 = sobel_structure(one);
  for (auto v : s1.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Sobel, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  Tensor x({2, 5, 4}), up({2, 5, 4});
  for (auto& v : x.vec()) v = nd(rng);
  for (auto& v : up.vec()) v = nd(rng);
  const auto g = sobel_structure_backward(x, sobel_response(x), up);
  auto rep = finite_diff_check(
      [&](const std::vector<double>& v) {
        const auto s = sobel_structure(Tensor(x.shape(), v));
        double acc = 0;
        for (std::size_t i = 0; i < s.size(); ++i) acc += s[i] * up[i];
        return acc;
      },
      x.vec(), g.vec(), 1e-6);
  EXPECT_LE(rep.max_rel_error, 1e-6);
}
