#pragma once

#include <cmath>

#include "pdss/tensor.hpp"

namespace pdss {

namespace detail {

// Reflect-101 border handling (…, 2, 1 | 0, 1, 2, … n-1 | n-2, …).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto m = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= m) {
    if (i < 0) i = -i;
    if (i >= m) i = 2 * m - 2 - i;
  }
  return static_cast<std::size_t>(i);
}

inline constexpr double kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
inline constexpr double kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

}  // namespace detail

struct SobelResponse {
  Tensor gx, gy, magnitude;
};

/// Per-channel 3x3 Sobel responses with reflect-101 padding.
inline SobelResponse sobel_response(const Tensor& x) {
  require(x.rank() == 3, "sobel_structure: expected [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  require(H >= 1 && W >= 1, "sobel_structure: empty spatial extent");
  SobelResponse r{Tensor(x.shape()), Tensor(x.shape()), Tensor(x.shape())};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double gx = 0.0, gy = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          const auto ii = detail::reflect_index(static_cast<std::ptrdiff_t>(i) + dy, H);
          for (int dx = -1; dx <= 1; ++dx) {
            const auto jj = detail::reflect_index(static_cast<std::ptrdiff_t>(j) + dx, W);
            const double v = x.at(c, ii, jj);
            gx += detail::kSobelX[dy + 1][dx + 1] * v;
            gy += detail::kSobelY[dy + 1][dx + 1] * v;
          }
        }
        r.gx.at(c, i, j) = gx;
        r.gy.at(c, i, j) = gy;
        r.magnitude.at(c, i, j) = std::sqrt(gx * gx + gy * gy);
      }
  return r;
}

/// Gradient magnitude sqrt(Gx^2 + Gy^2) per channel.
inline Tensor sobel_structure(const Tensor& x) { return sobel_response(x).magnitude; }

/// Adjoint of sobel_structure. The magnitude is treated as flat where it is 0.
inline Tensor sobel_structure_backward(const Tensor& x, const SobelResponse& r,
                                       const Tensor& grad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out(x.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double mag = r.magnitude.at(c, i, j);
        if (mag == 0.0) continue;
        const double g = grad.at(c, i, j);
        const double ggx = g * r.gx.at(c, i, j) / mag;
        const double ggy = g * r.gy.at(c, i, j) / mag;
        for (int dy = -1; dy <= 1; ++dy) {
          const auto ii = detail::reflect_index(static_cast<std::ptrdiff_t>(i) + dy, H);
          for (int dx = -1; dx <= 1; ++dx) {
            const auto jj = detail::reflect_index(static_cast<std::ptrdiff_t>(j) + dx, W);
            out.at(c, ii, jj) += detail::kSobelX[dy + 1][dx + 1] * ggx +
                                 detail::kSobelY[dy + 1][dx + 1] * ggy;
          }
        }
      }
  return out;
}

}  // namespace pdss
