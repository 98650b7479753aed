#pragma once

// Deterministic synthetic segmentation tiles: colored rectangles and disks on
// a background, one class per shape family, exact labels.

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "pdss/tensor.hpp"

namespace pdss::synth {

struct Sample {
  Tensor image;   // [3, H, W]
  Tensor labels;  // [H, W], class indices
};

struct BlobSpec {
  std::size_t n_cls = 3;
  std::size_t size = 32;
  double noise = 0.08;
};

/// Mean color of class k: spread around the RGB cube so classes are separable.
inline std::array<double, 3> class_color(std::size_t k, std::size_t n_cls) {
  if (n_cls <= 1) return {0.5, 0.5, 0.5};
  const double phase = 2.0 * 3.14159265358979323846 * static_cast<double>(k) /
                       static_cast<double>(n_cls);
  return {0.5 + 0.3 * std::cos(phase), 0.5 + 0.3 * std::cos(phase - 2.0944),
          0.5 + 0.3 * std::cos(phase + 2.0944)};
}

/// Class 0 is background; classes 1.. alternate rectangles (odd) and disks
/// (even). Each foreground class gets one or two shapes per tile.
inline Sample make_tile(const BlobSpec& spec, std::mt19937_64& rng) {
  const std::size_t S = spec.size;
  Sample s{Tensor({3, S, S}), Tensor({S, S})};
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(S));
  std::uniform_real_distribution<double> ext(static_cast<double>(S) / 8.0,
                                             static_cast<double>(S) / 3.0);
  std::uniform_int_distribution<int> count(1, 2);
  for (std::size_t k = 1; k < spec.n_cls; ++k) {
    const int shapes = count(rng);
    for (int r = 0; r < shapes; ++r) {
      const double cy = pos(rng), cx = pos(rng), ey = ext(rng), ex = ext(rng);
      for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) {
          const double dy = static_cast<double>(i) + 0.5 - cy;
          const double dx = static_cast<double>(j) + 0.5 - cx;
          const bool inside = k % 2 == 1
                                  ? std::abs(dy) <= ey / 2 && std::abs(dx) <= ex / 2
                                  : dy * dy + dx * dx <= (ey / 2) * (ey / 2) * 1.5;
          if (inside) s.labels.at(i, j) = static_cast<double>(k);
        }
    }
  }
  std::normal_distribution<double> noise(0.0, spec.noise);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      const auto col = class_color(static_cast<std::size_t>(s.labels.at(i, j)), spec.n_cls);
      for (std::size_t c = 0; c < 3; ++c) s.image.at(c, i, j) = col[c] + noise(rng);
    }
  return s;
}

inline std::vector<Sample> make_dataset(const BlobSpec& spec, std::size_t count,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_tile(spec, rng));
  return out;
}

}  // namespace pdss::synth
