#pragma once

// Serialization of [C,H,W] maps into token sequences and back.

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "pdss/tensor.hpp"

namespace pdss {

enum class ScanDirection { h = 0, v = 1, hr = 2, vr = 3 };

inline constexpr std::array<ScanDirection, 4> kAllDirections{
    ScanDirection::h, ScanDirection::v, ScanDirection::hr, ScanDirection::vr};

inline std::string_view to_string(ScanDirection d) {
  switch (d) {
    case ScanDirection::h: return "h";
    case ScanDirection::v: return "v";
    case ScanDirection::hr: return "hr";
    case ScanDirection::vr: return "vr";
  }
  return "?";
}

struct DirectionalSequence {
  Tensor values;  // [L, C], L = H * W
  ScanDirection direction = ScanDirection::h;
  std::size_t height = 0, width = 0;
};

/// Flat spatial index (i * W + j) of the pixel visited at each sequence step.
inline std::vector<std::size_t> scan_order(std::size_t height,
                                           std::size_t width,
                                           ScanDirection dir) {
  const std::size_t L = height * width;
  std::vector<std::size_t> order(L);
  const bool columnwise = dir == ScanDirection::v || dir == ScanDirection::vr;
  const bool reversed = dir == ScanDirection::hr || dir == ScanDirection::vr;
  for (std::size_t s = 0; s < L; ++s) {
    const std::size_t pos = columnwise ? (s % height) * width + s / height : s;
    order[reversed ? L - 1 - s : s] = pos;
  }
  return order;
}

inline DirectionalSequence serialize_2d(const Tensor& t, ScanDirection dir) {
  require(t.rank() == 3, "serialize_2d: expected [C,H,W]");
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  require(H >= 1 && W >= 1, "serialize_2d: empty spatial extent");
  const auto order = scan_order(H, W, dir);
  const std::size_t plane = H * W;
  Tensor seq({plane, C});
  for (std::size_t s = 0; s < plane; ++s)
    for (std::size_t c = 0; c < C; ++c) seq.at(s, c) = t[c * plane + order[s]];
  return {std::move(seq), dir, H, W};
}

inline Tensor deserialize_2d(const DirectionalSequence& s) {
  require(s.values.rank() == 2, "deserialize_2d: values must be [L, C]");
  const std::size_t plane = s.height * s.width;
  require(s.values.dim(0) == plane,
          "deserialize_2d: sequence length " + std::to_string(s.values.dim(0)) +
              " != H*W = " + std::to_string(plane));
  const std::size_t C = s.values.dim(1);
  const auto order = scan_order(s.height, s.width, s.direction);
  Tensor t({C, s.height, s.width});
  for (std::size_t k = 0; k < plane; ++k)
    for (std::size_t c = 0; c < C; ++c) t[c * plane + order[k]] = s.values.at(k, c);
  return t;
}

/// Realigns each directional output to the source grid and sums them. The
/// sum is taken in the fixed order h, v, hr, vr, so argument order never
/// affects the result.
inline Tensor merge_directions(const std::vector<DirectionalSequence>& outs) {
  require(outs.size() == 4, "merge_directions: need exactly four sequences");
  std::array<const DirectionalSequence*, 4> by_dir{};
  for (const auto& s : outs) {
    auto& slot = by_dir[static_cast<std::size_t>(s.direction)];
    require(slot == nullptr, "merge_directions: duplicate direction " +
                                 std::string(to_string(s.direction)));
    slot = &s;
  }
  const auto& first = *by_dir[0];
  Tensor sum = deserialize_2d(first);
  for (std::size_t k = 1; k < 4; ++k) {
    const auto& s = *by_dir[k];
    require(s.height == first.height && s.width == first.width &&
                s.values.shape() == first.values.shape(),
            "merge_directions: sequences disagree in shape");
    sum += deserialize_2d(s);
  }
  return sum;
}

/// Channel-order tokens: row c is channel c's flattened spatial content.
inline Tensor serialize_channels(const Tensor& t) {
  require(t.rank() == 3, "serialize_channels: expected [C,H,W]");
  return t.reshaped({t.dim(0), t.dim(1) * t.dim(2)});
}

inline Tensor deserialize_channels(const Tensor& tokens, std::size_t height,
                                   std::size_t width) {
  require(tokens.rank() == 2 && tokens.dim(1) == height * width,
          "deserialize_channels: token width must equal H*W");
  return tokens.reshaped({tokens.dim(0), height, width});
}

}  // namespace pdss
