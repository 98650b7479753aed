// Prints the visiting order of each scan direction on a small grid, then
// shows that the four-way merge of an identity scan is 4x the input.

#include <iomanip>
#include <iostream>

#include "pdss/scan_geometry.hpp"

using namespace pdss;

int main() {
  const std::size_t H = 3, W = 4;
  Tensor x({1, H, W});
  for (std::size_t i = 0; i < H * W; ++i) x[i] = static_cast<double>(i);
  for (auto d : kAllDirections) {
    const auto seq = serialize_2d(x, d);
    std::cout << to_string(d) << ":";
    for (std::size_t t = 0; t < seq.values.dim(0); ++t) std::cout << " " << seq.values.at(t, 0);
    std::cout << "\n";
  }
  std::vector<DirectionalSequence> seqs;
  for (auto d : kAllDirections) seqs.push_back(serialize_2d(x, d));
  const auto merged = merge_directions(seqs);
  std::cout << "merged (identity scan, 4 directions):\n";
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) std::cout << std::setw(5) << merged.at(0, i, j);
    std::cout << "\n";
  }
  const auto ch = serialize_channels(Tensor({5, H, W}, 1.0));
  std::cout << "channel tokens: " << shape_str(ch.shape()) << "\n";
}
