#pragma once

// Fixture file format, little-endian:
//   "PDST" | version u32 (=1) | dtype u32 (1=f64, 2=f32) | rank u32 |
//   rank x u64 extents | raw element data
// No padding, no compression.

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "pdss/tensor.hpp"

namespace pdss {

inline constexpr std::array<char, 4> kTensorMagic{'P', 'D', 'S', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::size_t kMaxTensorRank = 8;

static_assert(std::endian::native == std::endian::little,
              "fixture I/O assumes a little-endian host");

template <typename T>
constexpr std::uint32_t dtype_code() {
  if constexpr (std::is_same_v<T, double>) return 1;
  else if constexpr (std::is_same_v<T, float>) return 2;
  else static_assert(sizeof(T) == 0, "unsupported tensor dtype");
}

namespace detail {

template <typename U>
void put(std::vector<char>& buf, U v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(U));
}

class Reader {
 public:
  Reader(const std::vector<char>& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n)
      throw Error(ErrorKind::io, "truncated tensor file: " + path_);
  }

  const char* cursor() const { return buf_.data() + pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  const std::vector<char>& buf_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<char> encode_tensor(const BasicTensor<T>& t) {
  require(t.rank() <= kMaxTensorRank, "tensor rank exceeds 8");
  std::vector<char> buf(kTensorMagic.begin(), kTensorMagic.end());
  detail::put<std::uint32_t>(buf, kTensorFormatVersion);
  detail::put<std::uint32_t>(buf, dtype_code<T>());
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::put<std::uint64_t>(buf, e);
  const auto* p = reinterpret_cast<const char*>(t.data().data());
  buf.insert(buf.end(), p, p + t.size() * sizeof(T));
  return buf;
}

template <typename T = double>
BasicTensor<T> decode_tensor(const std::vector<char>& buf,
                             const std::string& origin = "<memory>") {
  detail::Reader r(buf, origin);
  r.need(4);
  if (std::memcmp(r.cursor(), kTensorMagic.data(), 4) != 0)
    throw Error(ErrorKind::io, "bad magic in tensor file: " + origin);
  r.get<std::uint32_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != kTensorFormatVersion)
    throw Error(ErrorKind::io, "unsupported tensor format version " +
                                   std::to_string(version) + ": " + origin);
  const auto dtype = r.get<std::uint32_t>();
  if (dtype != dtype_code<T>())
    throw Error(ErrorKind::io, "tensor dtype code " + std::to_string(dtype) +
                                   " does not match requested type: " + origin);
  const auto rank = r.get<std::uint32_t>();
  if (rank > kMaxTensorRank)
    throw Error(ErrorKind::io, "tensor rank " + std::to_string(rank) +
                                   " exceeds 8: " + origin);
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    const auto v = r.get<std::uint64_t>();
    if (v != 0 && count > std::numeric_limits<std::uint64_t>::max() / sizeof(T) / v)
      throw Error(ErrorKind::io, "tensor extent overflow: " + origin);
    count *= v;
    e = static_cast<std::size_t>(v);
  }
  if (count * sizeof(T) != r.remaining()) {
    if (count * sizeof(T) > r.remaining())
      throw Error(ErrorKind::io, "truncated tensor file: " + origin);
    throw Error(ErrorKind::io, "trailing bytes in tensor file: " + origin);
  }
  std::vector<T> data(static_cast<std::size_t>(count));
  std::memcpy(data.data(), r.cursor(), data.size() * sizeof(T));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void write_tensor_file(const BasicTensor<T>& t,
                       const std::filesystem::path& path) {
  const auto buf = encode_tensor(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::io, "cannot open for writing: " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error(ErrorKind::io, "write failed: " + path.string());
}

template <typename T = double>
BasicTensor<T> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::io, "cannot open tensor file: " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
  return decode_tensor<T>(buf, path.string());
}

}  // namespace pdss
