#pragma once

// Elementary image / feature-map operations on [C,H,W] tensors.

#include <cmath>
#include <vector>

#include "pdss/tensor.hpp"

namespace pdss {

/// Normalizes every fiber along `axis` to unit Euclidean norm. Fibers whose
/// norm is below `eps` are returned unchanged.
inline Tensor l2_normalize(const Tensor& t, std::size_t axis, double eps) {
  require(axis < t.rank(), "l2_normalize: axis " + std::to_string(axis) +
                               " out of range for rank " +
                               std::to_string(t.rank()));
  require(eps > 0.0, "l2_normalize: eps must be positive");
  const auto& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor out = t;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double sq = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double v = t[base + k * inner];
        sq += v * v;
      }
      const double norm = std::sqrt(sq);
      if (norm < eps) continue;
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= norm;
    }
  }
  return out;
}

namespace detail {

struct LinearTap {
  std::size_t lo, hi;
  double w_hi;  // weight of `hi`; `lo` gets 1 - w_hi
};

// align_corners=false source coordinate for one output index.
inline LinearTap linear_tap(std::size_t out_idx, std::size_t in_n,
                            std::size_t out_n) {
  const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
  double src = (static_cast<double>(out_idx) + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  auto lo = static_cast<std::size_t>(src);
  if (lo > in_n - 1) lo = in_n - 1;
  const std::size_t hi = lo + 1 < in_n ? lo + 1 : lo;
  return {lo, hi, src - static_cast<double>(lo)};
}

}  // namespace detail

/// Bilinear resampling of a [C,H,W] map, align_corners = false.
inline Tensor bilinear_resize(const Tensor& t, std::size_t out_h,
                              std::size_t out_w) {
  require(t.rank() == 3, "bilinear_resize: expected [C,H,W]");
  require(out_h > 0 && out_w > 0, "bilinear_resize: zero output extent");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  require(h > 0 && w > 0, "bilinear_resize: empty input");
  if (h == out_h && w == out_w) return t;
  Tensor out({c, out_h, out_w});
  std::vector<detail::LinearTap> ty(out_h), tx(out_w);
  for (std::size_t i = 0; i < out_h; ++i) ty[i] = detail::linear_tap(i, h, out_h);
  for (std::size_t j = 0; j < out_w; ++j) tx[j] = detail::linear_tap(j, w, out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = tx[j];
        const double top = (1.0 - b.w_hi) * t.at(ch, a.lo, b.lo) +
                           b.w_hi * t.at(ch, a.lo, b.hi);
        const double bot = (1.0 - b.w_hi) * t.at(ch, a.hi, b.lo) +
                           b.w_hi * t.at(ch, a.hi, b.hi);
        out.at(ch, i, j) = (1.0 - a.w_hi) * top + a.w_hi * bot;
      }
    }
  }
  return out;
}

/// Adjoint of bilinear_resize: scatters `grad` [C,outH,outW] back onto [C,H,W].
inline Tensor bilinear_resize_backward(const Tensor& grad, std::size_t in_h,
                                       std::size_t in_w) {
  const std::size_t c = grad.dim(0), out_h = grad.dim(1), out_w = grad.dim(2);
  if (in_h == out_h && in_w == out_w) return grad;
  Tensor out({c, in_h, in_w});
  for (std::size_t i = 0; i < out_h; ++i) {
    const auto a = detail::linear_tap(i, in_h, out_h);
    for (std::size_t j = 0; j < out_w; ++j) {
      const auto b = detail::linear_tap(j, in_w, out_w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = grad.at(ch, i, j);
        out.at(ch, a.lo, b.lo) += g * (1.0 - a.w_hi) * (1.0 - b.w_hi);
        out.at(ch, a.lo, b.hi) += g * (1.0 - a.w_hi) * b.w_hi;
        out.at(ch, a.hi, b.lo) += g * a.w_hi * (1.0 - b.w_hi);
        out.at(ch, a.hi, b.hi) += g * a.w_hi * b.w_hi;
      }
    }
  }
  return out;
}

struct Conv2dShape {
  std::size_t cin, h, w, cout, k, stride, pad, out_h, out_w;
};

inline Conv2dShape conv2d_shape(const Tensor& x, const Tensor& kernel,
                                std::size_t stride, std::size_t pad) {
  require(x.rank() == 3, "conv2d: input must be [Cin,H,W]");
  require(kernel.rank() == 4 && kernel.dim(2) == kernel.dim(3),
          "conv2d: kernel must be [Cout,Cin,k,k]");
  require(kernel.dim(1) == x.dim(0),
          "conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
              " input channels, got " + std::to_string(x.dim(0)));
  require(stride >= 1, "conv2d: stride must be >= 1");
  Conv2dShape s{x.dim(0), x.dim(1), x.dim(2), kernel.dim(0), kernel.dim(2),
                stride, pad, 0, 0};
  require(s.k <= s.h + 2 * pad && s.k <= s.w + 2 * pad,
          "conv2d: kernel larger than padded input");
  s.out_h = (s.h + 2 * pad - s.k) / stride + 1;
  s.out_w = (s.w + 2 * pad - s.k) / stride + 1;
  return s;
}

/// 2-D cross-correlation with zero padding. `bias` may be empty (size 0).
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                     std::size_t stride = 1, std::size_t pad = 0) {
  const auto s = conv2d_shape(x, kernel, stride, pad);
  require(bias.size() == 0 || bias.size() == s.cout,
          "conv2d: bias length must equal Cout");
  Tensor out({s.cout, s.out_h, s.out_w});
  const std::size_t plane = s.out_h * s.out_w;
  for (std::size_t co = 0; co < s.cout; ++co) {
    double* o = out.data().data() + co * plane;
    if (bias.size()) std::fill(o, o + plane, bias[co]);
    for (std::size_t ci = 0; ci < s.cin; ++ci) {
      for (std::size_t ky = 0; ky < s.k; ++ky) {
        for (std::size_t kx = 0; kx < s.k; ++kx) {
          const double wv = kernel.at(co, ci, ky, kx);
          if (wv == 0.0) continue;
          for (std::size_t oy = 0; oy < s.out_h; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * s.stride + ky) -
                static_cast<std::ptrdiff_t>(s.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s.h)) continue;
            const double* row = &x.at(ci, static_cast<std::size_t>(iy), 0);
            double* orow = o + oy * s.out_w;
            for (std::size_t ox = 0; ox < s.out_w; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * s.stride + kx) -
                  static_cast<std::ptrdiff_t>(s.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s.w)) continue;
              orow[ox] += wv * row[ix];
            }
          }
        }
      }
    }
  }
  return out;
}

struct Conv2dGrads {
  Tensor input, kernel, bias;
};

/// Reverse-mode gradients of conv2d given the upstream gradient of its output.
inline Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& kernel,
                                   bool has_bias, const Tensor& grad_out,
                                   std::size_t stride, std::size_t pad) {
  const auto s = conv2d_shape(x, kernel, stride, pad);
  Conv2dGrads g{Tensor(x.shape()), Tensor(kernel.shape()),
                has_bias ? Tensor({s.cout}) : Tensor()};
  for (std::size_t co = 0; co < s.cout; ++co) {
    if (has_bias) {
      double acc = 0.0;
      for (std::size_t i = 0; i < s.out_h * s.out_w; ++i)
        acc += grad_out[co * s.out_h * s.out_w + i];
      g.bias[co] = acc;
    }
    for (std::size_t ci = 0; ci < s.cin; ++ci) {
      for (std::size_t ky = 0; ky < s.k; ++ky) {
        for (std::size_t kx = 0; kx < s.k; ++kx) {
          const double wv = kernel.at(co, ci, ky, kx);
          double gw = 0.0;
          for (std::size_t oy = 0; oy < s.out_h; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * s.stride + ky) -
                static_cast<std::ptrdiff_t>(s.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s.h)) continue;
            const double* row = &x.at(ci, static_cast<std::size_t>(iy), 0);
            double* grow = &g.input.at(ci, static_cast<std::size_t>(iy), 0);
            const double* go = &grad_out.at(co, oy, 0);
            for (std::size_t ox = 0; ox < s.out_w; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * s.stride + kx) -
                  static_cast<std::ptrdiff_t>(s.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s.w)) continue;
              gw += go[ox] * row[ix];
              grow[ix] += go[ox] * wv;
            }
          }
          g.kernel.at(co, ci, ky, kx) = gw;
        }
      }
    }
  }
  return g;
}

/// Stacks [Ci,H,W] parts along the channel axis, in argument order.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_channels: no parts");
  const std::size_t h = parts[0].dim(1), w = parts[0].dim(2);
  std::size_t c = 0;
  for (const auto& p : parts) {
    require(p.rank() == 3 && p.dim(1) == h && p.dim(2) == w,
            "concat_channels: spatial shape mismatch " + shape_str(p.shape()));
    c += p.dim(0);
  }
  std::vector<double> data;
  data.reserve(c * h * w);
  for (const auto& p : parts) data.insert(data.end(), p.vec().begin(), p.vec().end());
  return Tensor({c, h, w}, std::move(data));
}

/// Channel slice [begin, begin+count) of a [C,H,W] tensor.
inline Tensor slice_channels(const Tensor& t, std::size_t begin,
                             std::size_t count) {
  require(t.rank() == 3 && begin + count <= t.dim(0),
          "slice_channels: range out of bounds");
  const std::size_t plane = t.dim(1) * t.dim(2);
  std::vector<double> data(t.vec().begin() + static_cast<std::ptrdiff_t>(begin * plane),
                           t.vec().begin() + static_cast<std::ptrdiff_t>((begin + count) * plane));
  return Tensor({count, t.dim(1), t.dim(2)}, std::move(data));
}

}  // namespace pdss
