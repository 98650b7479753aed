#pragma once

// Ground-truth driven class prototype memory.

#include <cmath>
#include <vector>

#include "pdss/grid.hpp"
#include "pdss/tensor.hpp"

namespace pdss::apem {

inline constexpr int kIgnoreLabel = 255;
inline constexpr double kDefaultBeta = 0.7;
inline constexpr double kFeatureNormEps = 1e-12;

struct ClassPrototypeMemory {
  Tensor m;  // [N_cls, C_feat]

  std::size_t n_cls() const { return m.dim(0); }
  std::size_t c_feat() const { return m.dim(1); }
};

struct OneHotLabels {
  Tensor l;  // [N_cls, H, W], entries in [0, 1]

  std::size_t n_cls() const { return l.dim(0); }
};

/// Class-index map [H,W] to per-class indicators. Ignore pixels (255) are zero
/// in every channel.
inline OneHotLabels one_hot_encode(const Tensor& labels, std::size_t n_cls) {
  require(labels.rank() == 2, "one_hot_encode: labels must be [H,W]");
  require(n_cls >= 1, "one_hot_encode: n_cls must be >= 1");
  const std::size_t H = labels.dim(0), W = labels.dim(1), plane = H * W;
  Tensor out({n_cls, H, W});
  for (std::size_t i = 0; i < plane; ++i) {
    const double v = labels[i];
    const auto cls = static_cast<long long>(v);
    require(static_cast<double>(cls) == v, "one_hot_encode: non-integer label");
    if (cls == kIgnoreLabel) continue;
    require(cls >= 0 && static_cast<std::size_t>(cls) < n_cls,
            "one_hot_encode: class index " + std::to_string(cls) +
                " out of range for " + std::to_string(n_cls) + " classes");
    out[static_cast<std::size_t>(cls) * plane + i] = 1.0;
  }
  return {std::move(out)};
}

/// Bilinear resize of the one-hot maps to the feature resolution.
inline OneHotLabels resize_one_hot(const OneHotLabels& l, std::size_t H,
                                   std::size_t W) {
  return {bilinear_resize(l.l, H, W)};
}

/// Rare-class weight 1 / ln(c_k + 1).
inline double class_weight(double c_k) {
  require(c_k > 0.0, "class_weight: class is absent (count must be > 0)");
  return 1.0 / std::log(c_k + 1.0);
}

/// Per-class mask mass and masked feature sums of one sample.
struct MaskedSums {
  Tensor sums;               // [N_cls, C]
  std::vector<double> mass;  // [N_cls]
};

inline MaskedSums masked_sums(const Tensor& q, const OneHotLabels& l) {
  require(q.rank() == 3 && l.l.rank() == 3, "masked_sums: expected [C,H,W] and [N,H,W]");
  require(q.dim(1) == l.l.dim(1) && q.dim(2) == l.l.dim(2),
          "prototype masking: features " + shape_str(q.shape()) +
              " and labels " + shape_str(l.l.shape()) + " are not aligned");
  const std::size_t C = q.dim(0), N = l.n_cls(), plane = q.dim(1) * q.dim(2);
  MaskedSums r{Tensor({N, C}), std::vector<double>(N, 0.0)};
  for (std::size_t k = 0; k < N; ++k) {
    const double* lk = &l.l[k * plane];
    for (std::size_t p = 0; p < plane; ++p) r.mass[k] += lk[p];
    for (std::size_t c = 0; c < C; ++c) {
      const double* qc = &q[c * plane];
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) acc += lk[p] * qc[p];
      r.sums.at(k, c) = acc;
    }
  }
  return r;
}

/// Prototype rows as masked means. For a single sample the class weight
/// cancels; across several samples each sample's contribution to class k is
/// weighted by its own 1/ln(C_k + 1). Classes with no mass get zero rows.
inline ClassPrototypeMemory init_prototypes(
    const std::vector<std::pair<Tensor, OneHotLabels>>& samples) {
  require(!samples.empty(), "init_prototypes: no samples");
  const std::size_t N = samples[0].second.n_cls(), C = samples[0].first.dim(0);
  Tensor num({N, C});
  std::vector<double> den(N, 0.0);
  for (const auto& [q, l] : samples) {
    require(l.n_cls() == N && q.dim(0) == C, "init_prototypes: inconsistent batch");
    const auto ms = masked_sums(q, l);
    for (std::size_t k = 0; k < N; ++k) {
      if (ms.mass[k] <= 0.0) continue;
      const double alpha = class_weight(ms.mass[k]);
      for (std::size_t c = 0; c < C; ++c) num.at(k, c) += alpha * ms.sums.at(k, c);
      den[k] += alpha * ms.mass[k];
    }
  }
  for (std::size_t k = 0; k < N; ++k) {
    if (den[k] <= 0.0) continue;
    for (std::size_t c = 0; c < C; ++c) num.at(k, c) /= den[k];
  }
  return {std::move(num)};
}

inline ClassPrototypeMemory init_prototypes(const Tensor& q,
                                            const OneHotLabels& l) {
  return init_prototypes({{q, l}});
}

/// EMA step M' = beta * M + (1 - beta) * A, where A[k] is the masked mean of
/// the per-pixel l2-normalized enhanced features. Classes absent from `l`
/// keep their previous row.
inline ClassPrototypeMemory update_prototypes(const ClassPrototypeMemory& mem,
                                              const Tensor& uf,
                                              const OneHotLabels& l,
                                              double beta) {
  require(beta >= 0.0 && beta <= 1.0, "update_prototypes: beta must be in [0,1]");
  require(uf.rank() == 3 && uf.dim(0) == mem.c_feat() && l.n_cls() == mem.n_cls(),
          "update_prototypes: shape mismatch");
  const auto ms = masked_sums(l2_normalize(uf, 0, kFeatureNormEps), l);
  ClassPrototypeMemory out = mem;
  for (std::size_t k = 0; k < mem.n_cls(); ++k) {
    if (ms.mass[k] <= 0.0) continue;
    for (std::size_t c = 0; c < mem.c_feat(); ++c) {
      const double a = ms.sums.at(k, c) / ms.mass[k];
      out.m.at(k, c) = beta * mem.m.at(k, c) + (1.0 - beta) * a;
    }
  }
  return out;
}

/// Pos[n*C + c, i, j] = Sigmoid(Conv1x1(x1))[n, i, j] * M[n][c].
inline Tensor spatial_modulation(const ClassPrototypeMemory& mem,
                                 const Tensor& x1, const Tensor& conf_w,
                                 const Tensor& conf_b) {
  require(conf_w.rank() == 4 && conf_w.dim(0) == mem.n_cls(),
          "spatial_modulation: confidence conv must map to N_cls channels");
  Tensor conf = conv2d(x1, conf_w, conf_b);
  for (auto& v : conf.vec()) v = 1.0 / (1.0 + std::exp(-v));
  const std::size_t N = mem.n_cls(), C = mem.c_feat();
  const std::size_t H = x1.dim(1), W = x1.dim(2), plane = H * W;
  Tensor pos({N * C, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double m = mem.m.at(n, c);
      double* out = &pos[(n * C + c) * plane];
      const double* w = &conf[n * plane];
      for (std::size_t p = 0; p < plane; ++p) out[p] = w[p] * m;
    }
  return pos;
}

/// 1x1 reduction of the N_cls*C position stack to C channels.
inline Tensor project_pos(const Tensor& pos, const Tensor& proj_w,
                          const Tensor& proj_b) {
  require(proj_w.rank() == 4 && proj_w.dim(2) == 1 && proj_w.dim(3) == 1,
          "project_pos: projection must be a 1x1 convolution");
  return conv2d(pos, proj_w, proj_b);
}

}  // namespace pdss::apem
