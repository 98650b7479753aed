#pragma once

// Segmentation losses and metrics.

#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdss/apem.hpp"
#include "pdss/tensor.hpp"

namespace pdss::eval {

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kDiceEps = 1e-6;

struct LossValue {
  double value = 0.0;
  bool all_ignored = false;  // no labelled pixel; value is defined as 0
};

namespace detail {

inline void check_pair(const Tensor& probs, const apem::OneHotLabels& y) {
  require(probs.rank() == 3 && probs.shape() == y.l.shape(),
          "loss: probabilities " + shape_str(probs.shape()) +
              " and labels " + shape_str(y.l.shape()) + " differ in shape");
}

// Pixel p is labelled when its one-hot column is nonzero.
inline std::vector<char> labelled_mask(const apem::OneHotLabels& y,
                                       std::size_t& count) {
  const std::size_t N = y.l.dim(0), plane = y.l.dim(1) * y.l.dim(2);
  std::vector<char> mask(plane, 0);
  count = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < N; ++k) s += y.l[k * plane + p];
    if (s > 0.0) {
      mask[p] = 1;
      ++count;
    }
  }
  return mask;
}

}  // namespace detail

/// Mean over labelled pixels of -sum_k y_k log(max(p_k, 1e-12)).
inline LossValue cross_entropy(const Tensor& probs, const apem::OneHotLabels& y) {
  detail::check_pair(probs, y);
  std::size_t n = 0;
  const auto mask = detail::labelled_mask(y, n);
  if (n == 0) return {0.0, true};
  const std::size_t N = probs.dim(0), plane = mask.size();
  double acc = 0.0;
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t p = 0; p < plane; ++p) {
      const double t = y.l[k * plane + p];
      if (!mask[p] || t == 0.0) continue;
      acc -= t * std::log(std::max(probs[k * plane + p], kLogClamp));
    }
  return {acc / static_cast<double>(n), false};
}

inline Tensor cross_entropy_grad(const Tensor& probs, const apem::OneHotLabels& y) {
  detail::check_pair(probs, y);
  std::size_t n = 0;
  const auto mask = detail::labelled_mask(y, n);
  Tensor g(probs.shape());
  if (n == 0) return g;
  const std::size_t N = probs.dim(0), plane = mask.size();
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t p = 0; p < plane; ++p) {
      const double t = y.l[k * plane + p], pr = probs[k * plane + p];
      if (!mask[p] || t == 0.0 || pr < kLogClamp) continue;
      g[k * plane + p] = -t / (pr * static_cast<double>(n));
    }
  return g;
}

/// 1 - (2/n) sum_p sum_k p*y / (p + y + eps) over labelled pixels.
inline LossValue dice_loss(const Tensor& probs, const apem::OneHotLabels& y,
                           double eps = kDiceEps) {
  require(eps > 0.0, "dice_loss: eps must be positive");
  detail::check_pair(probs, y);
  std::size_t n = 0;
  const auto mask = detail::labelled_mask(y, n);
  if (n == 0) return {0.0, true};
  const std::size_t N = probs.dim(0), plane = mask.size();
  double acc = 0.0;
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t p = 0; p < plane; ++p) {
      if (!mask[p]) continue;
      const double pr = probs[k * plane + p], t = y.l[k * plane + p];
      acc += pr * t / (pr + t + eps);
    }
  return {1.0 - 2.0 * acc / static_cast<double>(n), false};
}

inline Tensor dice_grad(const Tensor& probs, const apem::OneHotLabels& y,
                        double eps = kDiceEps) {
  detail::check_pair(probs, y);
  std::size_t n = 0;
  const auto mask = detail::labelled_mask(y, n);
  Tensor g(probs.shape());
  if (n == 0) return g;
  const std::size_t N = probs.dim(0), plane = mask.size();
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t p = 0; p < plane; ++p) {
      if (!mask[p]) continue;
      const double pr = probs[k * plane + p], t = y.l[k * plane + p];
      const double den = pr + t + eps;
      // d/dp [p t / (p + t + eps)] = t (t + eps) / den^2
      g[k * plane + p] = -2.0 / static_cast<double>(n) * t * (t + eps) / (den * den);
    }
  return g;
}

struct LossTerms {
  bool use_ce = true;
  bool use_dice = true;
};

struct CombinedLoss {
  double ce = 0.0, dice = 0.0, total = 0.0;
  bool all_ignored = false;
};

inline CombinedLoss combined_loss(const Tensor& probs, const apem::OneHotLabels& y,
                                  LossTerms terms = {}) {
  const auto ce = cross_entropy(probs, y);
  const auto dc = dice_loss(probs, y);
  CombinedLoss r{ce.value, dc.value, 0.0, ce.all_ignored};
  r.total = (terms.use_ce ? r.ce : 0.0) + (terms.use_dice ? r.dice : 0.0);
  return r;
}

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_cls)
      : n_(n_cls), counts_(n_cls * n_cls, 0) {
    require(n_cls >= 1, "ConfusionMatrix: need at least one class");
  }

  std::size_t n_cls() const { return n_; }
  std::uint64_t operator()(std::size_t gt, std::size_t pred) const {
    return counts_[gt * n_ + pred];
  }
  std::uint64_t& operator()(std::size_t gt, std::size_t pred) {
    return counts_[gt * n_ + pred];
  }
  std::uint64_t ignored() const { return ignored_; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Adds one tile. Pixels whose ground truth is the ignore label are counted
  /// separately and never enter the matrix.
  void accumulate(const Tensor& pred, const Tensor& gt) {
    require(pred.shape() == gt.shape(), "accumulate_confusion: shape mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const auto g = static_cast<long long>(gt[i]);
      if (g == apem::kIgnoreLabel) {
        ++ignored_;
        continue;
      }
      const auto p = static_cast<long long>(pred[i]);
      require(g >= 0 && static_cast<std::size_t>(g) < n_ && p >= 0 &&
                  static_cast<std::size_t>(p) < n_,
              "accumulate_confusion: class index out of range");
      ++counts_[static_cast<std::size_t>(g) * n_ + static_cast<std::size_t>(p)];
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    require(o.n_ == n_, "ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    ignored_ += o.ignored_;
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

struct MetricsReport {
  double oa = 0.0, miou = 0.0, mean_f1 = 0.0;
  std::vector<double> iou, precision, recall, f1;
  std::vector<bool> present;  // class occurs in the ground truth
  std::uint64_t total = 0, ignored = 0;
};

/// OA = trace / total; per-class IoU, precision, recall and F1; means are
/// taken over classes present in the ground truth.
inline MetricsReport metrics(const ConfusionMatrix& cm) {
  const std::size_t N = cm.n_cls();
  MetricsReport r;
  r.total = cm.total();
  r.ignored = cm.ignored();
  require(r.total > 0, "metrics: empty confusion matrix");
  r.iou.assign(N, 0.0);
  r.precision.assign(N, 0.0);
  r.recall.assign(N, 0.0);
  r.f1.assign(N, 0.0);
  r.present.assign(N, false);
  std::uint64_t trace = 0;
  std::size_t n_present = 0;
  for (std::size_t k = 0; k < N; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < N; ++j) {
      row += cm(k, j);
      col += cm(j, k);
    }
    const double tp = static_cast<double>(cm(k, k));
    const double fp = static_cast<double>(col) - tp;
    const double fn = static_cast<double>(row) - tp;
    trace += cm(k, k);
    r.present[k] = row > 0;
    if (tp + fp + fn > 0) r.iou[k] = tp / (tp + fp + fn);
    if (tp + fp > 0) r.precision[k] = tp / (tp + fp);
    if (tp + fn > 0) r.recall[k] = tp / (tp + fn);
    const double ps = r.precision[k] + r.recall[k];
    if (ps > 0) r.f1[k] = 2.0 * r.precision[k] * r.recall[k] / ps;
    if (r.present[k]) {
      r.miou += r.iou[k];
      r.mean_f1 += r.f1[k];
      ++n_present;
    }
  }
  r.oa = static_cast<double>(trace) / static_cast<double>(r.total);
  if (n_present) {
    r.miou /= static_cast<double>(n_present);
    r.mean_f1 /= static_cast<double>(n_present);
  }
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t k = 0; k < r.iou.size(); ++k) {
    classes.push_back({{"class", k},
                       {"present", static_cast<bool>(r.present[k])},
                       {"iou", r.iou[k]},
                       {"precision", r.precision[k]},
                       {"recall", r.recall[k]},
                       {"f1", r.f1[k]}});
  }
  std::vector<bool> mask(r.present.begin(), r.present.end());
  return {{"oa", r.oa},
          {"miou", r.miou},
          {"mean_f1", r.mean_f1},
          {"classes", classes},
          {"class_present", mask},
          {"total_pixels", r.total},
          {"ignored_pixels", r.ignored}};
}

}  // namespace pdss::eval
