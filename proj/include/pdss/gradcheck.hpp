#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "pdss/tensor.hpp"

namespace pdss {

struct GradCheckReport {
  std::vector<double> numeric;
  std::vector<double> analytic;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  std::size_t worst = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
/// gradient is ~0 from reporting rounding noise as a relative error.
inline double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

/// Two-point stencil has O(h^2) truncation; the five-point one is O(h^4) and
/// tolerates a larger step, which keeps roundoff down on small gradients.
enum class Stencil { two_point, five_point };

/// Central-difference check of `analytic` against f at x0. `f` takes the full
/// parameter vector by const reference.
template <typename F>
GradCheckReport finite_diff_check(F&& f, std::vector<double> x0,
                                  std::span<const double> analytic,
                                  double step, double floor = 1e-8,
                                  Stencil stencil = Stencil::two_point) {
  require(step > 0.0, "finite_diff_check: step must be positive");
  require(analytic.size() == x0.size(),
          "finite_diff_check: analytic gradient length mismatch");
  GradCheckReport r;
  r.numeric.resize(x0.size());
  r.analytic.assign(analytic.begin(), analytic.end());
  r.rel_error.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double keep = x0[i];
    auto at = [&](double offset) {
      x0[i] = keep + offset;
      return f(x0);
    };
    if (stencil == Stencil::two_point) {
      r.numeric[i] = (at(step) - at(-step)) / (2.0 * step);
    } else {
      r.numeric[i] = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) /
                     (12.0 * step);
    }
    x0[i] = keep;
    r.rel_error[i] = relative_error(analytic[i], r.numeric[i], floor);
    if (r.rel_error[i] > r.max_rel_error) {
      r.max_rel_error = r.rel_error[i];
      r.worst = i;
    }
  }
  return r;
}

}  // namespace pdss
