#pragma once

// Selective state-space scan with a diagonal per-channel state matrix.
//
//   a_bar[t,d,n] = exp(delta[t,d] * A[d,n])
//   b_bar[t,d,n] = delta[t,d] * B[t,d,n]                  (first-order form)
//                = expm1(delta * A) / A * B[t,d,n]         (exact ZOH form)
//   h[t,d,n]     = a_bar * h[t-1,d,n] + b_bar * u[t,d]
//   y[t,d]       = sum_n C[t,d,n] * h[t,d,n] + D[d] * u[t,d]
//
// B and C are either per-step [L,D,N] or static [D,N].

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "pdss/parallel.hpp"
#include "pdss/tensor.hpp"

namespace pdss::ssm {

enum class Discretization { taylor, exact };

template <typename T>
struct BasicScanParams {
  BasicTensor<T> A;      // [D, N], continuous decay (<= 0 in checked mode)
  BasicTensor<T> B;      // [L, D, N] or [D, N]
  BasicTensor<T> C;      // same layout as B
  BasicTensor<T> D;      // [D]
  BasicTensor<T> delta;  // [L, D], > 0
  Discretization discretization = Discretization::taylor;
};
using ScanParams = BasicScanParams<double>;

template <typename T>
struct BasicScanState {
  BasicTensor<T> h;  // [D, N]
  std::size_t t = 0;
};
using ScanState = BasicScanState<double>;

template <typename T>
struct BasicScanResult {
  BasicTensor<T> y;      // [L, D]
  BasicTensor<T> h_all;  // [L, D, N]; h_all[t] is the state after u[t]
  BasicScanState<T> h_final;
};
using ScanResult = BasicScanResult<double>;

struct ScanOptions {
  bool checked = true;
  std::size_t threads = 1;
};

struct ScanDims {
  std::size_t L, D, N;
  bool per_step;
};

template <typename T>
ScanDims validate(const BasicScanParams<T>& p, const BasicTensor<T>& u,
                  const BasicScanState<T>& h0, bool checked) {
  require(u.rank() == 2, "scan: u must be [L, D]");
  const std::size_t L = u.dim(0), D = u.dim(1);
  require(p.A.rank() == 2 && p.A.dim(0) == D, "scan: A must be [D, N]");
  const std::size_t N = p.A.dim(1);
  const bool per_step = p.B.rank() == 3;
  const Shape bc = per_step ? Shape{L, D, N} : Shape{D, N};
  require(p.B.shape() == bc, "scan: B has shape " + shape_str(p.B.shape()) +
                                 ", expected " + shape_str(bc));
  require(p.C.shape() == bc, "scan: C must match B's static/per-step layout");
  require(p.D.shape() == Shape{D}, "scan: D must be [D]");
  require(p.delta.shape() == (Shape{L, D}), "scan: delta must be [L, D]");
  require(h0.h.shape() == (Shape{D, N}), "scan: h0 must be [D, N]");
  for (auto v : p.delta.vec())
    require(v > T{0}, "scan: delta must be strictly positive");
  if (checked) {
    for (auto v : p.A.vec()) require(v <= T{0}, "scan: A must be <= 0 in checked mode");
  }
  return {L, D, N, per_step};
}

/// ZOH discretization of one scalar mode. Returns (a_bar, b_bar).
template <typename T>
std::pair<T, T> discretize(T a, T b, T delta,
                           Discretization mode = Discretization::taylor) {
  require(delta > T{0}, "discretize: delta must be positive");
  const T a_bar = std::exp(delta * a);
  if (mode == Discretization::taylor || a == T{0}) return {a_bar, delta * b};
  return {a_bar, std::expm1(delta * a) / a * b};
}

namespace detail {

template <typename T>
inline T input_gain(T delta, T a, Discretization mode) {
  if (mode == Discretization::taylor || a == T{0}) return delta;
  return std::expm1(delta * a) / a;
}

// Runs the recurrence for t in [t0, t1) and channels [d0, d1), starting from
// `h` (length D*N, updated in place). Writes y and h_all rows.
template <typename T>
void scan_range(const BasicScanParams<T>& p, const BasicTensor<T>& u,
                const ScanDims& dims, std::size_t t0, std::size_t t1,
                std::size_t d0, std::size_t d1, T* h, BasicTensor<T>& y,
                BasicTensor<T>& h_all) {
  const std::size_t D = dims.D, N = dims.N;
  for (std::size_t t = t0; t < t1; ++t) {
    const std::size_t bc_off = dims.per_step ? t * D * N : 0;
    for (std::size_t d = d0; d < d1; ++d) {
      const T dt = p.delta[t * D + d];
      const T ut = u[t * D + d];
      const T* A = &p.A[d * N];
      const T* B = &p.B[bc_off + d * N];
      const T* C = &p.C[bc_off + d * N];
      T* hd = h + d * N;
      T* out = &h_all[(t * D + d) * N];
      T acc = T{0};
      for (std::size_t n = 0; n < N; ++n) {
        const T a_bar = std::exp(dt * A[n]);
        const T b_bar = input_gain(dt, A[n], p.discretization) * B[n];
        hd[n] = a_bar * hd[n] + b_bar * ut;
        out[n] = hd[n];
        acc += C[n] * hd[n];
      }
      y[t * D + d] = acc + p.D[d] * ut;
    }
  }
}

template <typename T>
void check_finite(const BasicScanResult<T>& r) {
  if (!r.h_all.all_finite() || !r.y.all_finite())
    throw Error(ErrorKind::numeric, "scan produced non-finite values");
}

}  // namespace detail

/// Exact left-to-right evaluation of the recurrence. Channels are independent,
/// so `opt.threads` splits the channel axis without changing any result bit.
template <typename T>
BasicScanResult<T> selective_scan_seq(const BasicScanParams<T>& p,
                                      const BasicTensor<T>& u,
                                      const BasicScanState<T>& h0,
                                      const ScanOptions& opt = {}) {
  const auto dims = validate(p, u, h0, opt.checked);
  BasicScanResult<T> r{BasicTensor<T>({dims.L, dims.D}),
                       BasicTensor<T>({dims.L, dims.D, dims.N}),
                       {h0.h, h0.t + dims.L}};
  const auto bounds = split_range(dims.D, opt.threads);
  parallel_for(bounds.size() - 1, opt.threads, [&](std::size_t part) {
    detail::scan_range(p, u, dims, 0, dims.L, bounds[part], bounds[part + 1],
                       r.h_final.h.data().data(), r.y, r.h_all);
  });
  if (opt.checked) detail::check_finite(r);
  return r;
}

/// Blocked evaluation. Each chunk is summarized by the affine map
/// h -> alpha * h + beta (elementwise per (d, n)); summaries are composed
/// left to right to obtain every chunk's true start state, then each chunk is
/// replayed from its start. Chunks are independent in both parallel phases,
/// so the result does not depend on the thread count.
template <typename T>
BasicScanResult<T> selective_scan_chunked(const BasicScanParams<T>& p,
                                          const BasicTensor<T>& u,
                                          const BasicScanState<T>& h0,
                                          std::size_t chunk,
                                          const ScanOptions& opt = {}) {
  require(chunk >= 1, "selective_scan_chunked: chunk must be >= 1");
  const auto dims = validate(p, u, h0, opt.checked);
  const std::size_t DN = dims.D * dims.N;
  const std::size_t n_chunks = dims.L == 0 ? 0 : (dims.L + chunk - 1) / chunk;

  // Phase 1: per-chunk (alpha, beta).
  std::vector<std::vector<T>> alpha(n_chunks, std::vector<T>(DN, T{1}));
  std::vector<std::vector<T>> beta(n_chunks, std::vector<T>(DN, T{0}));
  parallel_for(n_chunks, opt.threads, [&](std::size_t j) {
    const std::size_t t0 = j * chunk, t1 = std::min(dims.L, t0 + chunk);
    auto& al = alpha[j];
    auto& be = beta[j];
    for (std::size_t t = t0; t < t1; ++t) {
      const std::size_t bc_off = dims.per_step ? t * DN : 0;
      for (std::size_t d = 0; d < dims.D; ++d) {
        const T dt = p.delta[t * dims.D + d];
        const T ut = u[t * dims.D + d];
        for (std::size_t n = 0; n < dims.N; ++n) {
          const std::size_t k = d * dims.N + n;
          const T a_bar = std::exp(dt * p.A[k]);
          const T b_bar =
              detail::input_gain(dt, p.A[k], p.discretization) * p.B[bc_off + k];
          al[k] *= a_bar;
          be[k] = a_bar * be[k] + b_bar * ut;
        }
      }
    }
  });

  // Phase 2: stitch start states, deterministic left-to-right.
  std::vector<std::vector<T>> start(n_chunks);
  std::vector<T> h(h0.h.vec());
  for (std::size_t j = 0; j < n_chunks; ++j) {
    start[j] = h;
    for (std::size_t k = 0; k < DN; ++k) h[k] = alpha[j][k] * h[k] + beta[j][k];
  }

  // Phase 3: replay every chunk from its start state.
  BasicScanResult<T> r{BasicTensor<T>({dims.L, dims.D}),
                       BasicTensor<T>({dims.L, dims.D, dims.N}),
                       {h0.h, h0.t + dims.L}};
  parallel_for(n_chunks, opt.threads, [&](std::size_t j) {
    const std::size_t t0 = j * chunk, t1 = std::min(dims.L, t0 + chunk);
    detail::scan_range(p, u, dims, t0, t1, 0, dims.D, start[j].data(), r.y,
                       r.h_all);
  });
  if (n_chunks > 0) {
    std::copy_n(&r.h_all[(dims.L - 1) * DN], DN, r.h_final.h.data().data());
  }
  if (opt.checked) detail::check_finite(r);
  return r;
}

/// Cosine similarity with a zero fallback when either norm is below eps.
template <typename T>
T cosine_state_similarity(std::span<const T> a, std::span<const T> b,
                          T eps = T(1e-8)) {
  require(a.size() == b.size(), "cosine_state_similarity: length mismatch");
  T dot{0}, na{0}, nb{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < eps || nb < eps) return T{0};
  const T s = dot / (na * nb);
  return std::clamp(s, T{-1}, T{1});
}

struct SimStepParams {
  double w_s = 0.0;
  double b_s = 0.0;
  bool enabled = true;
};

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

/// m = Sigmoid(ReLU(w_s * s + b_s)); always in [0.5, 1).
inline double simstep_gate(double s, const SimStepParams& sp) {
  return sigmoid(std::max(0.0, sp.w_s * s + sp.b_s));
}

template <typename T>
T simstep_modulate(T delta, T s, const SimStepParams& sp) {
  if (!sp.enabled) return delta;
  return delta * (T{1} + static_cast<T>(simstep_gate(s, sp)));
}

inline constexpr double kSimilarityEps = 1e-8;

/// Per-step similarity s[t,d] between B[t,d,:]*u[t,d] and the state before
/// step t (h0 at t = 0), read from a cached state sequence.
template <typename T>
BasicTensor<T> state_similarities(const BasicScanParams<T>& p,
                                  const BasicTensor<T>& u,
                                  const BasicScanState<T>& h0,
                                  const BasicTensor<T>& h_all) {
  const std::size_t L = u.dim(0), D = u.dim(1), N = p.A.dim(1);
  const bool per_step = p.B.rank() == 3;
  BasicTensor<T> s({L, D});
  std::vector<T> bu(N);
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      const T* B = &p.B[(per_step ? t * D * N : 0) + d * N];
      for (std::size_t n = 0; n < N; ++n) bu[n] = B[n] * u[t * D + d];
      const T* hp = t == 0 ? &h0.h[d * N] : &h_all[((t - 1) * D + d) * N];
      s[t * D + d] = cosine_state_similarity<T>(
          bu, std::span<const T>(hp, N), static_cast<T>(kSimilarityEps));
    }
  }
  return s;
}

enum class SimStepMode { two_pass, online };

template <typename T>
struct BasicSimStepResult {
  BasicScanResult<T> scan;
  BasicTensor<T> gate;   // m[t,d]; empty when SimStep is disabled
  BasicTensor<T> delta;  // modulated step sizes actually used
};
using SimStepResult = BasicSimStepResult<double>;

/// Scan with similarity-modulated step sizes. Two-pass (default): the base
/// scan caches every h[t-1], the gates are computed from that cache, and the
/// scan is rerun with the modulated deltas. Online: the similarity is taken
/// against the modulated recurrence's own previous state.
template <typename T>
BasicSimStepResult<T> simstep_scan(const BasicScanParams<T>& p,
                                   const BasicTensor<T>& u,
                                   const BasicScanState<T>& h0,
                                   const SimStepParams& sp,
                                   SimStepMode mode = SimStepMode::two_pass,
                                   const ScanOptions& opt = {}) {
  if (!sp.enabled) {
    auto base = selective_scan_seq(p, u, h0, opt);
    return {std::move(base), BasicTensor<T>(), p.delta};
  }
  const auto dims = validate(p, u, h0, opt.checked);
  BasicTensor<T> gate({dims.L, dims.D});
  BasicScanParams<T> mod = p;
  if (mode == SimStepMode::two_pass) {
    const auto base = selective_scan_seq(p, u, h0, opt);
    const auto s = state_similarities(p, u, h0, base.h_all);
    for (std::size_t i = 0; i < s.size(); ++i) {
      gate[i] = static_cast<T>(simstep_gate(s[i], sp));
      mod.delta[i] = p.delta[i] * (T{1} + gate[i]);
    }
    auto out = selective_scan_seq(mod, u, h0, opt);
    return {std::move(out), std::move(gate), std::move(mod.delta)};
  }
  // Online: one step at a time so each similarity sees the modulated state.
  const std::size_t D = dims.D, N = dims.N;
  BasicScanResult<T> r{BasicTensor<T>({dims.L, D}),
                       BasicTensor<T>({dims.L, D, N}), {h0.h, h0.t + dims.L}};
  std::vector<T> bu(N);
  for (std::size_t t = 0; t < dims.L; ++t) {
    const std::size_t off = dims.per_step ? t * D * N : 0;
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t n = 0; n < N; ++n) bu[n] = p.B[off + d * N + n] * u[t * D + d];
      const T s = cosine_state_similarity<T>(
          bu, std::span<const T>(&r.h_final.h[d * N], N),
          static_cast<T>(kSimilarityEps));
      gate[t * D + d] = static_cast<T>(simstep_gate(s, sp));
      mod.delta[t * D + d] = p.delta[t * D + d] * (T{1} + gate[t * D + d]);
    }
    detail::scan_range(mod, u, dims, t, t + 1, 0, D, r.h_final.h.data().data(),
                       r.y, r.h_all);
  }
  if (opt.checked) detail::check_finite(r);
  return {std::move(r), std::move(gate), std::move(mod.delta)};
}

/// Upstream gradients for scan_backward; empty tensors mean zero.
struct ScanUpstream {
  Tensor y;        // [L, D]
  Tensor h_all;    // [L, D, N]
  Tensor h_final;  // [D, N]
};

struct ScanGrads {
  Tensor u, A, B, C, D, delta, h0;
};

/// Reverse-mode gradients of <upstream.y, y> + <upstream.h_all, h_all> +
/// <upstream.h_final, h_final> with respect to every scan input. The delta
/// gradient includes both the a_bar and the b_bar paths.
inline ScanGrads scan_backward(const ScanParams& p, const Tensor& u,
                               const ScanState& h0, const ScanResult& fwd,
                               const ScanUpstream& up) {
  const auto dims = validate(p, u, h0, false);
  const std::size_t L = dims.L, D = dims.D, N = dims.N;
  require(up.y.size() == 0 || up.y.shape() == (Shape{L, D}),
          "scan_backward: upstream y must be [L, D]");
  require(up.h_all.size() == 0 || up.h_all.shape() == (Shape{L, D, N}),
          "scan_backward: upstream h_all must be [L, D, N]");
  require(up.h_final.size() == 0 || up.h_final.shape() == (Shape{D, N}),
          "scan_backward: upstream h_final must be [D, N]");
  ScanGrads g{Tensor({L, D}), Tensor({D, N}), Tensor(p.B.shape()),
              Tensor(p.C.shape()), Tensor({D}), Tensor({L, D}), Tensor({D, N})};
  std::vector<double> gh(D * N, 0.0);
  if (up.h_final.size()) gh = up.h_final.vec();
  const bool exact = p.discretization == Discretization::exact;

  for (std::size_t t = L; t-- > 0;) {
    const std::size_t off = dims.per_step ? t * D * N : 0;
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t td = t * D + d;
      const double gy = up.y.size() ? up.y[td] : 0.0;
      const double ut = u[td];
      const double dt = p.delta[td];
      g.D[d] += gy * ut;
      double gu = gy * p.D[d];
      double gdelta = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t k = d * N + n;
        const double a = p.A[k];
        const double b = p.B[off + k];
        const double c = p.C[off + k];
        const double h_t = fwd.h_all[td * N + n];
        const double h_prev = t == 0 ? h0.h[k] : fwd.h_all[(td - D) * N + n];
        double ght = gh[k] + gy * c;
        if (up.h_all.size()) ght += up.h_all[td * N + n];
        g.C[off + k] += gy * h_t;

        const double a_bar = std::exp(dt * a);
        double gain, dgain_ddt, dgain_da;
        if (!exact || a == 0.0) {
          gain = dt;
          dgain_ddt = 1.0;
          dgain_da = exact ? 0.5 * dt * dt : 0.0;
        } else {
          const double em1 = std::expm1(dt * a);
          gain = em1 / a;
          dgain_ddt = a_bar;
          const double x = dt * a;
          dgain_da = std::abs(x) < 1e-5
                         ? dt * dt * (0.5 + x / 3.0)
                         : (x * a_bar - em1) / (a * a);
        }
        // h_t = a_bar * h_prev + gain * b * u_t
        gu += ght * gain * b;
        g.B[off + k] += ght * gain * ut;
        const double g_gain = ght * b * ut;
        const double g_abar = ght * h_prev;
        gdelta += g_gain * dgain_ddt + g_abar * a_bar * a;
        g.A[k] += g_gain * dgain_da + g_abar * a_bar * dt;
        gh[k] = ght * a_bar;
      }
      g.u[td] += gu;
      g.delta[td] += gdelta;
    }
  }
  g.h0.vec() = gh;
  return g;
}

/// Convenience overload: recomputes the forward pass, upstream on y only.
inline ScanGrads scan_backward(const ScanParams& p, const Tensor& u,
                               const ScanState& h0, const Tensor& upstream_y) {
  const auto fwd = selective_scan_seq(p, u, h0, {.checked = false});
  return scan_backward(p, u, h0, fwd, {upstream_y, {}, {}});
}

}  // namespace pdss::ssm
