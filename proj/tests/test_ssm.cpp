#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pdss/gradcheck.hpp"
#include "pdss/ssm.hpp"

using namespace pdss;
using namespace pdss::ssm;

namespace {

struct Instance {
  ScanParams p;
  Tensor u;
  ScanState h0;
};

Instance random_instance(std::size_t L, std::size_t D, std::size_t N, bool per_step,
                         std::mt19937_64& rng, bool zero_h0 = false) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ad(0.05, 2.0), dd(0.01, 0.5);
  Instance in;
  in.p.A = Tensor({D, N});
  for (auto& v : in.p.A.vec()) v = -ad(rng);
  const Shape bc = per_step ? Shape{L, D, N} : Shape{D, N};
  in.p.B = Tensor(bc);
  in.p.C = Tensor(bc);
  for (auto& v : in.p.B.vec()) v = nd(rng);
  for (auto& v : in.p.C.vec()) v = nd(rng);
  in.p.D = Tensor({D});
  for (auto& v : in.p.D.vec()) v = nd(rng);
  in.p.delta = Tensor({L, D});
  for (auto& v : in.p.delta.vec()) v = dd(rng);
  in.u = Tensor({L, D});
  for (auto& v : in.u.vec()) v = nd(rng);
  in.h0.h = Tensor({D, N});
  if (!zero_h0)
    for (auto& v : in.h0.h.vec()) v = nd(rng);
  return in;
}

// Scalar recurrence written out per (t, d, n), independent of the library kernels.
ScanResult naive_scan(const ScanParams& p, const Tensor& u, const ScanState& h0) {
  const std::size_t L = u.dim(0), D = u.dim(1), N = p.A.dim(1);
  const bool ps = p.B.rank() == 3;
  ScanResult r{Tensor({L, D}), Tensor({L, D, N}), h0};
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      double y = p.D[d] * u.at(t, d);
      for (std::size_t n = 0; n < N; ++n) {
        const double a = p.A.at(d, n), dt = p.delta.at(t, d);
        const double b = ps ? p.B.at(t, d, n) : p.B.at(d, n);
        const double c = ps ? p.C.at(t, d, n) : p.C.at(d, n);
        const double gain = p.discretization == Discretization::exact && a != 0.0
                                ? (std::exp(dt * a) - 1.0) / a
                                : dt;
        double& h = r.h_final.h.at(d, n);
        h = std::exp(dt * a) * h + gain * b * u.at(t, d);
        r.h_all.at(t, d, n) = h;
        y += c * h;
      }
      r.y.at(t, d) = y;
    }
  return r;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Discretize, Examples) {
  auto [a0, b0] = discretize(0.0, 1.0, 0.5);
  EXPECT_EQ(a0, 1.0);
  EXPECT_EQ(b0, 0.5);
  const double ln2 = std::log(2.0);
  auto [a1, b1] = discretize(-1.0, 1.0, ln2);
  EXPECT_NEAR(a1, 0.5, 1e-15);
  EXPECT_NEAR(b1, 0.6931471805599453, 1e-15);
  auto [a2, b2] = discretize(-1.0, 1.0, ln2, Discretization::exact);
  EXPECT_NEAR(a2, 0.5, 1e-15);
  EXPECT_NEAR(b2, 0.5, 1e-15);
}

TEST(Discretize, RejectsNonPositiveDelta) {
  EXPECT_THROW(discretize(-1.0, 1.0, 0.0), Error);
  EXPECT_THROW(discretize(-1.0, 1.0, -0.1), Error);
}

TEST(SequentialScan, HandRecurrence) {
  const double ln2 = std::log(2.0);
  ScanParams p{Tensor({1, 1}, -1.0), Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0), Tensor({1}),
               Tensor({2, 1}, ln2)};
  const Tensor u({2, 1}, {1.0, 0.0});
  const auto r = selective_scan_seq(p, u, ScanState{Tensor({1, 1}), 0});
  EXPECT_NEAR(r.h_all[0], ln2, 1e-15);
  EXPECT_NEAR(r.h_all[1], ln2 / 2, 1e-15);
  EXPECT_NEAR(r.y[0], 0.6931471805599453, 1e-15);
  EXPECT_NEAR(r.y[1], 0.34657359027997264, 1e-15);
  EXPECT_EQ(r.h_final.t, 2u);
}

TEST(SequentialScan, ZeroDynamics) {
  std::mt19937_64 rng(1);
  auto in = random_instance(16, 3, 4, true, rng, true);
  in.u.fill(0.0);
  const auto r = selective_scan_seq(in.p, in.u, in.h0);
  for (auto v : r.y.vec()) EXPECT_EQ(v, 0.0);
  for (auto v : r.h_final.h.vec()) EXPECT_EQ(v, 0.0);
}

TEST(SequentialScan, PureSkipPath) {
  std::mt19937_64 rng(2);
  auto in = random_instance(12, 2, 3, false, rng);
  in.p.C.fill(0.0);
  in.p.D.fill(1.0);
  EXPECT_EQ(selective_scan_seq(in.p, in.u, in.h0).y, in.u);
}

TEST(SequentialScan, MatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    for (bool ps : {false, true})
      for (auto disc : {Discretization::taylor, Discretization::exact}) {
        auto in = random_instance(20, 3, 5, ps, rng);
        in.p.discretization = disc;
        const auto r = selective_scan_seq(in.p, in.u, in.h0);
        const auto o = naive_scan(in.p, in.u, in.h0);
        EXPECT_LE(max_abs_diff(r.y, o.y), 1e-12);
        EXPECT_LE(max_abs_diff(r.h_all, o.h_all), 1e-12);
        EXPECT_LE(max_abs_diff(r.h_final.h, o.h_final.h), 1e-12);
      }
  }
}

TEST(SequentialScan, ThreadCountDoesNotChangeBits) {
  std::mt19937_64 rng(4);
  const auto in = random_instance(64, 7, 4, true, rng);
  const auto r1 = selective_scan_seq(in.p, in.u, in.h0, {.threads = 1});
  for (std::size_t th : {2u, 3u, 8u}) {
    const auto r = selective_scan_seq(in.p, in.u, in.h0, {.threads = th});
    EXPECT_EQ(r.y, r1.y);
    EXPECT_EQ(r.h_all, r1.h_all);
  }
}

TEST(SequentialScan, Validation) {
  std::mt19937_64 rng(5);
  auto in = random_instance(4, 2, 3, true, rng);
  auto bad = in;
  bad.p.delta[0] = 0.0;
  EXPECT_THROW(selective_scan_seq(bad.p, bad.u, bad.h0), Error);
  bad = in;
  bad.p.A[0] = 0.5;
  EXPECT_THROW(selective_scan_seq(bad.p, bad.u, bad.h0), Error);
  EXPECT_NO_THROW(selective_scan_seq(bad.p, bad.u, bad.h0, {.checked = false}));
  bad = in;
  bad.p.C = Tensor({2, 3});
  EXPECT_THROW(selective_scan_seq(bad.p, bad.u, bad.h0), Error);
  bad = in;
  bad.h0.h = Tensor({3, 2});
  EXPECT_THROW(selective_scan_seq(bad.p, bad.u, bad.h0), Error);
}

TEST(SequentialScan, CheckedModeRejectsOverflow) {
  ScanParams p{Tensor({1, 1}, 50.0), Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0), Tensor({1}),
               Tensor({40, 1}, 1.0)};
  const Tensor u({40, 1}, 1.0);
  try {
    selective_scan_seq(p, u, ScanState{Tensor({1, 1}), 0}, {.checked = false});
  } catch (...) {
    FAIL() << "unchecked mode must not throw";
  }
  p.A[0] = -0.0;
  p.delta.fill(1e300);
  p.B.fill(1e300);
  try {
    selective_scan_seq(p, u, ScanState{Tensor({1, 1}), 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(SequentialScan, LinearInInitialState) {
  std::mt19937_64 rng(6);
  auto in = random_instance(30, 3, 4, true, rng);
  const ScanState zero{Tensor({3, 4}), 0};
  const auto base = selective_scan_seq(in.p, in.u, zero).y;
  auto response = [&](double alpha) {
    ScanState s{in.h0.h, 0};
    s.h *= alpha;
    auto y = selective_scan_seq(in.p, in.u, s).y;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= base[i];
    return y;
  };
  const auto r1 = response(1.0), r3 = response(3.0), rm = response(-0.5);
  for (std::size_t i = 0; i < r1.size(); ++i) {
    EXPECT_NEAR(r3[i], 3.0 * r1[i], 1e-11);
    EXPECT_NEAR(rm[i], -0.5 * r1[i], 1e-11);
  }
}

TEST(SequentialScan, LongSequenceStaysBounded) {
  std::mt19937_64 rng(7);
  const std::size_t L = 100000, D = 2, N = 4;
  auto in = random_instance(L, D, N, false, rng, true);
  std::uniform_real_distribution<double> ud(-1.0, 1.0);
  for (auto& v : in.u.vec()) v = ud(rng);
  const auto r = selective_scan_seq(in.p, in.u, in.h0);
  // |h| <= max|b_bar u| / (1 - max a_bar) per mode.
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t n = 0; n < N; ++n) {
      double max_abar = 0, max_in = 0;
      for (std::size_t t = 0; t < L; ++t) {
        const double dt = in.p.delta.at(t, d);
        max_abar = std::max(max_abar, std::exp(dt * in.p.A.at(d, n)));
        max_in = std::max(max_in, std::abs(dt * in.p.B.at(d, n) * in.u.at(t, d)));
      }
      const double bound = max_in / (1.0 - max_abar);
      for (std::size_t t = 0; t < L; ++t)
        ASSERT_LE(std::abs(r.h_all.at(t, d, n)), bound * (1 + 1e-12));
    }
  EXPECT_TRUE(r.y.all_finite());
}

TEST(ChunkedScan, SingleChunkIsBitIdentical) {
  std::mt19937_64 rng(8);
  const auto in = random_instance(40, 3, 4, true, rng);
  const auto s = selective_scan_seq(in.p, in.u, in.h0);
  const auto c = selective_scan_chunked(in.p, in.u, in.h0, 40);
  EXPECT_EQ(c.y, s.y);
  EXPECT_EQ(c.h_all, s.h_all);
  EXPECT_EQ(c.h_final.h, s.h_final.h);
}

TEST(ChunkedScan, MatchesSequentialForAllChunkSizes) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t L = 33;
    const auto in = random_instance(L, 2, 3, rep % 2 == 0, rng);
    const auto s = selective_scan_seq(in.p, in.u, in.h0);
    for (std::size_t chunk = 1; chunk <= L + 2; ++chunk) {
      const auto c = selective_scan_chunked(in.p, in.u, in.h0, chunk);
      ASSERT_LE(max_abs_diff(c.y, s.y), chunk == 1 ? 1e-12 : 1e-10) << chunk;
      ASSERT_LE(max_abs_diff(c.h_final.h, s.h_final.h), 1e-10);
    }
  }
}

TEST(ChunkedScan, ThreadCountInvariant) {
  std::mt19937_64 rng(10);
  const auto in = random_instance(256, 4, 8, true, rng);
  const auto ref = selective_scan_chunked(in.p, in.u, in.h0, 16, {.threads = 1});
  for (std::size_t th : {2u, 4u, 7u}) {
    const auto c = selective_scan_chunked(in.p, in.u, in.h0, 16, {.threads = th});
    EXPECT_EQ(c.y, ref.y);
    EXPECT_EQ(c.h_all, ref.h_all);
  }
}

TEST(ChunkedScan, ZeroChunkRejected) {
  std::mt19937_64 rng(11);
  const auto in = random_instance(4, 1, 1, false, rng);
  EXPECT_THROW(selective_scan_chunked(in.p, in.u, in.h0, 0), Error);
}

TEST(ChunkedScan, FloatPath) {
  std::mt19937_64 rng(12);
  const auto in = random_instance(128, 4, 8, true, rng);
  BasicScanParams<float> pf{in.p.A.cast<float>(), in.p.B.cast<float>(), in.p.C.cast<float>(),
                            in.p.D.cast<float>(), in.p.delta.cast<float>()};
  const BasicScanState<float> h0{in.h0.h.cast<float>(), 0};
  const auto s = selective_scan_seq(pf, in.u.cast<float>(), h0);
  const auto c = selective_scan_chunked(pf, in.u.cast<float>(), h0, 16);
  EXPECT_LE(max_abs_diff(c.y, s.y), 1e-4);
}

TEST(CosineSimilarity, Examples) {
  const std::vector<double> a{1, 0}, b{2, 0}, c{0, 3}, z{0, 0};
  EXPECT_DOUBLE_EQ(cosine_state_similarity<double>(a, b), 1.0);
  EXPECT_DOUBLE_EQ(cosine_state_similarity<double>(a, c), 0.0);
  EXPECT_DOUBLE_EQ(cosine_state_similarity<double>(a, z), 0.0);
  EXPECT_DOUBLE_EQ(cosine_state_similarity<double>(z, a), 0.0);
}

TEST(CosineSimilarity, RangeProperty) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> a(5), b(5);
    for (auto& v : a) v = nd(rng);
    for (auto& v : b) v = rep % 3 == 0 ? 2.5 * a[&v - b.data()] : nd(rng);
    const double s = cosine_state_similarity<double>(a, b);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(SimStep, ModulateExamples) {
  const SimStepParams zero{0.0, 0.0, true};
  EXPECT_DOUBLE_EQ(simstep_modulate(0.2, 0.37, zero), 0.3);
  EXPECT_EQ(simstep_modulate(0.2, 0.9, SimStepParams{3.0, 1.0, false}), 0.2);
  EXPECT_DOUBLE_EQ(simstep_modulate(0.2, -1.0, SimStepParams{1.0, 0.0, true}), 0.3);
}

TEST(SimStep, GateRangeProperty) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> nd(0.0, 5.0);
  std::uniform_real_distribution<double> sd(-1.0, 1.0);
  for (int rep = 0; rep < 2000; ++rep) {
    const SimStepParams sp{nd(rng), nd(rng), true};
    const double m = simstep_gate(sd(rng), sp);
    EXPECT_GE(m, 0.5);
    EXPECT_LT(m, 1.0);
  }
}

TEST(SimStepScan, DisabledIsBitIdentical) {
  std::mt19937_64 rng(15);
  const auto in = random_instance(24, 3, 4, true, rng);
  const auto base = selective_scan_seq(in.p, in.u, in.h0);
  const auto r = simstep_scan(in.p, in.u, in.h0, SimStepParams{1.3, 0.2, false});
  EXPECT_EQ(r.scan.y, base.y);
  EXPECT_EQ(r.scan.h_all, base.h_all);
}

TEST(SimStepScan, ZeroGateEqualsPrescaledDelta) {
  std::mt19937_64 rng(16);
  auto in = random_instance(32, 3, 4, true, rng, true);
  in.u.fill(0.7);
  const auto r = simstep_scan(in.p, in.u, in.h0, SimStepParams{0.0, 0.0, true});
  auto scaled = in.p;
  scaled.delta *= 1.5;
  const auto o = selective_scan_seq(scaled, in.u, in.h0);
  EXPECT_LE(max_abs_diff(r.scan.y, o.y), 1e-12);
  for (auto m : r.gate.vec()) EXPECT_EQ(m, 0.5);
}

TEST(SimStepScan, SingleStepVariantsAgree) {
  std::mt19937_64 rng(17);
  const auto in = random_instance(1, 4, 3, true, rng);
  const SimStepParams sp{2.0, 0.1, true};
  const auto a = simstep_scan(in.p, in.u, in.h0, sp, SimStepMode::two_pass);
  const auto b = simstep_scan(in.p, in.u, in.h0, sp, SimStepMode::online);
  EXPECT_LE(max_abs_diff(a.scan.y, b.scan.y), 1e-15);
}

TEST(SimStepScan, TwoPassGatesUseBaseStates) {
  std::mt19937_64 rng(18);
  const auto in = random_instance(20, 2, 3, true, rng);
  const SimStepParams sp{1.7, -0.2, true};
  const auto r = simstep_scan(in.p, in.u, in.h0, sp);
  const auto base = naive_scan(in.p, in.u, in.h0);
  for (std::size_t t = 0; t < 20; ++t)
    for (std::size_t d = 0; d < 2; ++d) {
      std::vector<double> bu(3), hp(3);
      for (std::size_t n = 0; n < 3; ++n) {
        bu[n] = in.p.B.at(t, d, n) * in.u.at(t, d);
        hp[n] = t == 0 ? in.h0.h.at(d, n) : base.h_all.at(t - 1, d, n);
      }
      double dt = 0, na = 0, nb = 0;
      for (std::size_t n = 0; n < 3; ++n) {
        dt += bu[n] * hp[n];
        na += bu[n] * bu[n];
        nb += hp[n] * hp[n];
      }
      const double s = dt / std::sqrt(na * nb);
      const double m = 1.0 / (1.0 + std::exp(-std::max(0.0, 1.7 * s - 0.2)));
      EXPECT_NEAR(r.gate.at(t, d), m, 1e-14);
      EXPECT_NEAR(r.delta.at(t, d), in.p.delta.at(t, d) * (1 + m), 1e-14);
      EXPECT_GE(r.delta.at(t, d) / in.p.delta.at(t, d), 1.5 - 1e-15);
      EXPECT_LT(r.delta.at(t, d) / in.p.delta.at(t, d), 2.0);
    }
}

TEST(ScanBackward, SkipPathGradientIsUpstream) {
  std::mt19937_64 rng(19);
  auto in = random_instance(10, 3, 2, true, rng);
  in.p.C.fill(0.0);
  in.p.D.fill(1.0);
  Tensor up({10, 3});
  for (std::size_t i = 0; i < up.size(); ++i) up[i] = 0.1 * static_cast<double>(i) - 1.0;
  const auto g = scan_backward(in.p, in.u, in.h0, up);
  EXPECT_EQ(g.u, up);
}

TEST(ScanBackward, ZeroUpstreamGivesZeros) {
  std::mt19937_64 rng(20);
  const auto in = random_instance(8, 2, 3, true, rng);
  const auto g = scan_backward(in.p, in.u, in.h0, Tensor({8, 2}));
  for (const Tensor* t : {&g.u, &g.A, &g.B, &g.C, &g.D, &g.delta, &g.h0})
    for (auto v : t->vec()) EXPECT_EQ(v, 0.0);
}

namespace {

// Central-difference check of every input gradient for upstreams on y, h_all
// and h_final at once.
double max_fd_error(const Instance& in, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const auto fwd = selective_scan_seq(in.p, in.u, in.h0, {.checked = false});
  ScanUpstream up{Tensor(fwd.y.shape()), Tensor(fwd.h_all.shape()), Tensor(in.h0.h.shape())};
  for (Tensor* t : {&up.y, &up.h_all, &up.h_final})
    for (auto& v : t->vec()) v = nd(rng);
  const auto g = scan_backward(in.p, in.u, in.h0, fwd, up);
  auto objective = [&](const Instance& x) {
    const auto r = naive_scan(x.p, x.u, x.h0);
    return dot(up.y, r.y) + dot(up.h_all, r.h_all) + dot(up.h_final, r.h_final.h);
  };
  double worst = 0;
  auto check = [&](auto member, const Tensor& analytic) {
    Instance x = in;
    Tensor& target = member(x);
    const auto rep = finite_diff_check(
        [&](const std::vector<double>& v) {
          target.vec() = v;
          return objective(x);
        },
        target.vec(), analytic.vec(), 1e-6);
    worst = std::max(worst, rep.max_rel_error);
  };
  check([](Instance& x) -> Tensor& { return x.u; }, g.u);
  check([](Instance& x) -> Tensor& { return x.p.A; }, g.A);
  check([](Instance& x) -> Tensor& { return x.p.B; }, g.B);
  check([](Instance& x) -> Tensor& { return x.p.C; }, g.C);
  check([](Instance& x) -> Tensor& { return x.p.D; }, g.D);
  check([](Instance& x) -> Tensor& { return x.p.delta; }, g.delta);
  check([](Instance& x) -> Tensor& { return x.h0.h; }, g.h0);
  return worst;
}

}  // namespace

TEST(ScanBackward, FiniteDifferencesSmallInstance) {
  std::mt19937_64 rng(21);
  const auto in = random_instance(8, 2, 3, true, rng);
  EXPECT_LE(max_fd_error(in, rng), 1e-5);
}

TEST(ScanBackward, FiniteDifferencesStaticAndExact) {
  std::mt19937_64 rng(22);
  for (int rep = 0; rep < 6; ++rep) {
    auto in = random_instance(6 + rep * 4, 2, 3, rep % 2 == 0, rng);
    in.p.discretization = rep < 3 ? Discretization::taylor : Discretization::exact;
    EXPECT_LE(max_fd_error(in, rng), 1e-5) << rep;
  }
}

TEST(FiniteDiff, QuadraticAndLinear) {
  auto rq = finite_diff_check([](const std::vector<double>& x) { return x[0] * x[0]; }, {3.0},
                              std::vector<double>{6.0}, 1e-6);
  EXPECT_NEAR(rq.numeric[0], 6.0, 1e-9);
  auto rl = finite_diff_check(
      [](const std::vector<double>& x) { return 2.0 * x[0] - 0.5 * x[1]; }, {1.0, 4.0},
      std::vector<double>{2.0, -0.5}, 1e-3);
  EXPECT_NEAR(rl.numeric[0], 2.0, 1e-12);
  EXPECT_NEAR(rl.numeric[1], -0.5, 1e-12);
  EXPECT_LE(rl.max_rel_error, 1e-10);
}

TEST(FiniteDiff, RejectsBadStep) {
  EXPECT_THROW(finite_diff_check([](const std::vector<double>&) { return 0.0; }, {1.0},
                                 std::vector<double>{0.0}, 0.0),
               Error);
}
