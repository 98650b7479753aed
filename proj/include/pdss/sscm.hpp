#pragma once

// Semantic-structure coordination: four-direction scans in which the semantic
// scan's final hidden state is the initial state of the structural scan.

#include <array>
#include <random>
#include <string>

#include "pdss/autograd.hpp"
#include "pdss/params.hpp"
#include "pdss/scan_geometry.hpp"
#include "pdss/sobel.hpp"
#include "pdss/ssm.hpp"

namespace pdss::sscm {

/// Parameters of one token-driven scan branch (names relative to a prefix):
///   w_delta [C,C], b_delta [C]   delta = softplus(x W^T + b)
///   w_b [N,C], w_c [N,C]         B_t = W_b x_t, C_t = W_c x_t (shared by channels)
///   a_log [C,N]                  A = -exp(a_log)
///   d_skip [C]
inline void init_branch(ParamStore& s, const std::string& prefix, std::size_t C,
                        std::size_t N, std::mt19937_64& rng, double dt_lo = 1e-2,
                        double dt_hi = 1e-1) {
  const double sc = 1.0 / std::sqrt(static_cast<double>(C));
  s[prefix + ".w_delta"] = init::normal({C, C}, 0.1 * sc, rng);
  Tensor b({C});
  std::uniform_real_distribution<double> u(std::log(dt_lo), std::log(dt_hi));
  for (auto& v : b.vec()) v = init::inverse_softplus(std::exp(u(rng)));
  s[prefix + ".b_delta"] = b;
  s[prefix + ".w_b"] = init::normal({N, C}, sc, rng);
  s[prefix + ".w_c"] = init::normal({N, C}, sc, rng);
  Tensor a({C, N});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t n = 0; n < N; ++n) a.at(c, n) = std::log(static_cast<double>(n + 1));
  s[prefix + ".a_log"] = a;
  s[prefix + ".d_skip"] = Tensor({C}, 1.0);
}

inline std::string branch_name(const std::string& prefix, const char* branch,
                               ScanDirection d) {
  return prefix + "." + branch + "." + std::string(to_string(d));
}

/// Full F-SS2D / SSCM parameter set for feature width C and state width N.
inline void init_params(ParamStore& s, const std::string& prefix, std::size_t C,
                        std::size_t N, std::mt19937_64& rng) {
  for (auto d : kAllDirections) {
    init_branch(s, branch_name(prefix, "sem", d), C, N, rng);
    init_branch(s, branch_name(prefix, "struct", d), C, N, rng);
  }
  s[prefix + ".proj.w"] = init::conv_kernel(C, 2 * C, 1, rng, 0.02);
  s[prefix + ".proj.b"] = Tensor({C});
  s[prefix + ".ln.gamma"] = Tensor({C}, 1.0);
  s[prefix + ".ln.beta"] = Tensor({C});
}

struct BranchVars {
  ad::Var delta, A, B, C, D;
};

inline BranchVars branch_vars(ParamBinder& P, const std::string& prefix, ad::Var tokens) {
  const std::size_t C = tokens.shape()[1];
  return {ad::softplus(ad::linear(tokens, P(prefix + ".w_delta"), P(prefix + ".b_delta"))),
          ad::neg_exp(P(prefix + ".a_log")),
          ad::expand_channels(ad::linear(tokens, P(prefix + ".w_b")), C),
          ad::expand_channels(ad::linear(tokens, P(prefix + ".w_c")), C),
          P(prefix + ".d_skip")};
}

/// Concrete scan parameters a branch generates for a token sequence [L,C].
inline ssm::ScanParams branch_scan_params(const ParamStore& store,
                                          const std::string& prefix,
                                          const Tensor& tokens) {
  ad::Tape tape;
  ParamBinder P(tape, store, false);
  auto v = branch_vars(P, prefix, tape.constant(tokens));
  return {v.A.value(), v.B.value(), v.C.value(), v.D.value(), v.delta.value()};
}

struct Options {
  bool seed_structural = true;  // false zeroes the semantic -> structural handoff
  std::size_t threads = 1;
};

/// Per-direction intermediates retained for inspection.
struct DirectionTrace {
  Tensor h_sem;     // [C, N] final semantic state
  Tensor o_sem;     // [L, C]
  Tensor o_struct;  // [L, C]
};

struct Trace {
  std::array<DirectionTrace, 4> directions;
  Tensor structure;  // Sobel map fed to the structural scans
};

/// F-SS2D core. Merges semantic and structural outputs separately over the
/// four directions, concatenates them channelwise and projects 2C -> C.
inline ad::Var f_ss2d(ParamBinder& P, const std::string& prefix, ad::Var pos_proj,
                      ad::Var structure, const Options& opt = {}, Trace* trace = nullptr) {
  const auto& sh = pos_proj.shape();
  require(sh.size() == 3 && structure.shape() == sh,
          "f_ss2d: semantic and structural maps must share shape [C,H,W]");
  const std::size_t C = sh[0], H = sh[1], W = sh[2];
  const std::size_t N = P(branch_name(prefix, "sem", ScanDirection::h) + ".a_log").shape()[1];
  auto& tape = P.tape();
  const auto zero_state = tape.constant(Tensor({C, N}));
  std::optional<ad::Var> sem_sum, struct_sum;
  for (auto dir : kAllDirections) {
    const auto fp = ad::serialize(pos_proj, dir);
    const auto fs = ad::serialize(structure, dir);
    const auto sb = branch_vars(P, branch_name(prefix, "sem", dir), fp);
    const auto sem = ad::selective_scan(fp, sb.delta, sb.A, sb.B, sb.C, sb.D, zero_state,
                                        ssm::Discretization::taylor, opt.threads);
    const auto seed = opt.seed_structural ? sem.h_final : zero_state;
    const auto tb = branch_vars(P, branch_name(prefix, "struct", dir), fs);
    const auto st = ad::selective_scan(fs, tb.delta, tb.A, tb.B, tb.C, tb.D, seed,
                                       ssm::Discretization::taylor, opt.threads);
    if (trace) {
      trace->directions[static_cast<std::size_t>(dir)] = {sem.h_final.value(), sem.y.value(),
                                                          st.y.value()};
    }
    const auto ms = ad::deserialize(sem.y, dir, H, W);
    const auto mt = ad::deserialize(st.y, dir, H, W);
    sem_sum = sem_sum ? ad::add(*sem_sum, ms) : ms;
    struct_sum = struct_sum ? ad::add(*struct_sum, mt) : mt;
  }
  if (trace) trace->structure = structure.value();
  const auto cat = ad::concat({*sem_sum, *struct_sum});
  return ad::conv2d(cat, P(prefix + ".proj.w"), P(prefix + ".proj.b"));
}

/// Block wrapper: layer norm, F-SS2D against Sobel(x1), residual add.
/// `pos_proj` is the already-projected semantic map [C,H,W].
inline ad::Var sscm_block(ParamBinder& P, const std::string& prefix, ad::Var pos_proj,
                          ad::Var x1, const Options& opt = {}, Trace* trace = nullptr) {
  const auto normed = ad::layer_norm(pos_proj, P(prefix + ".ln.gamma"), P(prefix + ".ln.beta"));
  const auto structure = ad::sobel(x1);
  return ad::add(pos_proj, f_ss2d(P, prefix, normed, structure, opt, trace));
}

/// Full module: project the N*C position stack to C (1x1 conv named
/// `proj_prefix`.w/.b), then the block.
inline ad::Var sscm_forward(ParamBinder& P, const std::string& prefix,
                            const std::string& proj_prefix, ad::Var pos, ad::Var x1,
                            const Options& opt = {}, Trace* trace = nullptr) {
  const auto projected = ad::conv2d(pos, P(proj_prefix + ".w"), P(proj_prefix + ".b"));
  return sscm_block(P, prefix, projected, x1, opt, trace);
}

// Tensor-level entry points (no gradient tracking).

inline Tensor f_ss2d(const ParamStore& store, const std::string& prefix,
                     const Tensor& pos_proj, const Tensor& structure,
                     const Options& opt = {}, Trace* trace = nullptr) {
  ad::Tape tape;
  ParamBinder P(tape, store, false);
  return f_ss2d(P, prefix, tape.constant(pos_proj), tape.constant(structure), opt, trace)
      .value();
}

inline Tensor sscm_forward(const ParamStore& store, const std::string& prefix,
                           const std::string& proj_prefix, const Tensor& pos,
                           const Tensor& x1, const Options& opt = {},
                           Trace* trace = nullptr) {
  ad::Tape tape;
  ParamBinder P(tape, store, false);
  return sscm_forward(P, prefix, proj_prefix, tape.constant(pos), tape.constant(x1), opt, trace)
      .value();
}

}  // namespace pdss::sscm
