#pragma once

// Channel similarity adjustment: a bidirectional scan over channel tokens with
// similarity-modulated step sizes. Nothing here can reach the prototype
// memory; the module only sees its input map and its own parameters.

#include <random>
#include <string>

#include "pdss/autograd.hpp"
#include "pdss/params.hpp"
#include "pdss/scan_geometry.hpp"
#include "pdss/ssm.hpp"

namespace pdss::csam {

/// Parameter names relative to `prefix`:
///   a_log [N], d_skip [1]        shared by every spatial position
///   b_chan [C,N], c_chan [C,N]   per channel token
///   dt_w [C], dt_b [C]           delta[t,p] = softplus(dt_w[t] * x[t,p] + dt_b[t])
///   w_s [1], b_s [1]             SimStep gate
///   proj.w [C,C,1,1], proj.b [C], ln.gamma [C], ln.beta [C]
inline void init_params(ParamStore& s, const std::string& prefix, std::size_t C,
                        std::size_t N, std::mt19937_64& rng) {
  Tensor a({N});
  for (std::size_t n = 0; n < N; ++n) a[n] = std::log(static_cast<double>(n + 1));
  s[prefix + ".a_log"] = a;
  s[prefix + ".d_skip"] = Tensor({1}, 1.0);
  s[prefix + ".b_chan"] = init::normal({C, N}, 1.0 / std::sqrt(static_cast<double>(N)), rng);
  s[prefix + ".c_chan"] = init::normal({C, N}, 1.0 / std::sqrt(static_cast<double>(N)), rng);
  s[prefix + ".dt_w"] = init::normal({C}, 0.1, rng);
  s[prefix + ".dt_b"] = Tensor({C}, init::inverse_softplus(0.5));
  s[prefix + ".w_s"] = init::normal({1}, 1.0, rng);
  // Off zero so first-token gates (similarity 0) do not sit on the ReLU kink.
  s[prefix + ".b_s"] = Tensor({1}, 0.1);
  s[prefix + ".proj.w"] = init::conv_kernel(C, C, 1, rng, 0.02);
  s[prefix + ".proj.b"] = Tensor({C});
  s[prefix + ".ln.gamma"] = Tensor({C}, 1.0);
  s[prefix + ".ln.beta"] = Tensor({C});
}

struct Options {
  bool simstep = true;
  ssm::SimStepMode mode = ssm::SimStepMode::two_pass;
  std::size_t threads = 1;
};

struct Trace {
  Tensor gate_forward;  // m[t,p] of the forward channel order (empty if disabled)
  Tensor gate_reverse;
};

namespace detail {

// One channel-order pass over tokens [C,P]. `reversed` scans the channels
// last-to-first; per-channel parameters travel with their channel.
inline ad::Var channel_pass(ParamBinder& P, const std::string& prefix, ad::Var tokens,
                            bool reversed, const Options& opt, Tensor* gate) {
  auto& tape = P.tape();
  const std::size_t Pix = tokens.shape()[1];
  auto order = [&](ad::Var v) { return reversed ? ad::reverse_rows(v) : v; };
  const auto u = order(tokens);
  const auto A = ad::tile_rows(ad::neg_exp(P(prefix + ".a_log")), Pix);
  const auto D = ad::reshape(ad::tile_rows(P(prefix + ".d_skip"), Pix), {Pix});
  const auto B = ad::expand_channels(order(P(prefix + ".b_chan")), Pix);
  const auto Cm = ad::expand_channels(order(P(prefix + ".c_chan")), Pix);
  const auto delta =
      ad::softplus(ad::row_affine(u, order(P(prefix + ".dt_w")), order(P(prefix + ".dt_b"))));
  const auto h0 = tape.constant(Tensor({Pix, A.shape()[1]}));

  auto y = [&] {
    if (!opt.simstep) {
      return ad::selective_scan(u, delta, A, B, Cm, D, h0, ssm::Discretization::taylor,
                                opt.threads).y;
    }
    if (opt.mode == ssm::SimStepMode::online) {
      // Reference path without gradients: used only for comparisons.
      const ssm::ScanParams p{A.value(), B.value(), Cm.value(), D.value(), delta.value()};
      const ssm::SimStepParams sp{P(prefix + ".w_s").value().item(),
                                  P(prefix + ".b_s").value().item(), true};
      auto r = ssm::simstep_scan(p, u.value(), ssm::ScanState{h0.value(), 0}, sp,
                                 ssm::SimStepMode::online, {.checked = false});
      if (gate) *gate = r.gate;
      return tape.constant(std::move(r.scan.y));
    }
    const auto base = ad::selective_scan(u, delta, A, B, Cm, D, h0,
                                         ssm::Discretization::taylor, opt.threads);
    const auto dt = ad::simstep_delta(delta, B, u, base.h_all, h0, P(prefix + ".w_s"),
                                      P(prefix + ".b_s"), gate);
    return ad::selective_scan(u, dt, A, B, Cm, D, h0, ssm::Discretization::taylor,
                              opt.threads).y;
  }();
  return order(y);
}

}  // namespace detail

/// Scan core without the output projection: forward + reverse channel-order
/// scans summed, returned as [C,H,W].
inline ad::Var channel_scan(ParamBinder& P, const std::string& prefix, ad::Var x,
                            const Options& opt = {}, Trace* trace = nullptr) {
  const auto& sh = x.shape();
  require(sh.size() == 3, "sc_ss2d: expected [C,H,W]");
  const auto tokens = ad::reshape(x, {sh[0], sh[1] * sh[2]});
  const auto fwd = detail::channel_pass(P, prefix, tokens, false, opt,
                                        trace ? &trace->gate_forward : nullptr);
  const auto rev = detail::channel_pass(P, prefix, tokens, true, opt,
                                        trace ? &trace->gate_reverse : nullptr);
  return ad::reshape(ad::add(fwd, rev), sh);
}

/// SC-SS2D: channel scan followed by the 1x1 output projection.
inline ad::Var sc_ss2d(ParamBinder& P, const std::string& prefix, ad::Var x,
                       const Options& opt = {}, Trace* trace = nullptr) {
  return ad::conv2d(channel_scan(P, prefix, x, opt, trace), P(prefix + ".proj.w"),
                    P(prefix + ".proj.b"));
}

/// Block wrapper: layer norm, SC-SS2D, residual add.
inline ad::Var csam_forward(ParamBinder& P, const std::string& prefix, ad::Var uf,
                            const Options& opt = {}, Trace* trace = nullptr) {
  const auto normed = ad::layer_norm(uf, P(prefix + ".ln.gamma"), P(prefix + ".ln.beta"));
  return ad::add(uf, sc_ss2d(P, prefix, normed, opt, trace));
}

inline Tensor sc_ss2d(const ParamStore& store, const std::string& prefix, const Tensor& x,
                      const Options& opt = {}, Trace* trace = nullptr) {
  ad::Tape tape;
  ParamBinder P(tape, store, false);
  return sc_ss2d(P, prefix, tape.constant(x), opt, trace).value();
}

inline Tensor csam_forward(const ParamStore& store, const std::string& prefix,
                           const Tensor& uf, const Options& opt = {}, Trace* trace = nullptr) {
  ad::Tape tape;
  ParamBinder P(tape, store, false);
  return csam_forward(P, prefix, tape.constant(uf), opt, trace).value();
}

}  // namespace pdss::csam
