#pragma once

// Gradient checks at micro scale, shared by the CLI and the acceptance run.

#include <random>

#include "pdss/gradcheck.hpp"
#include "pdss/network.hpp"
#include "pdss/ssm.hpp"
#include "pdss/synthetic.hpp"

namespace pdss::checks {

/// Random scan instance with A < 0 and positive step sizes.
struct ScanInstance {
  ssm::ScanParams p;
  Tensor u;
  ssm::ScanState h0;
};

inline ScanInstance random_scan_instance(std::size_t L, std::size_t D, std::size_t N,
                                         bool per_step, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> a(-2.0, -0.05), dt(0.05, 0.8);
  auto fill = [&](Shape s, auto& dist) {
    Tensor t(std::move(s));
    for (auto& v : t.vec()) v = dist(rng);
    return t;
  };
  ScanInstance in;
  in.p.A = fill({D, N}, a);
  in.p.B = per_step ? fill({L, D, N}, nd) : fill({D, N}, nd);
  in.p.C = per_step ? fill({L, D, N}, nd) : fill({D, N}, nd);
  in.p.D = fill({D}, nd);
  in.p.delta = fill({L, D}, dt);
  in.u = fill({L, D}, nd);
  in.h0 = {fill({D, N}, nd), 0};
  return in;
}

/// Max relative error of scan_backward against central differences, over every
/// input, with random upstream gradients on y, the state history and h_final.
inline double scan_gradcheck(const ScanInstance& in, std::mt19937_64& rng,
                             double step = 1e-4) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const auto fwd = ssm::selective_scan_seq(in.p, in.u, in.h0);
  ssm::ScanUpstream up{Tensor(fwd.y.shape()), Tensor(fwd.h_all.shape()),
                       Tensor(in.h0.h.shape())};
  for (Tensor* t : {&up.y, &up.h_all, &up.h_final})
    for (auto& v : t->vec()) v = nd(rng);
  const auto g = ssm::scan_backward(in.p, in.u, in.h0, fwd, up);
  auto dot = [](const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  auto objective = [&](const ScanInstance& x) {
    const auto r = ssm::selective_scan_seq(x.p, x.u, x.h0, {.checked = false});
    return dot(up.y, r.y) + dot(up.h_all, r.h_all) + dot(up.h_final, r.h_final.h);
  };
  double worst = 0.0;
  auto check = [&](Tensor ScanInstance::*outer, Tensor ssm::ScanParams::*inner,
                   Tensor ssm::ScanState::*state, const Tensor& analytic) {
    ScanInstance x = in;
    Tensor& target = outer ? x.*outer : inner ? x.p.*inner : x.h0.*state;
    const auto rep = finite_diff_check(
        [&](const std::vector<double>& v) {
          target.vec() = v;
          return objective(x);
        },
        target.vec(), analytic.vec(), step, 1e-8, Stencil::five_point);
    worst = std::max(worst, rep.max_rel_error);
  };
  check(&ScanInstance::u, nullptr, nullptr, g.u);
  check(nullptr, &ssm::ScanParams::A, nullptr, g.A);
  check(nullptr, &ssm::ScanParams::B, nullptr, g.B);
  check(nullptr, &ssm::ScanParams::C, nullptr, g.C);
  check(nullptr, &ssm::ScanParams::D, nullptr, g.D);
  check(nullptr, &ssm::ScanParams::delta, nullptr, g.delta);
  check(nullptr, nullptr, &ssm::ScanState::h, g.h0);
  return worst;
}

/// Micro network used by the end-to-end check: C=4, two state dims, 8x8 tiles.
inline net::NetworkConfig micro_config(std::uint64_t seed) {
  net::NetworkConfig c;
  c.c_feat = 4;
  c.n_state = 2;
  c.tile = 8;
  c.seed = seed;
  return c;
}

struct NetworkCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;
};

/// Compares parameter gradients with central differences of the training loss
/// on a random `fraction` of coordinates (at least one per tensor). Runs once
/// with the memory initialized inside the pass and once with a frozen memory.
inline NetworkCheck network_gradcheck(const net::NetworkConfig& cfg, double fraction,
                                      std::uint64_t seed, double step = 1e-6) {
  const auto params = net::init_params(cfg);
  const auto s = synth::make_dataset({cfg.n_cls, cfg.tile, 0.08}, 1, seed).front();
  const auto first = net::loss_and_grads(params, cfg, s.image, s.labels, std::nullopt);
  const std::optional<apem::ClassPrototypeMemory> frozen{apem::ClassPrototypeMemory{first.memory}};
  std::mt19937_64 rng(seed);
  NetworkCheck out;
  for (const auto& memory : {std::optional<apem::ClassPrototypeMemory>{}, frozen}) {
    const auto lg = net::loss_and_grads(params, cfg, s.image, s.labels, memory);
    for (const auto& [name, t] : params) {
      std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
      const auto n = std::max<std::size_t>(
          1, static_cast<std::size_t>(fraction * static_cast<double>(t.size())));
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = pick(rng);
        ParamStore p = params;
        p[name][i] += step;
        const double fp = net::training_loss(p, cfg, s.image, s.labels, memory);
        p[name][i] -= 2.0 * step;
        const double fm = net::training_loss(p, cfg, s.image, s.labels, memory);
        const auto it = lg.grads.find(name);
        const double a = it == lg.grads.end() ? 0.0 : it->second[i];
        const double e = relative_error(a, (fp - fm) / (2.0 * step), 1e-6);
        ++out.coordinates;
        if (e > out.max_rel_error) {
          out.max_rel_error = e;
          out.worst = name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return out;
}

}  // namespace pdss::checks
