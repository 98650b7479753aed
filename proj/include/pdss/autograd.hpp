#pragma once

// Minimal tape-based reverse-mode differentiation over Tensor values.
// Every op evaluates eagerly and records a closure that maps the gradient of
// its output onto its inputs. Tape::backward replays closures newest-first.

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "pdss/apem.hpp"
#include "pdss/eval.hpp"
#include "pdss/grid.hpp"
#include "pdss/scan_geometry.hpp"
#include "pdss/sobel.hpp"
#include "pdss/ssm.hpp"
#include "pdss/tensor.hpp"

namespace pdss::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor&)>;

  Var leaf(Tensor v, bool requires_grad = false) {
    nodes_.push_back({std::move(v), Tensor(), requires_grad, nullptr});
    return {this, nodes_.size() - 1};
  }
  Var constant(Tensor v) { return leaf(std::move(v), false); }

  /// Records an op output. The closure is kept only if some input needs grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward bw) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in.valid() && needs_grad(in));
    nodes_.push_back({std::move(value), Tensor(), needs, needs ? std::move(bw) : nullptr});
    return {this, nodes_.size() - 1};
  }
  Var record(Tensor value, const std::vector<Var>& inputs, Backward bw) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || needs_grad(in);
    nodes_.push_back({std::move(value), Tensor(), needs, needs ? std::move(bw) : nullptr});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(const Var& v) const { return nodes_[v.id()].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

  /// Accumulated gradient; an empty tensor when nothing reached this node.
  const Tensor& grad(const Var& v) const { return nodes_[v.id()].grad; }

  void accumulate(const Var& v, const Tensor& g) {
    auto& n = nodes_[v.id()];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0 && n.grad.shape() != n.value.shape())
      n.grad = g;
    else
      n.grad += g;
  }

  /// Ensures a (zero) gradient exists so the node's closure will run.
  void touch(const Var& v) {
    auto& n = nodes_[v.id()];
    if (n.needs_grad && n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  }

  void backward(const Var& root) {
    require(value(root).size() == 1, "backward: root must be a scalar");
    nodes_[root.id()].grad = Tensor(value(root).shape(), 1.0);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.shape() != n.value.shape()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------- pointwise

inline Var add(Var a, Var b) {
  Tensor out = a.value();
  out += b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var mul(Var a, Var b) {
  require(a.shape() == b.shape(), "ad::mul: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] *= b.value()[i];
      gb[i] *= a.value()[i];
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  out *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor ga = g;
    ga *= s;
    t.accumulate(a, ga);
  });
}

namespace detail {

// f gives the value, df the derivative as a function of (x, f(x)).
template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = f(v);
  Tensor y = out;
  return a.tape().record(std::move(out), {a},
                         [a, y = std::move(y), df](Tape& t, const Tensor& g) {
                           Tensor ga = g;
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] *= df(a.value()[i], y[i]);
                           t.accumulate(a, ga);
                         });
}

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

}  // namespace detail

inline Var sigmoid(Var a) {
  return detail::unary(a, [](double x) { return ssm::sigmoid(x); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var silu(Var a) {
  return detail::unary(
      a, [](double x) { return x * ssm::sigmoid(x); },
      [](double x, double) {
        const double s = ssm::sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Var softplus(Var a) {
  return detail::unary(a, detail::softplus,
                       [](double x, double) { return ssm::sigmoid(x); });
}

/// -exp(x): the parameterization that keeps continuous decays negative.
inline Var neg_exp(Var a) {
  return detail::unary(a, [](double x) { return -std::exp(x); },
                       [](double, double y) { return y; });
}

inline Var reshape(Var a, Shape s) {
  Tensor out = a.value().reshaped(s);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, g.reshaped(a.shape()));
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (auto v : a.value().vec()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, Tensor(a.shape(), g.item()));
  });
}

/// <a, w> for a constant weight tensor w.
inline Var weighted_sum(Var a, const Tensor& w) {
  require(a.shape() == w.shape(), "ad::weighted_sum: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  return a.tape().record(Tensor::scalar(s), {a}, [a, w](Tape& t, const Tensor& g) {
    Tensor ga = w;
    ga *= g.item();
    t.accumulate(a, ga);
  });
}

// ------------------------------------------------------------ image ops

inline Var conv2d(Var x, Var w, std::optional<Var> b, std::size_t stride = 1,
                  std::size_t pad = 0) {
  Tensor out = pdss::conv2d(x.value(), w.value(), b ? b->value() : Tensor(), stride, pad);
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  return x.tape().record(std::move(out), inputs,
                         [x, w, b, stride, pad](Tape& t, const Tensor& g) {
                           auto gr = conv2d_backward(x.value(), w.value(), b.has_value(),
                                                     g, stride, pad);
                           t.accumulate(x, gr.input);
                           t.accumulate(w, gr.kernel);
                           if (b) t.accumulate(*b, gr.bias);
                         });
}

inline Var resize(Var x, std::size_t h, std::size_t w) {
  Tensor out = bilinear_resize(x.value(), h, w);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, bilinear_resize_backward(g, x.shape()[1], x.shape()[2]));
  });
}

inline Var concat(const std::vector<Var>& parts) {
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p.value());
  Tensor out = concat_channels(vals);
  return parts.at(0).tape().record(std::move(out), parts,
                                   [parts](Tape& t, const Tensor& g) {
                                     std::size_t c0 = 0;
                                     for (const auto& p : parts) {
                                       const std::size_t c = p.shape()[0];
                                       t.accumulate(p, slice_channels(g, c0, c));
                                       c0 += c;
                                     }
                                   });
}

/// Per-pixel layer normalization across channels of a [C,H,W] map.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t C = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "ad::layer_norm: gamma/beta must be [C]");
  Tensor xhat(xv.shape()), out(xv.shape());
  std::vector<double> rstd(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += xv[c * plane + p];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = xv[c * plane + p] - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    rstd[p] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = c * plane + p;
      xhat[i] = (xv[i] - mu) * rstd[p];
      out[i] = gamma.value()[c] * xhat[i] + beta.value()[c];
    }
  }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), C,
       plane](Tape& t, const Tensor& g) {
        Tensor gx(x.shape()), gg({C}), gb({C});
        for (std::size_t p = 0; p < plane; ++p) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = c * plane + p;
            const double dxh = g[i] * gamma.value()[c];
            m1 += dxh;
            m2 += dxh * xhat[i];
            gg[c] += g[i] * xhat[i];
            gb[c] += g[i];
          }
          m1 /= static_cast<double>(C);
          m2 /= static_cast<double>(C);
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = c * plane + p;
            const double dxh = g[i] * gamma.value()[c];
            gx[i] = rstd[p] * (dxh - m1 - xhat[i] * m2);
          }
        }
        t.accumulate(x, gx);
        t.accumulate(gamma, gg);
        t.accumulate(beta, gb);
      });
}

/// Per-pixel l2 normalization across channels; fibers below eps pass through.
inline Var l2_normalize_channels(Var x, double eps = apem::kFeatureNormEps) {
  Tensor out = l2_normalize(x.value(), 0, eps);
  Tensor y = out;
  return x.tape().record(std::move(out), {x}, [x, y = std::move(y), eps](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const std::size_t C = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
    Tensor gx = g;
    for (std::size_t p = 0; p < plane; ++p) {
      double sq = 0.0, yg = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        sq += xv[c * plane + p] * xv[c * plane + p];
        yg += y[c * plane + p] * g[c * plane + p];
      }
      const double norm = std::sqrt(sq);
      if (norm < eps) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i = c * plane + p;
        gx[i] = (g[i] - y[i] * yg) / norm;
      }
    }
    t.accumulate(x, gx);
  });
}

inline Var sobel(Var x) {
  auto resp = std::make_shared<SobelResponse>(sobel_response(x.value()));
  Tensor out = resp->magnitude;
  return x.tape().record(std::move(out), {x}, [x, resp](Tape& t, const Tensor& g) {
    t.accumulate(x, sobel_structure_backward(x.value(), *resp, g));
  });
}

/// Softmax across channels at every pixel.
inline Var softmax_channels(Var x) {
  const Tensor& xv = x.value();
  const std::size_t C = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
  Tensor out(xv.shape());
  for (std::size_t p = 0; p < plane; ++p) {
    double mx = xv[p];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xv[c * plane + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out[c * plane + p] = std::exp(xv[c * plane + p] - mx);
      z += out[c * plane + p];
    }
    for (std::size_t c = 0; c < C; ++c) out[c * plane + p] /= z;
  }
  Tensor y = out;
  return x.tape().record(std::move(out), {x}, [x, y = std::move(y), C, plane](Tape& t, const Tensor& g) {
    Tensor gx(y.shape());
    for (std::size_t p = 0; p < plane; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += g[c * plane + p] * y[c * plane + p];
      for (std::size_t c = 0; c < C; ++c)
        gx[c * plane + p] = y[c * plane + p] * (g[c * plane + p] - dot);
    }
    t.accumulate(x, gx);
  });
}

// ------------------------------------------------------- prototype ops

/// Masked-mean prototypes [N,C] of features q [C,H,W] under labels l.
inline Var masked_mean(Var q, const apem::OneHotLabels& l) {
  const auto ms = apem::masked_sums(q.value(), l);
  const std::size_t N = l.n_cls(), C = q.shape()[0];
  Tensor out = ms.sums;
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t c = 0; c < C; ++c)
      out.at(k, c) = ms.mass[k] > 0.0 ? ms.sums.at(k, c) / ms.mass[k] : 0.0;
  return q.tape().record(std::move(out), {q}, [q, l, mass = ms.mass](Tape& t, const Tensor& g) {
    const std::size_t C = q.shape()[0], plane = q.value().size() / C, N = mass.size();
    Tensor gq(q.shape());
    for (std::size_t k = 0; k < N; ++k) {
      if (mass[k] <= 0.0) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const double s = g.at(k, c) / mass[k];
        if (s == 0.0) continue;
        for (std::size_t p = 0; p < plane; ++p) gq[c * plane + p] += s * l.l[k * plane + p];
      }
    }
    t.accumulate(q, gq);
  });
}

/// pos[n*C + c, p] = conf[n, p] * mem[n, c].
inline Var spatial_modulation(Var mem, Var conf) {
  const Tensor& m = mem.value();
  const Tensor& w = conf.value();
  const std::size_t N = m.dim(0), C = m.dim(1), H = w.dim(1), W = w.dim(2), plane = H * W;
  require(w.dim(0) == N, "ad::spatial_modulation: confidence channels != N_cls");
  Tensor out({N * C, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        out[(n * C + c) * plane + p] = w[n * plane + p] * m.at(n, c);
  return mem.tape().record(std::move(out), {mem, conf}, [mem, conf, N, C, plane](Tape& t, const Tensor& g) {
    Tensor gm(mem.shape()), gw(conf.shape());
    const Tensor& m = mem.value();
    const Tensor& w = conf.value();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        const double mv = m.at(n, c);
        for (std::size_t p = 0; p < plane; ++p) {
          const double gi = g[(n * C + c) * plane + p];
          acc += gi * w[n * plane + p];
          gw[n * plane + p] += gi * mv;
        }
        gm.at(n, c) = acc;
      }
    t.accumulate(mem, gm);
    t.accumulate(conf, gw);
  });
}

// ------------------------------------------------------ sequence ops

inline Var serialize(Var x, ScanDirection dir) {
  auto s = serialize_2d(x.value(), dir);
  return x.tape().record(std::move(s.values), {x}, [x, dir](Tape& t, const Tensor& g) {
    t.accumulate(x, deserialize_2d({g, dir, x.shape()[1], x.shape()[2]}));
  });
}

inline Var deserialize(Var seq, ScanDirection dir, std::size_t h, std::size_t w) {
  Tensor out = deserialize_2d({seq.value(), dir, h, w});
  return seq.tape().record(std::move(out), {seq}, [seq, dir](Tape& t, const Tensor& g) {
    t.accumulate(seq, serialize_2d(g, dir).values);
  });
}

/// Reverses the order of the leading axis.
inline Var reverse_rows(Var x) {
  const Tensor& v = x.value();
  const std::size_t rows = v.dim(0), stride = v.size() / std::max<std::size_t>(rows, 1);
  auto flip = [rows, stride](const Tensor& in) {
    Tensor out(in.shape());
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(&in[r * stride], stride, &out[(rows - 1 - r) * stride]);
    return out;
  };
  return x.tape().record(flip(v), {x}, [x, flip](Tape& t, const Tensor& g) {
    t.accumulate(x, flip(g));
  });
}

/// y[l, o] = sum_i x[l, i] * W[o, i] (+ b[o]).
inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const std::size_t L = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
  require(wv.dim(1) == I, "ad::linear: weight expects " + std::to_string(wv.dim(1)) +
                              " inputs, got " + std::to_string(I));
  Tensor out({L, O});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = b ? b->value()[o] : 0.0;
      for (std::size_t i = 0; i < I; ++i) acc += xv[l * I + i] * wv[o * I + i];
      out[l * O + o] = acc;
    }
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  return x.tape().record(std::move(out), inputs, [x, w, b, L, I, O](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    Tensor gx(x.shape()), gw(w.shape()), gb({O});
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t o = 0; o < O; ++o) {
        const double gi = g[l * O + o];
        if (gi == 0.0) continue;
        gb[o] += gi;
        for (std::size_t i = 0; i < I; ++i) {
          gx[l * I + i] += gi * wv[o * I + i];
          gw[o * I + i] += gi * xv[l * I + i];
        }
      }
    t.accumulate(x, gx);
    t.accumulate(w, gw);
    if (b) t.accumulate(*b, gb);
  });
}

/// [L, N] -> [L, D, N], repeating each row across D channels.
inline Var expand_channels(Var x, std::size_t D) {
  const Tensor& v = x.value();
  const std::size_t L = v.dim(0), N = v.dim(1);
  Tensor out({L, D, N});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t d = 0; d < D; ++d) std::copy_n(&v[l * N], N, &out[(l * D + d) * N]);
  return x.tape().record(std::move(out), {x}, [x, L, D, N](Tape& t, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t n = 0; n < N; ++n) gx[l * N + n] += g[(l * D + d) * N + n];
    t.accumulate(x, gx);
  });
}

/// [K] -> [count, K].
inline Var tile_rows(Var x, std::size_t count) {
  const std::size_t K = x.value().size();
  Tensor out({count, K});
  for (std::size_t r = 0; r < count; ++r) std::copy_n(x.value().data().data(), K, &out[r * K]);
  return x.tape().record(std::move(out), {x}, [x, count, K](Tape& t, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t k = 0; k < K; ++k) gx[k] += g[r * K + k];
    t.accumulate(x, gx);
  });
}

/// y[l, p] = w[l] * u[l, p] + b[l].
inline Var row_affine(Var u, Var w, Var b) {
  const Tensor& uv = u.value();
  const std::size_t L = uv.dim(0), P = uv.dim(1);
  require(w.value().size() == L && b.value().size() == L, "ad::row_affine: need one (w, b) per row");
  Tensor out(uv.shape());
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t p = 0; p < P; ++p) out[l * P + p] = w.value()[l] * uv[l * P + p] + b.value()[l];
  return u.tape().record(std::move(out), {u, w, b}, [u, w, b, L, P](Tape& t, const Tensor& g) {
    Tensor gu(u.shape()), gw(w.shape()), gb(b.shape());
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t p = 0; p < P; ++p) {
        const double gi = g[l * P + p];
        gu[l * P + p] = gi * w.value()[l];
        gw[l] += gi * u.value()[l * P + p];
        gb[l] += gi;
      }
    t.accumulate(u, gu);
    t.accumulate(w, gw);
    t.accumulate(b, gb);
  });
}

// ---------------------------------------------------------- scans

struct ScanVars {
  Var y, h_all, h_final;
};

/// Selective scan with per-step B and C ([L,D,N]). All seven inputs are
/// differentiable, including the initial state.
inline ScanVars selective_scan(Var u, Var delta, Var A, Var B, Var C, Var D, Var h0,
                               ssm::Discretization disc = ssm::Discretization::taylor,
                               std::size_t threads = 1) {
  struct Aux {
    ssm::ScanParams p;
    ssm::ScanState h0;
    ssm::ScanResult fwd;
    Tensor g_hall, g_hfinal;
  };
  auto aux = std::make_shared<Aux>();
  aux->p = {A.value(), B.value(), C.value(), D.value(), delta.value(), disc};
  aux->h0 = {h0.value(), 0};
  aux->fwd = ssm::selective_scan_seq(aux->p, u.value(), aux->h0,
                                     {.checked = false, .threads = threads});
  Tape& tape = u.tape();
  Var y = tape.record(aux->fwd.y, {u, delta, A, B, C, D, h0},
                      [u, delta, A, B, C, D, h0, aux](Tape& t, const Tensor& gy) {
                        auto g = ssm::scan_backward(aux->p, u.value(), aux->h0, aux->fwd,
                                                    {gy, aux->g_hall, aux->g_hfinal});
                        t.accumulate(u, g.u);
                        t.accumulate(delta, g.delta);
                        t.accumulate(A, g.A);
                        t.accumulate(B, g.B);
                        t.accumulate(C, g.C);
                        t.accumulate(D, g.D);
                        t.accumulate(h0, g.h0);
                      });
  Var h_all = tape.record(aux->fwd.h_all, {y}, [y, aux](Tape& t, const Tensor& g) {
    aux->g_hall = g;
    t.touch(y);
  });
  Var h_final = tape.record(aux->fwd.h_final.h, {y}, [y, aux](Tape& t, const Tensor& g) {
    aux->g_hfinal = g;
    t.touch(y);
  });
  return {y, h_all, h_final};
}

/// Modulated steps delta * (1 + m), m = Sigmoid(ReLU(w_s * s + b_s)), where s
/// is the cosine between B[t,d,:] * u[t,d] and the cached state before step t.
/// `gate_out`, when given, receives m.
inline Var simstep_delta(Var delta, Var B, Var u, Var h_all, Var h0, Var w_s, Var b_s,
                         Tensor* gate_out = nullptr) {
  const Tensor& dv = delta.value();
  const std::size_t L = dv.dim(0), Dc = dv.dim(1), N = B.shape()[2];
  const double ws = w_s.value().item(), bs = b_s.value().item();
  Tensor s({L, Dc}), z({L, Dc}), m({L, Dc}), out({L, Dc});
  std::vector<double> bu(N);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < Dc; ++d) {
      const std::size_t td = t * Dc + d;
      for (std::size_t n = 0; n < N; ++n) bu[n] = B.value()[td * N + n] * u.value()[td];
      const double* hp = t == 0 ? &h0.value()[d * N] : &h_all.value()[(td - Dc) * N];
      s[td] = ssm::cosine_state_similarity<double>(bu, std::span<const double>(hp, N),
                                                  ssm::kSimilarityEps);
      z[td] = ws * s[td] + bs;
      m[td] = ssm::sigmoid(std::max(0.0, z[td]));
      out[td] = dv[td] * (1.0 + m[td]);
    }
  if (gate_out) *gate_out = m;
  return delta.tape().record(
      std::move(out), {delta, B, u, h_all, h0, w_s, b_s},
      [delta, B, u, h_all, h0, w_s, b_s, s, z, m, L, Dc, N](Tape& t, const Tensor& g) {
        const double ws = w_s.value().item();
        Tensor gd(delta.shape()), gB(B.shape()), gu(u.shape()), gh(h_all.shape()),
            gh0(h0.shape());
        double gws = 0.0, gbs = 0.0;
        std::vector<double> a(N);
        for (std::size_t tt = 0; tt < L; ++tt)
          for (std::size_t d = 0; d < Dc; ++d) {
            const std::size_t td = tt * Dc + d;
            gd[td] = g[td] * (1.0 + m[td]);
            if (z[td] <= 0.0) continue;
            const double gz = g[td] * delta.value()[td] * m[td] * (1.0 - m[td]);
            gws += gz * s[td];
            gbs += gz;
            const double gs = gz * ws;
            const double uv = u.value()[td];
            const double* Bv = &B.value()[td * N];
            const double* hp = tt == 0 ? &h0.value()[d * N] : &h_all.value()[(td - Dc) * N];
            double na = 0.0, nb = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              a[n] = Bv[n] * uv;
              na += a[n] * a[n];
              nb += hp[n] * hp[n];
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            if (na < ssm::kSimilarityEps || nb < ssm::kSimilarityEps) continue;
            double* ghp = tt == 0 ? &gh0[d * N] : &gh[(td - Dc) * N];
            double gu_acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              const double da = hp[n] / (na * nb) - s[td] * a[n] / (na * na);
              const double db = a[n] / (na * nb) - s[td] * hp[n] / (nb * nb);
              const double ga = gs * da;
              gB[td * N + n] += ga * uv;
              gu_acc += ga * Bv[n];
              ghp[n] += gs * db;
            }
            gu[td] += gu_acc;
          }
        t.accumulate(delta, gd);
        t.accumulate(B, gB);
        t.accumulate(u, gu);
        t.accumulate(h_all, gh);
        t.accumulate(h0, gh0);
        t.accumulate(w_s, Tensor(w_s.shape(), gws));
        t.accumulate(b_s, Tensor(b_s.shape(), gbs));
      });
}

// ------------------------------------------------------------ losses

/// Combined cross-entropy + Dice on softmax probabilities, as a scalar node.
/// `terms` switches either component off.
inline Var segmentation_loss(Var probs, const apem::OneHotLabels& y,
                             eval::LossTerms terms, eval::CombinedLoss* parts = nullptr) {
  const auto v = eval::combined_loss(probs.value(), y, terms);
  if (parts) *parts = v;
  return probs.tape().record(Tensor::scalar(v.total), {probs}, [probs, y, terms](Tape& t, const Tensor& g) {
    Tensor gp(probs.shape());
    if (terms.use_ce) gp += eval::cross_entropy_grad(probs.value(), y);
    if (terms.use_dice) gp += eval::dice_grad(probs.value(), y);
    gp *= g.item();
    t.accumulate(probs, gp);
  });
}

}  // namespace pdss::ad
