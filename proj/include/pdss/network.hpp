#pragma once

// End-to-end toy-scale network: encoder -> fusion -> prototype memory ->
// spatial modulation -> SSCM -> (memory update | CSAM -> head).

#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "pdss/apem.hpp"
#include "pdss/autograd.hpp"
#include "pdss/csam.hpp"
#include "pdss/eval.hpp"
#include "pdss/params.hpp"
#include "pdss/sscm.hpp"
#include "pdss/tensor_io.hpp"

namespace pdss::net {

struct NetworkConfig {
  std::size_t n_cls = 3;
  std::size_t c_feat = 16;
  std::size_t n_state = 8;
  std::size_t tile = 32;
  std::size_t in_channels = 3;
  bool simstep = true;
  bool seed_structural = true;
  bool use_ce = true;
  bool use_dice = true;
  double beta = apem::kDefaultBeta;
  double lr = 0.1;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  /// Encoder stage widths C, 2C, 4C, 8C.
  std::array<std::size_t, 4> encoder_widths() const {
    return {c_feat, 2 * c_feat, 4 * c_feat, 8 * c_feat};
  }

  void validate() const {
    require(n_cls >= 1 && c_feat >= 1 && n_state >= 1 && tile >= 1 && in_channels >= 1,
            "config: all extents must be >= 1");
    require(beta >= 0.0 && beta <= 1.0, "config: beta must be in [0,1]");
    require(lr > 0.0, "config: lr must be positive");
    require(tile % 8 == 0, "config: tile must be divisible by 8");
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"n_cls", c.n_cls},     {"c_feat", c.c_feat},
       {"n_state", c.n_state}, {"tile", c.tile},
       {"in_channels", c.in_channels},
       {"encoder_widths", c.encoder_widths()},
       {"simstep", c.simstep}, {"seed_structural", c.seed_structural},
       {"use_ce", c.use_ce},   {"use_dice", c.use_dice},
       {"beta", c.beta},       {"lr", c.lr},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},       {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) j.at(k).get_to(field);
  };
  get("n_cls", c.n_cls);
  get("c_feat", c.c_feat);
  get("n_state", c.n_state);
  get("tile", c.tile);
  get("in_channels", c.in_channels);
  get("simstep", c.simstep);
  get("seed_structural", c.seed_structural);
  get("use_ce", c.use_ce);
  get("use_dice", c.use_dice);
  get("beta", c.beta);
  get("lr", c.lr);
  get("clip_norm", c.clip_norm);
  get("seed", c.seed);
  get("threads", c.threads);
}

inline ParamStore init_params(const NetworkConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto w = cfg.encoder_widths();
  const std::size_t C = cfg.c_feat, N = cfg.n_cls, S = cfg.n_state;
  ParamStore s;
  std::size_t cin = cfg.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "enc.s" + std::to_string(i + 1);
    s[p + ".w"] = init::conv_kernel(w[i], cin, 3, rng);
    s[p + ".b"] = Tensor({w[i]});
    cin = w[i];
  }
  for (std::size_t i = 1; i < 4; ++i) {
    const std::string p = "fuse.x" + std::to_string(i + 1);
    s[p + ".w"] = init::conv_kernel(C, w[i], 1, rng, 1.0);
    s[p + ".b"] = Tensor({C});
  }
  s["apem.q.w"] = init::conv_kernel(C, 3 * C, 1, rng, 1.0);
  s["apem.q.b"] = Tensor({C});
  s["apem.conf.w"] = init::conv_kernel(N, C, 1, rng, 1.0);
  s["apem.conf.b"] = Tensor({N});
  s["apem.proj.w"] = init::conv_kernel(C, N * C, 1, rng, 1.0);
  s["apem.proj.b"] = Tensor({C});
  sscm::init_params(s, "sscm", C, S, rng);
  csam::init_params(s, "csam", C, S, rng);
  s["head.w"] = init::conv_kernel(N, C, 1, rng, 1.0);
  s["head.b"] = Tensor({N});
  return s;
}

struct Encoded {
  ad::Var x1, x2, x3, x4;
};

/// Four 3x3 conv + SiLU stages; the first keeps resolution, the others halve it.
inline Encoded toy_encoder(ParamBinder& P, ad::Var image) {
  const auto& sh = image.shape();
  require(sh.size() == 3, "toy_encoder: image must be [3,h,w]");
  require(sh[1] % 8 == 0 && sh[2] % 8 == 0,
          "toy_encoder: image extents must be divisible by 8, got " + shape_str(sh));
  std::array<ad::Var, 4> x;
  ad::Var cur = image;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "enc.s" + std::to_string(i + 1);
    cur = ad::silu(ad::conv2d(cur, P(p + ".w"), P(p + ".b"), i == 0 ? 1 : 2, 1));
    x[i] = cur;
  }
  return {x[0], x[1], x[2], x[3]};
}

/// Cat(conv1x1(resize(x2)), conv1x1(resize(x3)), conv1x1(resize(x4))) at x1's size.
inline ad::Var feature_fusion(ParamBinder& P, const Encoded& e) {
  const std::size_t H = e.x1.shape()[1], W = e.x1.shape()[2];
  std::vector<ad::Var> parts;
  const std::array<ad::Var, 3> xs{e.x2, e.x3, e.x4};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "fuse.x" + std::to_string(i + 2);
    parts.push_back(ad::conv2d(ad::resize(xs[i], H, W), P(p + ".w"), P(p + ".b")));
  }
  return ad::concat(parts);
}

enum class Mode { train, infer };

struct ForwardTrace {
  Tensor ff, memory, pos, structure, uf, csam_out, logits;
  sscm::Trace sscm;
  csam::Trace csam;
};

struct ForwardResult {
  ad::Var logits;  // [N_cls, h, w]
  ad::Var uf;
  std::optional<apem::OneHotLabels> onehot_feat;  // labels at feature resolution
  std::optional<apem::OneHotLabels> onehot_full;  // labels at input resolution
  bool memory_initialized_here = false;
  ad::Var memory;
};

/// Training mode needs labels. If `memory` is empty in training mode the
/// prototypes are initialized from the fused features of this sample (and are
/// differentiable); otherwise the stored memory is used as a constant.
inline ForwardResult pdssnet_forward(ParamBinder& P, const NetworkConfig& cfg,
                                     const Tensor& image, const Tensor* labels,
                                     const std::optional<apem::ClassPrototypeMemory>& memory,
                                     Mode mode, ForwardTrace* trace = nullptr) {
  require(image.rank() == 3 && image.dim(0) == cfg.in_channels,
          "pdssnet_forward: image must be [" + std::to_string(cfg.in_channels) + ",h,w]");
  if (mode == Mode::train)
    require(labels != nullptr, "pdssnet_forward: training mode requires labels");
  else
    require(memory.has_value(), "pdssnet_forward: inference requires a frozen prototype memory");
  auto& tape = P.tape();
  ForwardResult r;
  const auto img = tape.constant(image);
  const auto enc = toy_encoder(P, img);
  const std::size_t H = enc.x1.shape()[1], W = enc.x1.shape()[2];

  if (labels) {
    r.onehot_full = apem::one_hot_encode(*labels, cfg.n_cls);
    r.onehot_feat = apem::resize_one_hot(*r.onehot_full, H, W);
  }

  std::optional<ad::Var> ff;
  if (memory) {
    r.memory = tape.constant(memory->m);
  } else {
    ff = feature_fusion(P, enc);
    const auto q = ad::l2_normalize_channels(ad::conv2d(*ff, P("apem.q.w"), P("apem.q.b")));
    r.memory = ad::masked_mean(q, *r.onehot_feat);
    r.memory_initialized_here = true;
  }

  const auto conf = ad::sigmoid(ad::conv2d(enc.x1, P("apem.conf.w"), P("apem.conf.b")));
  const auto pos = ad::spatial_modulation(r.memory, conf);
  const sscm::Options sopt{cfg.seed_structural, cfg.threads};
  r.uf = sscm::sscm_forward(P, "sscm", "apem.proj", pos, enc.x1, sopt,
                            trace ? &trace->sscm : nullptr);
  const csam::Options copt{cfg.simstep, ssm::SimStepMode::two_pass, cfg.threads};
  const auto feats = csam::csam_forward(P, "csam", r.uf, copt, trace ? &trace->csam : nullptr);
  auto logits = ad::conv2d(feats, P("head.w"), P("head.b"));
  r.logits = ad::resize(logits, image.dim(1), image.dim(2));

  if (trace) {
    if (ff) trace->ff = ff->value();
    trace->memory = r.memory.value();
    trace->pos = pos.value();
    trace->structure = trace->sscm.structure;
    trace->uf = r.uf.value();
    trace->csam_out = feats.value();
    trace->logits = r.logits.value();
  }
  return r;
}

struct TrainState {
  ParamStore params;
  std::optional<apem::ClassPrototypeMemory> memory;
  std::size_t step = 0;
};

struct StepReport {
  eval::CombinedLoss loss;
  double grad_norm = 0.0;
};

struct LossGrads {
  eval::CombinedLoss loss;
  ParamStore grads;
  Tensor memory;  // prototypes used by this forward pass
  Tensor uf;      // enhanced features
  apem::OneHotLabels onehot_feat;
};

/// Loss and parameter gradients for one labelled sample, without updating.
inline LossGrads loss_and_grads(const ParamStore& params, const NetworkConfig& cfg,
                                const Tensor& image, const Tensor& labels,
                                const std::optional<apem::ClassPrototypeMemory>& memory) {
  ad::Tape tape;
  ParamBinder P(tape, params, true);
  auto fr = pdssnet_forward(P, cfg, image, &labels, memory, Mode::train);
  LossGrads out;
  const auto loss = ad::segmentation_loss(ad::softmax_channels(fr.logits), *fr.onehot_full,
                                          {cfg.use_ce, cfg.use_dice}, &out.loss);
  if (!std::isfinite(out.loss.total))
    throw Error(ErrorKind::numeric, "non-finite loss (ce=" + std::to_string(out.loss.ce) +
                                        ", dice=" + std::to_string(out.loss.dice) + ")");
  tape.backward(loss);
  out.grads = P.gradients();
  out.memory = fr.memory.value();
  out.uf = fr.uf.value();
  out.onehot_feat = *fr.onehot_feat;
  return out;
}

/// Scalar training loss, for finite-difference checks.
inline double training_loss(const ParamStore& params, const NetworkConfig& cfg,
                            const Tensor& image, const Tensor& labels,
                            const std::optional<apem::ClassPrototypeMemory>& memory) {
  ad::Tape tape;
  ParamBinder P(tape, params, false);
  auto fr = pdssnet_forward(P, cfg, image, &labels, memory, Mode::train);
  return eval::combined_loss(ad::softmax_channels(fr.logits).value(), *fr.onehot_full,
                             {cfg.use_ce, cfg.use_dice})
      .total;
}

/// One step of plain gradient descent with global-norm clipping, followed by
/// the prototype EMA update from the enhanced features.
inline StepReport train_step(TrainState& st, const NetworkConfig& cfg, const Tensor& image,
                             const Tensor& labels) {
  auto lg = loss_and_grads(st.params, cfg, image, labels, st.memory);
  const auto& grads = lg.grads;
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (auto v : g.vec()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error(ErrorKind::numeric, "non-finite gradient norm");
  const double scale = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
  for (auto& [name, p] : st.params) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * scale * it->second[i];
  }
  // Memory commit: between SSCM output and CSAM consumption, once per step.
  st.memory = apem::update_prototypes({lg.memory}, lg.uf, lg.onehot_feat, cfg.beta);
  ++st.step;
  return {lg.loss, norm};
}

/// Inference logits [N_cls, h, w] against a frozen memory.
inline Tensor infer_logits(const ParamStore& params, const NetworkConfig& cfg,
                           const Tensor& image, const apem::ClassPrototypeMemory& memory,
                           ForwardTrace* trace = nullptr) {
  ad::Tape tape;
  ParamBinder P(tape, params, false);
  return pdssnet_forward(P, cfg, image, nullptr, memory, Mode::infer, trace).logits.value();
}

inline Tensor argmax_labels(const Tensor& logits) {
  const std::size_t N = logits.dim(0), H = logits.dim(1), W = logits.dim(2), plane = H * W;
  Tensor out({H, W});
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < N; ++k)
      if (logits[k * plane + p] > logits[best * plane + p]) best = k;
    out[p] = static_cast<double>(best);
  }
  return out;
}

// ------------------------------------------------------------ checkpoints

inline constexpr const char* kMemoryTensorName = "apem.memory";

/// Writes manifest.json plus one fixture file per tensor under `dir`.
inline void save_checkpoint(const std::filesystem::path& dir, const NetworkConfig& cfg,
                            const TrainState& st) {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json tensors = nlohmann::json::object();
  auto put = [&](const std::string& name, const Tensor& t) {
    const std::string rel = "tensors/" + name + ".pdst";
    write_tensor_file(t, dir / rel);
    tensors[name] = rel;
  };
  for (const auto& [name, t] : st.params) put(name, t);
  if (st.memory) put(kMemoryTensorName, st.memory->m);
  nlohmann::json manifest = {{"format", "pdss-checkpoint"},
                             {"version", 1},
                             {"step", st.step},
                             {"config", cfg},
                             {"tensors", tensors}};
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw Error(ErrorKind::io, "cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << "\n";
}

struct Checkpoint {
  NetworkConfig cfg;
  TrainState state;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, "malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_json_file(dir / "manifest.json");
  Checkpoint ck;
  try {
    ck.cfg = manifest.at("config").get<NetworkConfig>();
    ck.state.step = manifest.value("step", std::size_t{0});
    for (const auto& [name, rel] : manifest.at("tensors").items()) {
      auto t = read_tensor_file(dir / rel.get<std::string>());
      if (name == kMemoryTensorName)
        ck.state.memory = apem::ClassPrototypeMemory{std::move(t)};
      else
        ck.state.params.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, "malformed checkpoint manifest: " + std::string(e.what()));
  }
  return ck;
}

}  // namespace pdss::net
