// pdss: batch entry point. Exit codes: 0 ok, 2 validation, 3 I/O, 4 numeric.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pdss/checks.hpp"
#include "pdss/pdss.hpp"

namespace fs = std::filesystem;
using namespace pdss;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kValidation = 2, kIo = 3, kNumeric = 4 };

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::validation: return kValidation;
    case ErrorKind::io: return kIo;
    case ErrorKind::numeric: return kNumeric;
  }
  return kValidation;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::io, "cannot write " + p.string());
  f << text;
  if (!f) throw Error(ErrorKind::io, "write failed: " + p.string());
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + p.string() + ": " + ec.message());
}

std::string tile_name(std::size_t i) {
  std::ostringstream s;
  s << "tile_" << std::setw(4) << std::setfill('0') << i;
  return s.str();
}

// ------------------------------------------------------------ fixtures

struct Fixtures {
  std::vector<synth::Sample> samples;
  std::size_t n_cls = 0;
};

json write_fixtures(const fs::path& out, const std::vector<synth::Sample>& data,
                    std::size_t n_cls, std::uint64_t seed) {
  make_dir(out / "images");
  make_dir(out / "labels");
  std::vector<std::uint64_t> hist(n_cls, 0);
  json tiles = json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto name = tile_name(i);
    write_tensor_file(data[i].image, out / "images" / (name + ".pdst"));
    write_tensor_file(data[i].labels, out / "labels" / (name + ".pdst"));
    for (auto v : data[i].labels.vec()) ++hist[static_cast<std::size_t>(v)];
    tiles.push_back({{"image", "images/" + name + ".pdst"}, {"labels", "labels/" + name + ".pdst"}});
  }
  json m = {{"format", "pdss-fixtures"}, {"seed", seed},       {"n_cls", n_cls},
            {"count", data.size()},      {"tiles", tiles},      {"label_histogram", hist}};
  write_text(out / "manifest.json", m.dump(2) + "\n");
  return m;
}

Fixtures read_fixtures(const fs::path& dir) {
  const auto m = net::read_json_file(dir / "manifest.json");
  Fixtures f;
  try {
    f.n_cls = m.at("n_cls").get<std::size_t>();
    for (const auto& t : m.at("tiles"))
      f.samples.push_back({read_tensor_file(dir / t.at("image").get<std::string>()),
                           read_tensor_file(dir / t.at("labels").get<std::string>())});
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, "malformed fixture manifest: " + std::string(e.what()));
  }
  return f;
}

net::NetworkConfig load_config(const std::string& path) {
  net::NetworkConfig cfg;
  if (!path.empty()) {
    const auto j = net::read_json_file(path);
    try {
      cfg = j.get<net::NetworkConfig>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::validation, "bad config: " + std::string(e.what()));
    }
  }
  return cfg;
}

// ------------------------------------------------------------ commands

struct Common {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string config;
  std::string out = "out";
};

int cmd_gen_fixtures(const Common& c, std::size_t n_cls, std::size_t size, std::size_t count,
                     double noise) {
  require(n_cls >= 1 && size >= 1 && count >= 1, "gen-fixtures: extents must be >= 1");
  const auto data = synth::make_dataset({n_cls, size, noise}, count, c.seed);
  const auto m = write_fixtures(c.out, data, n_cls, c.seed);
  std::uint64_t total = 0;
  for (auto v : m["label_histogram"]) total += v.get<std::uint64_t>();
  std::cout << "wrote " << count << " tiles to " << c.out << "\n"
            << "label_histogram " << m["label_histogram"].dump() << " total " << total << "\n";
  return kOk;
}

int cmd_train_toy(const Common& c, const std::string& data_dir, std::size_t steps,
                  std::size_t holdout, bool seed_given, bool threads_given) {
  auto cfg = load_config(c.config);
  if (seed_given) cfg.seed = c.seed;
  if (threads_given) cfg.threads = c.threads;
  cfg.validate();
  Fixtures fx;
  if (data_dir.empty()) {
    fx.samples = synth::make_dataset({cfg.n_cls, cfg.tile, 0.08}, 64, cfg.seed + 1000);
    fx.n_cls = cfg.n_cls;
  } else {
    fx = read_fixtures(data_dir);
  }
  require(fx.n_cls == cfg.n_cls, "train-toy: fixture n_cls does not match config");
  require(holdout < fx.samples.size(), "train-toy: holdout leaves no training tiles");
  const std::size_t n_train = fx.samples.size() - holdout;

  make_dir(c.out);
  net::TrainState st{net::init_params(cfg), std::nullopt, 0};
  std::ostringstream csv;
  csv << std::setprecision(17) << "step,loss_ce,loss_dice,loss_total\n";
  for (std::size_t s = 0; s < steps; ++s) {
    const auto& smp = fx.samples[s % n_train];
    const auto r = net::train_step(st, cfg, smp.image, smp.labels);
    csv << s << "," << r.loss.ce << "," << r.loss.dice << "," << r.loss.total << "\n";
    if ((s + 1) % 50 == 0 || s + 1 == steps)
      std::cerr << "step " << s + 1 << " loss " << r.loss.total << "\n";
  }
  write_text(fs::path(c.out) / "loss_curve.csv", csv.str());
  net::save_checkpoint(fs::path(c.out) / "checkpoint", cfg, st);

  if (holdout > 0 && st.memory) {
    eval::ConfusionMatrix cm(cfg.n_cls);
    for (std::size_t i = n_train; i < fx.samples.size(); ++i) {
      const auto& smp = fx.samples[i];
      cm.accumulate(net::argmax_labels(net::infer_logits(st.params, cfg, smp.image, *st.memory)),
                    smp.labels);
    }
    const auto report = eval::to_json(eval::metrics(cm));
    write_text(fs::path(c.out) / "holdout_metrics.json", report.dump(2) + "\n");
    std::cout << report.dump() << "\n";
  }
  return kOk;
}

int cmd_forward(const Common& c, const std::string& ckpt, const std::string& input) {
  const auto ck = net::load_checkpoint(ckpt);
  if (!ck.state.memory)
    throw Error(ErrorKind::validation, "forward: checkpoint has no prototype memory");
  auto cfg = ck.cfg;
  cfg.threads = c.threads;
  const auto image = read_tensor_file(input);
  const auto logits = net::infer_logits(ck.state.params, cfg, image, *ck.state.memory);
  if (!logits.all_finite()) throw Error(ErrorKind::numeric, "forward: non-finite logits");
  make_dir(c.out);
  write_tensor_file(logits, fs::path(c.out) / "logits.pdst");
  write_tensor_file(net::argmax_labels(logits), fs::path(c.out) / "labels.pdst");
  std::cout << "logits " << shape_str(logits.shape()) << " -> " << c.out << "\n";
  return kOk;
}

int cmd_gradcheck(const Common& c, const std::string& scale, std::size_t instances,
                  double fraction) {
  require(scale == "micro" || scale == "scan" || scale == "network",
          "gradcheck: --scale must be micro, scan or network");
  bool ok = true;
  if (scale != "network") {
    std::mt19937_64 rng(c.seed);
    std::uniform_int_distribution<std::size_t> len(1, 32);
    double worst = 0.0;
    for (std::size_t k = 0; k < instances; ++k) {
      const auto in = checks::random_scan_instance(len(rng), 3, 4, k % 2 == 0, rng);
      worst = std::max(worst, checks::scan_gradcheck(in, rng));
    }
    const bool pass = worst <= 1e-5;
    ok = ok && pass;
    std::cout << "scan max_rel_error " << worst << " tol 1e-05 " << (pass ? "ok" : "FAIL") << "\n";
  }
  if (scale != "scan") {
    auto cfg = checks::micro_config(c.seed);
    cfg.threads = c.threads;
    const auto r = checks::network_gradcheck(cfg, fraction, c.seed);
    const bool pass = r.max_rel_error <= 1e-4;
    ok = ok && pass;
    std::cout << "network max_rel_error " << r.max_rel_error << " tol 0.0001 over "
              << r.coordinates << " coordinates (worst " << r.worst << ") "
              << (pass ? "ok" : "FAIL") << "\n";
  }
  return ok ? kOk : kValidation;
}

int cmd_bench_scan(const Common& c, std::size_t L, std::size_t D, std::size_t chunk,
                   std::vector<std::size_t> thread_counts, std::size_t reps) {
  require(L >= 1 && D >= 1 && chunk >= 1 && reps >= 1, "bench-scan: extents must be >= 1");
  std::mt19937_64 rng(c.seed);
  const auto in = checks::random_scan_instance(L, D, 8, true, rng);
  auto time = [&](auto&& f) {
    double best = 1e300;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      f();
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return static_cast<double>(L) / best;
  };
  const ssm::ScanOptions opt{.checked = false};
  const double seq = time([&] { ssm::selective_scan_seq(in.p, in.u, in.h0, opt); });
  json report = {{"L", L}, {"d_ch", D}, {"n_state", 8}, {"chunk", chunk},
                 {"hardware_threads", std::thread::hardware_concurrency()},
                 {"sequential_tokens_per_s", seq}, {"chunked", json::array()}};
  std::cout << "sequential " << seq << " tokens/s\n";
  for (auto t : thread_counts) {
    const ssm::ScanOptions o{.checked = false, .threads = t};
    const double tp = time([&] { ssm::selective_scan_chunked(in.p, in.u, in.h0, chunk, o); });
    std::cout << "chunked threads=" << t << " " << tp << " tokens/s (" << tp / seq << "x)\n";
    report["chunked"].push_back({{"threads", t}, {"tokens_per_s", tp}, {"speedup", tp / seq}});
  }
  if (!c.out.empty() && c.out != "out") {
    make_dir(c.out);
    write_text(fs::path(c.out) / "bench_scan.json", report.dump(2) + "\n");
  }
  return kOk;
}

std::vector<fs::path> sorted_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::io, "not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pdst") out.push_back(e.path().filename());
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_metrics(const Common& c, const std::string& pred_dir, const std::string& gt_dir,
                std::size_t n_cls) {
  require(n_cls >= 1, "metrics: --n-cls must be >= 1");
  const auto files = sorted_files(gt_dir);
  require(!files.empty(), "metrics: no label files in " + gt_dir);
  eval::ConfusionMatrix cm(n_cls);
  for (const auto& f : files) {
    const auto pred_path = fs::path(pred_dir) / f;
    if (!fs::exists(pred_path)) throw Error(ErrorKind::io, "missing prediction " + pred_path.string());
    cm.accumulate(read_tensor_file(pred_path), read_tensor_file(fs::path(gt_dir) / f));
  }
  const auto report = eval::to_json(eval::metrics(cm));
  std::cout << report.dump(2) << "\n";
  if (c.out != "out") {
    make_dir(c.out);
    write_text(fs::path(c.out) / "metrics.json", report.dump(2) + "\n");
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pdss: prototype-guided state-space segmentation toolkit"};
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--config", c.config, "NetworkConfig JSON");
    sub->add_option("--out", c.out, "output directory");
  };

  std::size_t n_cls = 3, size = 32, count = 64;
  double noise = 0.08;
  auto* gen = app.add_subcommand("gen-fixtures", "write synthetic blob tiles");
  common(gen);
  gen->add_option("--n-cls", n_cls);
  gen->add_option("--size", size);
  gen->add_option("--count", count);
  gen->add_option("--noise", noise);

  std::string data_dir;
  std::size_t steps = 300, holdout = 0;
  auto* train = app.add_subcommand("train-toy", "train on synthetic tiles");
  common(train);
  train->add_option("--data", data_dir, "fixture directory (generated if omitted)");
  train->add_option("--steps", steps);
  train->add_option("--holdout", holdout, "last N tiles kept for evaluation");

  std::string ckpt, input;
  auto* fwd = app.add_subcommand("forward", "run inference from a checkpoint");
  common(fwd);
  fwd->add_option("--checkpoint", ckpt)->required();
  fwd->add_option("--input", input, "image tensor file [3,H,W]")->required();

  std::string scale = "micro";
  std::size_t instances = 20;
  double fraction = 0.01;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  common(gc);
  gc->add_option("--scale", scale, "micro (scan and network), scan, network");
  gc->add_option("--instances", instances);
  gc->add_option("--fraction", fraction);

  std::size_t L = 16384, d_ch = 16, chunk = 256, reps = 3;
  std::vector<std::size_t> thread_list{1, 2, 4};
  auto* bench = app.add_subcommand("bench-scan", "sequential vs chunked scan throughput");
  common(bench);
  bench->add_option("--L", L);
  bench->add_option("--d-ch", d_ch);
  bench->add_option("--chunk", chunk);
  bench->add_option("--thread-list", thread_list);
  bench->add_option("--reps", reps);

  std::string pred_dir, gt_dir;
  auto* met = app.add_subcommand("metrics", "confusion-matrix report over label files");
  common(met);
  met->add_option("--pred", pred_dir)->required();
  met->add_option("--gt", gt_dir)->required();
  met->add_option("--n-cls", n_cls);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    if (*gen) return cmd_gen_fixtures(c, n_cls, size, count, noise);
    if (*train)
      return cmd_train_toy(c, data_dir, steps, holdout, train->count("--seed") > 0,
                           train->count("--threads") > 0);
    if (*fwd) return cmd_forward(c, ckpt, input);
    if (*gc) return cmd_gradcheck(c, scale, instances, fraction);
    if (*bench) return cmd_bench_scan(c, L, d_ch, chunk, thread_list, reps);
    if (*met) return cmd_metrics(c, pred_dir, gt_dir, n_cls);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kValidation;
}
