// Trains the toy network on synthetic blobs and reports held-out metrics.
// Usage: demo_train_blobs [steps] [seed]

#include <cstdlib>
#include <iostream>

#include "pdss/pdss.hpp"

using namespace pdss;

int main(int argc, char** argv) {
  const std::size_t steps = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 300;
  net::NetworkConfig cfg;
  cfg.seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 0;
  const auto train = synth::make_dataset({cfg.n_cls, cfg.tile, 0.08}, 64, cfg.seed + 1000);
  const auto test = synth::make_dataset({cfg.n_cls, cfg.tile, 0.08}, 16, cfg.seed + 5000);

  net::TrainState st{net::init_params(cfg), std::nullopt, 0};
  std::cout << "parameters: " << param_count(st.params) << "\n";
  for (std::size_t s = 0; s < steps; ++s) {
    const auto& smp = train[s % train.size()];
    const auto r = net::train_step(st, cfg, smp.image, smp.labels);
    if (s % 25 == 0 || s + 1 == steps)
      std::cout << "step " << s << " ce " << r.loss.ce << " dice " << r.loss.dice << " |g| "
                << r.grad_norm << "\n";
  }
  eval::ConfusionMatrix cm(cfg.n_cls);
  for (const auto& smp : test)
    cm.accumulate(net::argmax_labels(net::infer_logits(st.params, cfg, smp.image, *st.memory)),
                  smp.labels);
  std::cout << eval::to_json(eval::metrics(cm)).dump(2) << "\n";
}
