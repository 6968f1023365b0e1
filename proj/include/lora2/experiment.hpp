#pragma once

// Assembles a runnable experiment from a parsed config: frozen model,
// adapters on the attached sites, planted dataset, and the training
// configuration. Component seeds derive from the single run seed, so one
// integer reproduces the entire run.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lora2/adapters.hpp"
#include "lora2/allocation.hpp"
#include "lora2/matrix.hpp"
#include "lora2/persistence.hpp"
#include "lora2/tasks.hpp"
#include "lora2/training.hpp"

namespace lora2 {

// Seed salts: 1 model, 2 task data, 3 batch sampling (inside the trainer),
// 100+i adapter at attached-site index i.
struct ExperimentSetup {
  ModelSpec spec;
  AdapterSet adapters;
  Batch train_data;
  Batch eval_data;
  std::string planted_site;
  Matrix delta_star;
  TrainConfig train_cfg;
};

inline std::vector<std::string> attached_sites(const ModelSpec& spec, const ModelConfig& cfg) {
  std::vector<std::string> names;
  if (cfg.attach.empty()) {
    for (const Site& s : spec.sites) names.push_back(s.name);
  } else {
    for (const std::string& n : cfg.attach) {
      spec.site_index(n);  // validates existence
      names.push_back(n);
    }
  }
  return names;
}

inline ExperimentSetup build_experiment(const ExperimentConfig& cfg) {
  cfg.model.validate();
  cfg.task.validate();
  cfg.adapter.validate();
  cfg.orth.validate();

  ExperimentSetup setup;
  const std::uint64_t seed = cfg.train.seed;
  setup.spec = build_stack(cfg.model.layers, cfg.model.dim, cfg.model.ff_dim,
                           cfg.model.nonlinearity, mix_seed(seed, 1));

  const std::vector<std::string> sites = attached_sites(setup.spec, cfg.model);
  if (sites.empty()) throw std::invalid_argument("no adapted sites");
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const Matrix& w0 = setup.spec.site(sites[i]).w0;
    const std::uint64_t aseed = mix_seed(seed, 100 + i);
    if (cfg.adapter.kind == "lora2") {
      Lora2Config ac{w0.rows(), w0.cols(), cfg.adapter.k, cfg.adapter.r_init,
                     cfg.adapter.init_std, aseed};
      setup.adapters.add(sites[i], init_lora2(ac));
    } else if (cfg.adapter.kind == "lora") {
      LoraConfig ac{w0.rows(), w0.cols(), cfg.adapter.r_init, cfg.adapter.init_std, aseed};
      setup.adapters.add(sites[i], init_lora(ac));
    } else {
      SvdConfig ac{w0.rows(), w0.cols(), cfg.adapter.r_init, cfg.adapter.init_std, aseed};
      setup.adapters.add(sites[i], init_svd(ac));
    }
  }

  setup.planted_site = cfg.task.planted_site.empty() ? sites.front() : cfg.task.planted_site;
  const Matrix& planted_w0 = setup.spec.site(setup.planted_site).w0;

  std::mt19937_64 task_rng(mix_seed(seed, 2));
  setup.delta_star =
      planted_increment(planted_w0.rows(), planted_w0.cols(), cfg.task.rho, task_rng);
  std::map<std::string, Matrix> planted{{setup.planted_site, setup.delta_star}};

  auto sample = [&](int n) {
    Batch b;
    b.kind = LossKind::Mse;
    b.x = Matrix::gaussian(n, setup.spec.input_dim(), 1.0, task_rng);
    b.y = forward_with_deltas(setup.spec, planted, b.x);
    if (cfg.task.noise_std > 0.0) {
      b.y = add(b.y, Matrix::gaussian(n, b.y.cols(), cfg.task.noise_std, task_rng));
    }
    return b;
  };
  setup.train_data = sample(cfg.task.n_train);
  setup.eval_data = sample(cfg.task.n_eval);

  TrainConfig& tc = setup.train_cfg;
  tc.steps = cfg.train.steps;
  tc.batch_size = cfg.train.batch_size;
  tc.opt.lr = cfg.train.lr;
  tc.opt.weight_decay = cfg.train.weight_decay;
  tc.orth_mode = cfg.orth.mode;
  tc.gamma = cfg.orth.gamma;
  tc.ema.beta1 = cfg.allocator.beta1;
  tc.ema.beta2 = cfg.allocator.beta2;
  tc.seed = seed;
  tc.log_every = cfg.train.log_every;
  tc.eval_every = cfg.train.eval_every;
  if (cfg.adapter.kind == "lora2") {
    tc.schedule.b_init = setup.adapters.total_units();
    tc.schedule.b_target = cfg.allocator.b_target;
    tc.schedule.t_warmup = cfg.allocator.t_warmup;
    tc.schedule.t_final = cfg.allocator.t_final;
    tc.schedule.prune_every = cfg.allocator.prune_every;
  }
  return setup;
}

struct RunOutputs {
  TrainResult result;
  std::filesystem::path dir;
  std::filesystem::path config_path;
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
  std::filesystem::path heatmap_path;
};

// Full run with artifacts: config copy, metrics stream, checkpoint, and (for
// prunable adapters) the rank heatmap.
inline RunOutputs run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                 const TrainHooks& hooks = {}) {
  ExperimentSetup setup = build_experiment(cfg);
  std::filesystem::create_directories(out_dir);

  RunOutputs out;
  out.dir = out_dir;
  out.config_path = out_dir / "config.cfg";
  out.metrics_path = out_dir / "metrics.jsonl";
  out.checkpoint_path = out_dir / "checkpoint.ckpt";
  out.heatmap_path = out_dir / "heatmap.csv";

  {
    std::ofstream f(out.config_path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + out.config_path.string());
    f << serialize_config(cfg);
  }
  std::filesystem::remove(out.metrics_path);

  TrainHooks wired = hooks;
  const std::string metrics_file = out.metrics_path.string();
  auto downstream = hooks.on_record;
  wired.on_record = [metrics_file, downstream](const MetricsRecord& rec) {
    append_metrics(metrics_file, rec);
    if (downstream) downstream(rec);
  };
  out.result = train(setup.train_cfg, setup.spec, setup.adapters, setup.train_data,
                     setup.eval_data, wired);
  save_checkpoint(out.checkpoint_path.string(), setup.adapters, out.result.final_step,
                  config_hash(cfg));
  if (cfg.adapter.kind == "lora2" && !out.result.records.empty()) {
    export_heatmap(out.heatmap_path.string(), out.result.records.back().site_ranks);
  }
  return out;
}

}  // namespace lora2
