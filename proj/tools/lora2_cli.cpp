// Command-line surface: train, grad-check, merge, score-audit,
// export-heatmap. Exit codes: 0 success, 1 failed check or runtime error,
// 2 usage error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lora2/lora2.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

lora2::ExperimentConfig load_with_overrides(const CommonOpts& opts) {
  lora2::ExperimentConfig cfg = lora2::load_config(opts.config_path);
  if (opts.seed) cfg.train.seed = *opts.seed;
  return cfg;
}

fs::path resolve_out_dir(const CommonOpts& opts) {
  if (!opts.out_dir.empty()) return opts.out_dir;
  if (const char* env = std::getenv("LORA2_OUT_DIR"); env && *env) return env;
  return fs::path("runs") / fs::path(opts.config_path).stem();
}

// Ranking with the same tie-breaking the mask update uses: score descending,
// then lower index.
std::vector<int> ranked_indices(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&scores](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return idx;
}

int cmd_train(const CommonOpts& opts) {
  const lora2::ExperimentConfig cfg = load_with_overrides(opts);
  const fs::path out = resolve_out_dir(opts);
  const lora2::RunOutputs run = lora2::run_experiment(cfg, out);
  const lora2::MetricsRecord& last = run.result.records.back();
  std::cout << "run complete: " << run.result.final_step << " steps\n";
  std::cout << "final task loss " << last.task_loss << ", retained ranks " << last.retained
            << "\n";
  if (!std::isnan(run.result.final_eval)) {
    std::cout << "final eval " << run.result.final_eval << "\n";
  }
  std::cout << "artifacts in " << out.string() << "\n";
  return 0;
}

int cmd_grad_check(const CommonOpts& opts, double step, double tol, int max_entries) {
  const lora2::ExperimentConfig cfg = load_with_overrides(opts);
  lora2::ExperimentSetup setup = lora2::build_experiment(cfg);

  // A small deterministic probe batch keeps the audit responsive at any dim.
  const int probe_n = std::min(8, setup.train_data.n());
  std::vector<int> rows(static_cast<std::size_t>(probe_n));
  std::iota(rows.begin(), rows.end(), 0);
  lora2::Batch probe;
  probe.kind = setup.train_data.kind;
  probe.x = lora2::Matrix(probe_n, setup.train_data.x.cols());
  probe.y = lora2::Matrix(probe_n, setup.train_data.y.cols());
  for (int i = 0; i < probe_n; ++i) {
    for (int j = 0; j < probe.x.cols(); ++j) probe.x(i, j) = setup.train_data.x(i, j);
    for (int j = 0; j < probe.y.cols(); ++j) probe.y(i, j) = setup.train_data.y(i, j);
  }

  lora2::detail::StepGraph sg = lora2::detail::build_step_graph(
      setup.spec, setup.adapters, probe, cfg.orth.mode, cfg.orth.gamma);

  // Audit at a seeded well-scaled point instead of the init point: fresh
  // adapters have lambda = 0, which silences whole gradient paths and leaves
  // the surviving gradients at rounding scale. Factor scale 1/sqrt(max dim)
  // keeps every Gram near identity and the loss O(1).
  std::mt19937_64 probe_rng(lora2::mix_seed(cfg.train.seed, 4));
  for (const std::string& leaf : sg.g.trainable_leaves()) {
    const lora2::Matrix& cur = sg.g.leaf_value(leaf);
    const bool is_lambda = leaf.size() > 7 && leaf.compare(leaf.size() - 7, 7, ".lambda") == 0;
    const double scale =
        is_lambda ? 0.5 : 1.0 / std::sqrt(static_cast<double>(std::max(cur.rows(), cur.cols())));
    sg.g.set_leaf(leaf, lora2::Matrix::gaussian(cur.rows(), cur.cols(), scale, probe_rng));
  }
  sg.g.recompute();

  bool all_pass = true;
  int checked = 0, skipped = 0;
  double worst = 0.0;
  std::string worst_leaf;
  for (const std::string& leaf : sg.g.trainable_leaves()) {
    // lambda reaches the loss only through the task term, linearly in the
    // prediction, so the loss is quadratic along lambda directions: the
    // central difference has no truncation error there and a larger step
    // only suppresses rounding. Quartic factor directions keep `step`.
    const bool is_lambda = leaf.size() > 7 && leaf.compare(leaf.size() - 7, 7, ".lambda") == 0;
    const double leaf_step = is_lambda ? std::max(step, 1e-3) : step;
    const lora2::FdReport rep = lora2::finite_diff_check(
        sg.g, sg.total, leaf, leaf_step, tol, max_entries, lora2::mix_seed(cfg.train.seed, 9));
    checked += rep.checked;
    skipped += rep.skipped_nondifferentiable;
    if (rep.max_rel_error > worst) {
      worst = rep.max_rel_error;
      worst_leaf = leaf;
    }
    if (!rep.pass) {
      all_pass = false;
      std::cout << "FAIL " << leaf << ": max relative error " << rep.max_rel_error << " at ("
                << rep.worst_row << "," << rep.worst_col << "), analytic " << rep.worst_analytic
                << " vs numeric " << rep.worst_numeric << "\n";
    }
  }
  std::cout << (all_pass ? "gradient check passed" : "gradient check FAILED") << ": " << checked
            << " entries, " << skipped << " skipped at kinks, worst relative error " << worst;
  if (!worst_leaf.empty()) std::cout << " (" << worst_leaf << ")";
  std::cout << "\n";
  return all_pass ? 0 : 1;
}

int cmd_merge(const std::string& ckpt_path, const std::string& out_path,
              std::string config_path) {
  if (config_path.empty()) {
    const fs::path sibling = fs::path(ckpt_path).parent_path() / "config.cfg";
    if (!fs::exists(sibling)) {
      throw std::runtime_error("no --config given and no config.cfg next to the checkpoint");
    }
    config_path = sibling.string();
  }
  const lora2::ExperimentConfig cfg = lora2::load_config(config_path);
  const lora2::LoadedCheckpoint ckpt = lora2::load_checkpoint(ckpt_path);
  if (ckpt.cfg_hash != lora2::config_hash(cfg)) {
    std::cerr << "warning: checkpoint config hash " << lora2::hash_hex(ckpt.cfg_hash)
              << " does not match " << config_path << " ("
              << lora2::hash_hex(lora2::config_hash(cfg)) << ")\n";
  }
  const lora2::ModelSpec spec =
      lora2::build_stack(cfg.model.layers, cfg.model.dim, cfg.model.ff_dim,
                         cfg.model.nonlinearity, lora2::mix_seed(cfg.train.seed, 1));

  std::ostringstream out;
  out.setf(std::ios::scientific);
  out.precision(16);
  for (const lora2::Site& site : spec.sites) {
    lora2::Matrix merged = site.w0;
    if (const lora2::SiteAdapter* sa = ckpt.adapters.find(site.name)) {
      merged = lora2::add(site.w0, lora2::delta_of(sa->adapter));
    }
    out << "site " << site.name << ' ' << merged.rows() << ' ' << merged.cols() << '\n';
    for (int i = 0; i < merged.rows(); ++i) {
      for (int j = 0; j < merged.cols(); ++j) {
        if (j) out << ' ';
        out << merged(i, j);
      }
      out << '\n';
    }
  }
  std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + out_path + "' for writing");
  f << out.str();
  if (!f.flush()) throw std::runtime_error("write failed for '" + out_path + "'");
  std::cout << "merged " << spec.sites.size() << " sites at step " << ckpt.step << " into "
            << out_path << "\n";
  return 0;
}

int cmd_score_audit(const CommonOpts& opts) {
  lora2::ExperimentConfig cfg = load_with_overrides(opts);
  if (cfg.adapter.kind != "lora2") {
    throw std::runtime_error("score-audit requires a five-factor adapter config");
  }
  lora2::ExperimentSetup setup = lora2::build_experiment(cfg);
  setup.train_cfg.track_outer = true;

  std::vector<lora2::Lora2Config> shapes;
  for (const auto& sa : setup.adapters.items()) {
    const auto& ad = std::get<lora2::Lora2Adapter>(sa.adapter);
    shapes.push_back(
        lora2::Lora2Config{ad.din(), ad.dout(), ad.k(), ad.r(), cfg.adapter.init_std, 0});
  }
  std::cout << "skipped sensitivity fraction: " << lora2::skipped_fraction(shapes) << "\n";

  int events = 0, mismatches = 0;
  lora2::TrainHooks hooks;
  hooks.on_prune = [&events, &mismatches](const lora2::PruneAudit& audit) {
    ++events;
    for (std::size_t a = 0; a < audit.sites.size(); ++a) {
      if (ranked_indices(audit.simplified[a]) != ranked_indices(audit.full[a])) {
        ++mismatches;
        std::cout << "ranking mismatch at step " << audit.step << ", site " << audit.sites[a]
                  << "\n";
      }
    }
  };
  lora2::train(setup.train_cfg, setup.spec, setup.adapters, setup.train_data, setup.eval_data,
               hooks);
  std::cout << "audited " << events << " prune events: "
            << (mismatches == 0 ? "simplified and full rankings agree"
                                : std::to_string(mismatches) + " mismatches")
            << "\n";
  return mismatches == 0 ? 0 : 1;
}

int cmd_export_heatmap(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const fs::path metrics = dir / "metrics.jsonl";
  if (!fs::exists(metrics)) {
    throw std::runtime_error("no metrics.jsonl in '" + run_dir + "'");
  }
  const std::vector<lora2::MetricsRecord> records = lora2::read_metrics(metrics.string());
  if (records.empty() || records.back().event != "final") {
    std::cout << "incomplete run in " << run_dir << " (no final record)\n";
    return 1;
  }
  const fs::path out = dir / "heatmap.csv";
  lora2::export_heatmap(out.string(), records.back().site_ranks);
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-scale low-rank adapter toolkit"};
  app.require_subcommand(1);

  CommonOpts opts;
  // Step near cbrt(eps): the central-difference optimum for an O(1) loss.
  double fd_step = 1e-5, fd_tol = 1e-5;
  int fd_entries = 12;
  std::string ckpt_path, merge_out, merge_config, run_dir;

  auto add_common = [&opts](CLI::App* sub, bool with_out_dir) {
    sub->add_option("config", opts.config_path, "experiment config file")->required();
    sub->add_option("--seed", opts.seed, "override the config seed");
    if (with_out_dir) {
      sub->add_option("--out-dir", opts.out_dir,
                      "output directory (default: $LORA2_OUT_DIR or runs/<config-stem>)");
    }
  };

  CLI::App* train = app.add_subcommand("train", "run an experiment and write its artifacts");
  add_common(train, true);

  CLI::App* grad = app.add_subcommand("grad-check", "finite-difference gradient audit");
  add_common(grad, false);
  grad->add_option("--step", fd_step, "central-difference step");
  grad->add_option("--tol", fd_tol, "relative tolerance");
  grad->add_option("--max-entries", fd_entries, "entries probed per leaf (0 = all)");

  CLI::App* merge = app.add_subcommand("merge", "fold a checkpoint into dense weights");
  merge->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  merge->add_option("out", merge_out, "output weights file")->required();
  merge->add_option("--config", merge_config,
                    "experiment config (default: config.cfg next to the checkpoint)");

  CLI::App* audit = app.add_subcommand(
      "score-audit", "verify simplified-vs-full ranking agreement on a live run");
  add_common(audit, false);

  CLI::App* heatmap = app.add_subcommand("export-heatmap", "write heatmap.csv for a finished run");
  heatmap->add_option("run-dir", run_dir, "directory containing metrics.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(opts);
    if (app.got_subcommand(grad)) return cmd_grad_check(opts, fd_step, fd_tol, fd_entries);
    if (app.got_subcommand(merge)) return cmd_merge(ckpt_path, merge_out, merge_config);
    if (app.got_subcommand(audit)) return cmd_score_audit(opts);
    if (app.got_subcommand(heatmap)) return cmd_export_heatmap(run_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
