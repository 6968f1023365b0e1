#pragma once

// Deterministic training loop: per step it rebuilds the compute graph over
// the current adapter state, takes one combined backward pass (task loss plus
// orthogonality penalty), feeds |w.g| into the EMA tracker, runs scheduled
// global mask updates, and applies a bias-corrected adaptive-moments step
// with decoupled weight decay on the factor matrices (never on lambda).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "lora2/adapters.hpp"
#include "lora2/allocation.hpp"
#include "lora2/autodiff.hpp"
#include "lora2/matrix.hpp"
#include "lora2/orthogonality.hpp"
#include "lora2/tasks.hpp"

namespace lora2 {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("moment decay rates must lie in [0,1)");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be non-negative");
  }
};

struct ParamRef {
  std::string name;
  Matrix* value = nullptr;
  bool decay = true;
};

class AdamW {
 public:
  explicit AdamW(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  int steps_taken() const { return t_; }

  void step(const std::vector<ParamRef>& params, const GradientSet& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const ParamRef& p : params) {
      auto git = grads.find(p.name);
      if (git == grads.end()) {
        throw std::invalid_argument("missing gradient for '" + p.name + "'");
      }
      const Matrix& g = git->second;
      check_same_shape(*p.value, g, "optimizer step '" + p.name + "'");
      auto [it, fresh] = moments_.try_emplace(
          p.name, Matrix(g.rows(), g.cols()), Matrix(g.rows(), g.cols()));
      (void)fresh;
      Matrix& m = it->second.first;
      Matrix& v = it->second.second;
      Matrix& w = *p.value;
      for (std::size_t e = 0; e < w.size(); ++e) {
        const double ge = g.data()[e];
        double& me = m.data()[e];
        double& ve = v.data()[e];
        me = cfg_.beta1 * me + (1.0 - cfg_.beta1) * ge;
        ve = cfg_.beta2 * ve + (1.0 - cfg_.beta2) * ge * ge;
        double& we = w.data()[e];
        we -= cfg_.lr * (me / bc1) / (std::sqrt(ve / bc2) + cfg_.eps);
        if (p.decay) we -= cfg_.lr * cfg_.weight_decay * we;
      }
    }
  }

 private:
  AdamConfig cfg_;
  int t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
};

using AnyAdapter = std::variant<Lora2Adapter, LoraAdapter, SvdAdapter>;

struct SiteAdapter {
  std::string site;
  AnyAdapter adapter;
};

// Site-keyed adapters in registration order (the order breaks score ties).
class AdapterSet {
 public:
  void add(std::string site, AnyAdapter adapter) {
    if (find(site)) throw std::invalid_argument("site '" + site + "' already has an adapter");
    items_.push_back(SiteAdapter{std::move(site), std::move(adapter)});
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  SiteAdapter& at(std::size_t i) { return items_.at(i); }
  const SiteAdapter& at(std::size_t i) const { return items_.at(i); }
  std::vector<SiteAdapter>& items() { return items_; }
  const std::vector<SiteAdapter>& items() const { return items_; }

  SiteAdapter* find(const std::string& site) {
    for (auto& it : items_) {
      if (it.site == site) return &it;
    }
    return nullptr;
  }

  const SiteAdapter* find(const std::string& site) const {
    for (const auto& it : items_) {
      if (it.site == site) return &it;
    }
    return nullptr;
  }

  long long total_units() const {
    long long n = 0;
    for (const auto& it : items_) {
      if (const auto* ad = std::get_if<Lora2Adapter>(&it.adapter)) n += ad->r();
    }
    return n;
  }

  long long param_count_total() const {
    long long n = 0;
    for (const auto& it : items_) {
      n += std::visit([](const auto& ad) { return param_count(ad); }, it.adapter);
    }
    return n;
  }

 private:
  std::vector<SiteAdapter> items_;
};

template <typename Fn>
void for_each_param(SiteAdapter& sa, Fn&& fn) {
  const std::string& p = sa.site;
  if (auto* ad = std::get_if<Lora2Adapter>(&sa.adapter)) {
    fn(p + ".u_out", &ad->u_out, true);
    fn(p + ".u_in", &ad->u_in, true);
    fn(p + ".lambda", &ad->lambda, false);
    fn(p + ".v_in", &ad->v_in, true);
    fn(p + ".v_out", &ad->v_out, true);
  } else if (auto* lo = std::get_if<LoraAdapter>(&sa.adapter)) {
    fn(p + ".b", &lo->b, true);
    fn(p + ".a", &lo->a, true);
  } else if (auto* sv = std::get_if<SvdAdapter>(&sa.adapter)) {
    fn(p + ".p", &sv->p, true);
    fn(p + ".lambda", &sv->lambda, false);
    fn(p + ".q", &sv->q, true);
  }
}

inline std::vector<ParamRef> collect_params(AdapterSet& adapters) {
  std::vector<ParamRef> refs;
  for (auto& sa : adapters.items()) {
    for_each_param(sa, [&refs](std::string name, Matrix* value, bool decay) {
      refs.push_back(ParamRef{std::move(name), value, decay});
    });
  }
  return refs;
}

inline Matrix delta_of(const AnyAdapter& ad) {
  return std::visit([](const auto& a) { return delta_matrix(a); }, ad);
}

struct TrainConfig {
  int steps = 0;
  int batch_size = 0;
  AdamConfig opt;
  OrthMode orth_mode = OrthMode::All;
  double gamma = 0.1;
  EmaConfig ema;
  BudgetSchedule schedule;
  std::uint64_t seed = 0;
  int log_every = 10;
  int eval_every = 0;   // 0: evaluate at the final step only
  bool track_outer = false;  // also track outer factors, for scoring audits
};

struct MetricsRecord {
  int step = 0;
  std::string event;  // "log", "prune", "final", "stopped", "abort"
  double task_loss = std::numeric_limits<double>::quiet_NaN();
  double orth_loss = 0.0;
  long long retained = 0;
  double threshold = std::numeric_limits<double>::quiet_NaN();  // prune events only
  std::map<std::string, int> site_ranks;  // prunable sites only
  double eval = std::numeric_limits<double>::quiet_NaN();
  std::string message;  // abort diagnostics
};

struct PruneAudit {
  int step = 0;
  std::vector<std::string> sites;
  std::vector<std::vector<double>> simplified;
  std::vector<std::vector<double>> full;  // populated only when track_outer
};

struct TrainHooks {
  const std::atomic<bool>* stop = nullptr;
  std::function<void(const PruneAudit&)> on_prune;
  std::function<void(const MetricsRecord&)> on_record;  // fires before any abort throw
};

struct TrainResult {
  std::vector<MetricsRecord> records;
  int final_step = 0;
  double final_eval = std::numeric_limits<double>::quiet_NaN();
  bool stopped = false;
};

namespace detail {

struct StepGraph {
  Graph g;
  NodeId pred = -1;
  NodeId task = -1;
  NodeId orth = -1;  // -1 when no penalty term exists
  NodeId total = -1;
};

inline NodeId nonlinearity_node(Graph& g, NodeId h, Nonlinearity nl) {
  switch (nl) {
    case Nonlinearity::None: return h;
    case Nonlinearity::Rectifier: return g.relu(h);
    case Nonlinearity::Saturating: return g.tanh(h);
  }
  throw std::logic_error("unreachable nonlinearity");
}

inline StepGraph build_step_graph(const ModelSpec& spec, AdapterSet& adapters,
                                  const Batch& batch, OrthMode mode, double gamma) {
  StepGraph sg;
  Graph& g = sg.g;
  NodeId h = g.constant(batch.x);
  std::vector<Lora2Leaves> lora2_leaves;
  for (std::size_t i = 0; i < spec.sites.size(); ++i) {
    if (i > 0) h = nonlinearity_node(g, h, spec.nonlinearity);
    const Site& site = spec.sites[i];
    const NodeId base = g.matmul(h, g.constant(site.w0));
    SiteAdapter* sa = adapters.find(site.name);
    if (!sa) {
      h = base;
      continue;
    }
    if (auto* ad = std::get_if<Lora2Adapter>(&sa->adapter)) {
      Lora2Leaves l = register_leaves(g, sa->site, *ad);
      h = g.add(base, apply_delta(g, l, h));
      lora2_leaves.push_back(l);
    } else if (auto* lo = std::get_if<LoraAdapter>(&sa->adapter)) {
      h = g.add(base, apply_delta(g, register_leaves(g, sa->site, *lo), h));
    } else if (auto* sv = std::get_if<SvdAdapter>(&sa->adapter)) {
      h = g.add(base, apply_delta(g, register_leaves(g, sa->site, *sv), h));
    }
  }
  sg.pred = h;

  if (batch.kind == LossKind::Mse) {
    const Matrix& y = batch.y;
    const NodeId diff = g.sub(sg.pred, g.constant(y));
    sg.task = g.scale(g.frobenius_sq(diff), 1.0 / (static_cast<double>(y.rows()) * y.cols()));
  } else {
    sg.task = g.cross_entropy(sg.pred, batch.labels);
  }

  if (gamma > 0.0) {
    NodeId orth = -1;
    for (const Lora2Leaves& leaves : lora2_leaves) {
      const NodeId term = orth_loss_node(g, leaves, mode, gamma);
      orth = orth < 0 ? term : g.add(orth, term);
    }
    sg.orth = orth;
  }
  sg.total = sg.orth < 0 ? sg.task : g.add(sg.task, sg.orth);
  return sg;
}

inline Batch take_rows(const Batch& full, const std::vector<int>& idx) {
  Batch out;
  out.kind = full.kind;
  out.x = Matrix(static_cast<int>(idx.size()), full.x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (int j = 0; j < full.x.cols(); ++j) out.x(static_cast<int>(i), j) = full.x(idx[i], j);
  }
  if (full.kind == LossKind::Mse) {
    out.y = Matrix(static_cast<int>(idx.size()), full.y.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (int j = 0; j < full.y.cols(); ++j) out.y(static_cast<int>(i), j) = full.y(idx[i], j);
    }
  } else {
    out.y = full.y;  // class-count placeholder, targets live in labels
    out.labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.labels[i] = full.labels[static_cast<std::size_t>(idx[i])];
    }
  }
  return out;
}

}  // namespace detail

// Held-out metric with adapters folded in: mse for regression, accuracy for
// classification. No state is mutated.
inline double evaluate(const ModelSpec& spec, const AdapterSet& adapters, const Batch& eval) {
  std::map<std::string, Matrix> deltas;
  for (const auto& sa : adapters.items()) deltas.emplace(sa.site, delta_of(sa.adapter));
  const Matrix pred = forward_with_deltas(spec, deltas, eval.x);
  if (eval.kind == LossKind::Mse) return task_loss(pred, eval);
  int correct = 0;
  for (int r = 0; r < pred.rows(); ++r) {
    int best = 0;
    for (int c = 1; c < pred.cols(); ++c) {
      if (pred(r, c) > pred(r, best)) best = c;
    }
    if (best == eval.labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / pred.rows();
}

// One full run over `cfg.steps` optimizer steps. Mutates `adapters` in place
// and returns the metrics stream. Identical inputs and seed give a
// bitwise-identical stream. Throws on non-finite loss after appending an
// abort record.
inline TrainResult train(const TrainConfig& cfg, const ModelSpec& spec, AdapterSet& adapters,
                         const Batch& train_data, const Batch& eval_data,
                         const TrainHooks& hooks = {}) {
  spec.validate();
  train_data.validate();
  cfg.opt.validate();
  cfg.ema.validate();
  if (cfg.steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (cfg.batch_size < 1 || cfg.batch_size > train_data.n()) {
    throw std::invalid_argument("batch_size must lie in [1, n_train]");
  }
  if (cfg.log_every < 1) throw std::invalid_argument("log_every must be >= 1");

  std::vector<Lora2Adapter*> prunable;
  std::vector<std::string> prunable_sites;
  for (auto& sa : adapters.items()) {
    if (auto* ad = std::get_if<Lora2Adapter>(&sa.adapter)) {
      prunable.push_back(ad);
      prunable_sites.push_back(sa.site);
    }
  }
  const bool allocating = !prunable.empty();
  if (allocating) {
    cfg.schedule.validate();
    if (cfg.schedule.b_init != adapters.total_units()) {
      throw std::invalid_argument("schedule b_init " + std::to_string(cfg.schedule.b_init) +
                                  " does not match " + std::to_string(adapters.total_units()) +
                                  " prunable units");
    }
    if (cfg.steps < cfg.schedule.t_final) {
      throw std::invalid_argument("steps must reach the schedule's t_final");
    }
  }

  SensitivityTracker tracker(cfg.ema);
  for (std::size_t a = 0; a < prunable.size(); ++a) {
    const std::string& p = prunable_sites[a];
    const Lora2Adapter& ad = *prunable[a];
    tracker.track(p + ".lambda", ad.r(), 1);
    tracker.track(p + ".u_in", ad.k(), ad.r());
    tracker.track(p + ".v_in", ad.r(), ad.k());
    if (cfg.track_outer) {
      tracker.track(p + ".u_out", ad.din(), ad.k());
      tracker.track(p + ".v_out", ad.k(), ad.dout());
    }
  }

  std::vector<ParamRef> params = collect_params(adapters);
  AdamW opt(cfg.opt);
  std::mt19937_64 batch_rng(mix_seed(cfg.seed, 3));
  const bool full_batch = cfg.batch_size == train_data.n();

  TrainResult result;
  auto emit = [&](MetricsRecord rec) {
    if (hooks.on_record) hooks.on_record(rec);
    result.records.push_back(std::move(rec));
  };
  auto site_ranks = [&]() {
    std::map<std::string, int> out;
    for (std::size_t a = 0; a < prunable.size(); ++a) {
      out.emplace(prunable_sites[a], effective_rank(*prunable[a]));
    }
    return out;
  };
  auto retained_total = [&]() {
    long long n = 0;
    for (const Lora2Adapter* ad : prunable) n += effective_rank(*ad);
    return n;
  };

  for (int t = 1; t <= cfg.steps; ++t) {
    if (hooks.stop && hooks.stop->load()) {
      MetricsRecord rec;
      rec.step = t;
      rec.event = "stopped";
      rec.retained = retained_total();
      rec.site_ranks = site_ranks();
      emit(std::move(rec));
      result.final_step = t;
      result.stopped = true;
      return result;
    }

    Batch batch;
    const Batch* step_batch = &train_data;
    if (!full_batch) {
      std::vector<int> idx(static_cast<std::size_t>(cfg.batch_size));
      for (int& v : idx) {
        v = static_cast<int>(batch_rng() % static_cast<std::uint64_t>(train_data.n()));
      }
      batch = detail::take_rows(train_data, idx);
      step_batch = &batch;
    }

    double task_value = 0.0, orth_value = 0.0;
    bool prune_event = false;
    double threshold = std::numeric_limits<double>::quiet_NaN();
    try {
      detail::StepGraph sg =
          detail::build_step_graph(spec, adapters, *step_batch, cfg.orth_mode, cfg.gamma);
      task_value = sg.g.value(sg.task)(0, 0);
      orth_value = sg.orth < 0 ? 0.0 : sg.g.value(sg.orth)(0, 0);
      const GradientSet grads = sg.g.backward(sg.total);

      if (allocating) {
        std::map<std::string, Matrix> raw;
        for (const std::string& name : tracker.tracked_names()) {
          raw.emplace(name, raw_sensitivity(sg.g.leaf_value(name), grads.at(name)));
        }
        tracker.update(raw);

        prune_event = is_prune_step(cfg.schedule, t);
        if (prune_event) {
          std::vector<std::vector<double>> scores;
          scores.reserve(prunable.size());
          for (std::size_t a = 0; a < prunable.size(); ++a) {
            scores.push_back(importance_simplified(prunable_sites[a], *prunable[a], tracker));
          }
          if (hooks.on_prune) {
            PruneAudit audit;
            audit.step = t;
            audit.sites = prunable_sites;
            audit.simplified = scores;
            if (cfg.track_outer) {
              for (std::size_t a = 0; a < prunable.size(); ++a) {
                audit.full.push_back(
                    importance_full(prunable_sites[a], *prunable[a], tracker));
              }
            }
            hooks.on_prune(audit);
          }
          const MaskUpdateResult mu =
              global_mask_update(prunable, scores, budget_at(cfg.schedule, t));
          threshold = mu.threshold;
        }
      }

      opt.step(params, grads);
    } catch (const std::domain_error& e) {
      MetricsRecord rec;
      rec.step = t;
      rec.event = "abort";
      rec.message = e.what();
      rec.retained = retained_total();
      rec.site_ranks = site_ranks();
      emit(std::move(rec));
      throw std::runtime_error("non-finite loss at step " + std::to_string(t) + ": " + e.what());
    }

    // Masked units stay exactly zero regardless of optimizer momentum.
    for (Lora2Adapter* ad : prunable) {
      for (int i = 0; i < ad->r(); ++i) {
        if (!ad->mask[i]) ad->lambda(i, 0) = 0.0;
      }
    }
    for (const ParamRef& p : params) {
      for (double v : p.value->values()) {
        if (!std::isfinite(v)) {
          MetricsRecord rec;
          rec.step = t;
          rec.event = "abort";
          rec.message = "non-finite parameter '" + p.name + "'";
          emit(std::move(rec));
          throw std::runtime_error("non-finite parameter '" + p.name + "' at step " +
                                   std::to_string(t));
        }
      }
    }

    const bool final_step = t == cfg.steps;
    const bool want_eval =
        final_step || (cfg.eval_every > 0 && t % cfg.eval_every == 0);
    if (prune_event || final_step || want_eval || t % cfg.log_every == 0) {
      MetricsRecord rec;
      rec.step = t;
      rec.event = final_step ? "final" : (prune_event ? "prune" : "log");
      rec.task_loss = task_value;
      rec.orth_loss = orth_value;
      rec.retained = retained_total();
      rec.threshold = threshold;
      rec.site_ranks = site_ranks();
      if (want_eval && eval_data.n() > 0) {
        rec.eval = evaluate(spec, adapters, eval_data);
        if (final_step) result.final_eval = rec.eval;
      }
      emit(std::move(rec));
    }
  }
  result.final_step = cfg.steps;
  return result;
}

}  // namespace lora2
