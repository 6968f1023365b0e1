#pragma once

// Rank allocation: per-scalar EMA sensitivity statistics, per-unit importance
// scores with the outer factors dropped, the cubic budget schedule, and the
// global top-budget mask update with its retention threshold.
//
// Sensitivity |w.g| is a post-hoc statistic; it never enters the
// differentiated graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "lora2/adapters.hpp"
#include "lora2/matrix.hpp"

namespace lora2 {

inline double raw_sensitivity(double w, double g) { return std::abs(w * g); }

inline Matrix raw_sensitivity(const Matrix& w, const Matrix& g) {
  check_same_shape(w, g, "raw_sensitivity");
  Matrix out(w.rows(), w.cols());
  for (int i = 0; i < w.rows(); ++i)
    for (int j = 0; j < w.cols(); ++j) out(i, j) = raw_sensitivity(w(i, j), g(i, j));
  return out;
}

struct EmaConfig {
  double beta1 = 0.85;
  double beta2 = 0.85;

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("EMA decay rates must lie in (0,1)");
    }
  }
};

// Per-tracked-matrix smoothed sensitivity (ema_sens) and smoothed absolute
// deviation (ema_unc). The uncertainty update uses the freshly updated mean.
class SensitivityTracker {
 public:
  explicit SensitivityTracker(EmaConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  void track(const std::string& name, int rows, int cols) {
    if (state_.count(name)) throw std::invalid_argument("already tracking '" + name + "'");
    state_.emplace(name, Entry{Matrix(rows, cols), Matrix(rows, cols)});
  }

  bool tracks(const std::string& name) const { return state_.count(name) != 0; }
  int step() const { return step_; }
  const EmaConfig& config() const { return cfg_; }

  std::vector<std::string> tracked_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : state_) out.push_back(name);
    return out;
  }

  // raw must cover exactly the tracked set, shape for shape.
  void update(const std::map<std::string, Matrix>& raw) {
    if (raw.size() != state_.size()) {
      throw std::invalid_argument("sensitivity update covers " + std::to_string(raw.size()) +
                                  " matrices, tracker holds " + std::to_string(state_.size()));
    }
    for (auto& [name, e] : state_) {
      auto it = raw.find(name);
      if (it == raw.end()) throw std::invalid_argument("sensitivity update missing '" + name + "'");
      check_same_shape(e.sens, it->second, "sensitivity update '" + name + "'");
    }
    for (auto& [name, e] : state_) {
      const Matrix& in = raw.at(name);
      for (int i = 0; i < in.rows(); ++i) {
        for (int j = 0; j < in.cols(); ++j) {
          const double s = cfg_.beta1 * e.sens(i, j) + (1.0 - cfg_.beta1) * in(i, j);
          e.sens(i, j) = s;
          e.unc(i, j) = cfg_.beta2 * e.unc(i, j) + (1.0 - cfg_.beta2) * std::abs(in(i, j) - s);
        }
      }
    }
    ++step_;
  }

  const Matrix& ema_sens(const std::string& name) const { return entry(name).sens; }
  const Matrix& ema_unc(const std::string& name) const { return entry(name).unc; }

  // Smoothed per-scalar score s = ema_sens . ema_unc.
  Matrix smoothed(const std::string& name) const {
    const Entry& e = entry(name);
    return hadamard(e.sens, e.unc);
  }

  double smoothed_total(const std::string& name) const {
    const Matrix s = smoothed(name);
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) acc += s.data()[i];
    return acc;
  }

 private:
  struct Entry {
    Matrix sens;
    Matrix unc;
  };

  const Entry& entry(const std::string& name) const {
    auto it = state_.find(name);
    if (it == state_.end()) throw std::invalid_argument("'" + name + "' is not tracked");
    return it->second;
  }

  EmaConfig cfg_;
  int step_ = 0;
  std::map<std::string, Entry> state_;
};

// Score of unit i: s(lambda_i) plus the mean smoothed score of inner-left
// column i and of inner-right row i. Outer factors contribute nothing.
inline std::vector<double> importance_simplified(const std::string& prefix,
                                                 const Lora2Adapter& ad,
                                                 const SensitivityTracker& t) {
  const Matrix s_lambda = t.smoothed(prefix + ".lambda");
  const Matrix s_uin = t.smoothed(prefix + ".u_in");
  const Matrix s_vin = t.smoothed(prefix + ".v_in");
  const int k = ad.k(), r = ad.r();
  std::vector<double> out(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    double left = 0.0, right = 0.0;
    for (int j = 0; j < k; ++j) {
      left += s_uin(j, i);
      right += s_vin(i, j);
    }
    out[i] = s_lambda(i, 0) + left / k + right / k;
  }
  return out;
}

// Adds the whole-matrix smoothed totals of both outer factors, divided by k;
// the addition is the same at every index, so rankings cannot move.
inline std::vector<double> importance_full(const std::string& prefix, const Lora2Adapter& ad,
                                           const SensitivityTracker& t) {
  std::vector<double> out = importance_simplified(prefix, ad, t);
  const double outer =
      (t.smoothed_total(prefix + ".u_out") + t.smoothed_total(prefix + ".v_out")) / ad.k();
  for (double& v : out) v += outer;
  return out;
}

// Share of trainable entries whose sensitivity statistics are never computed.
inline double skipped_fraction(const std::vector<Lora2Config>& cfgs) {
  if (cfgs.empty()) throw std::invalid_argument("skipped_fraction: empty adapter list");
  long long skipped = 0, total = 0;
  for (const Lora2Config& c : cfgs) {
    c.validate();
    skipped += outer_entry_count(c);
    total += param_count(c);
  }
  return static_cast<double>(skipped) / static_cast<double>(total);
}

struct BudgetSchedule {
  long long b_init = 0;    // total retained units across all adapters at start
  long long b_target = 0;
  int t_warmup = 0;
  int t_final = 0;
  int prune_every = 10;

  void validate() const {
    if (b_init < 1 || b_target < 1) throw std::invalid_argument("budgets must be >= 1");
    if (b_target > b_init) throw std::invalid_argument("b_target must not exceed b_init");
    if (t_warmup >= t_final) throw std::invalid_argument("t_warmup must precede t_final");
    if (prune_every < 1) throw std::invalid_argument("prune_every must be >= 1");
  }
};

// Cubic interpolation from b_init to b_target; non-increasing in t.
inline long long budget_at(const BudgetSchedule& s, int t) {
  s.validate();
  if (t < 0) throw std::invalid_argument("budget_at: negative step");
  if (t <= s.t_warmup) return s.b_init;
  if (t >= s.t_final) return s.b_target;
  const double frac = static_cast<double>(t - s.t_warmup) / (s.t_final - s.t_warmup);
  const double rem = 1.0 - frac;
  return s.b_target + std::llround(static_cast<double>(s.b_init - s.b_target) * rem * rem * rem);
}

// Mask-update steps: every prune_every steps inside (t_warmup, t_final], and
// always at t_final itself so the final budget is exact.
inline bool is_prune_step(const BudgetSchedule& s, int t) {
  if (t <= s.t_warmup || t > s.t_final) return false;
  return (t - s.t_warmup) % s.prune_every == 0 || t == s.t_final;
}

struct MaskUpdateResult {
  double threshold = 0.0;  // lowest retained score
  long long retained = 0;
};

// Keep the budget highest-scoring units across all adapters; mask the rest
// and zero their lambda. Ties break toward earlier registration, lower index.
inline MaskUpdateResult global_mask_update(const std::vector<Lora2Adapter*>& adapters,
                                           const std::vector<std::vector<double>>& scores,
                                           long long budget) {
  if (adapters.size() != scores.size()) {
    throw std::invalid_argument("global_mask_update: scores for " +
                                std::to_string(scores.size()) + " adapters, got " +
                                std::to_string(adapters.size()));
  }
  long long total = 0;
  for (std::size_t a = 0; a < adapters.size(); ++a) {
    if (static_cast<int>(scores[a].size()) != adapters[a]->r()) {
      throw std::invalid_argument("global_mask_update: score length mismatch at adapter " +
                                  std::to_string(a));
    }
    total += adapters[a]->r();
  }
  if (budget < 1) throw std::invalid_argument("budget must be >= 1");
  if (budget > total) {
    throw std::invalid_argument("budget " + std::to_string(budget) + " exceeds " +
                                std::to_string(total) + " available units");
  }

  struct Unit {
    double score;
    int adapter;
    int index;
  };
  std::vector<Unit> units;
  units.reserve(static_cast<std::size_t>(total));
  for (std::size_t a = 0; a < adapters.size(); ++a) {
    for (int i = 0; i < adapters[a]->r(); ++i) {
      units.push_back(Unit{scores[a][i], static_cast<int>(a), i});
    }
  }
  std::sort(units.begin(), units.end(), [](const Unit& x, const Unit& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.adapter != y.adapter) return x.adapter < y.adapter;
    return x.index < y.index;
  });

  std::vector<std::vector<std::uint8_t>> keep(adapters.size());
  for (std::size_t a = 0; a < adapters.size(); ++a) {
    keep[a].assign(static_cast<std::size_t>(adapters[a]->r()), 0);
  }
  for (long long u = 0; u < budget; ++u) {
    keep[static_cast<std::size_t>(units[u].adapter)][static_cast<std::size_t>(units[u].index)] = 1;
  }
  for (std::size_t a = 0; a < adapters.size(); ++a) {
    for (int i = 0; i < adapters[a]->r(); ++i) set_mask(*adapters[a], i, keep[a][i] != 0);
  }

  MaskUpdateResult res;
  res.threshold = units[budget - 1].score;
  res.retained = budget;
  return res;
}

}  // namespace lora2
