#pragma once

// Frozen stacked models with named adapter attachment sites, synthetic
// planted-increment tasks with known ground truth, losses, and a plain-text
// dataset format for cross-implementation fixtures.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lora2/adapters.hpp"
#include "lora2/matrix.hpp"

namespace lora2 {

enum class Nonlinearity { None, Rectifier, Saturating };

inline const char* nonlinearity_name(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::None: return "none";
    case Nonlinearity::Rectifier: return "rectifier";
    case Nonlinearity::Saturating: return "saturating";
  }
  throw std::logic_error("unreachable nonlinearity");
}

inline Nonlinearity nonlinearity_from_name(const std::string& s) {
  if (s == "none") return Nonlinearity::None;
  if (s == "rectifier") return Nonlinearity::Rectifier;
  if (s == "saturating") return Nonlinearity::Saturating;
  throw std::invalid_argument("unknown nonlinearity '" + s + "'");
}

struct Site {
  std::string name;
  Matrix w0;
};

// Sites apply in order; the nonlinearity sits between consecutive sites,
// never after the last one.
struct ModelSpec {
  std::vector<Site> sites;
  Nonlinearity nonlinearity = Nonlinearity::Rectifier;

  int input_dim() const { return sites.front().w0.rows(); }
  int output_dim() const { return sites.back().w0.cols(); }

  int site_index(const std::string& name) const {
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (sites[i].name == name) return static_cast<int>(i);
    }
    throw std::invalid_argument("unknown site '" + name + "'");
  }

  const Site& site(const std::string& name) const {
    return sites[static_cast<std::size_t>(site_index(name))];
  }

  void validate() const {
    if (sites.empty()) throw std::invalid_argument("model needs at least one site");
    for (std::size_t i = 1; i < sites.size(); ++i) {
      if (sites[i - 1].w0.cols() != sites[i].w0.rows()) {
        throw std::invalid_argument("sites '" + sites[i - 1].name + "' and '" + sites[i].name +
                                    "' do not compose");
      }
    }
  }
};

inline const std::vector<std::string>& site_kinds() {
  static const std::vector<std::string> kinds = {"Wq", "Wk", "Wv", "f1", "f2"};
  return kinds;
}

// layers x {Wq, Wk, Wv, f1, f2}; attention-kind sites are dim x dim, the
// feed-forward pair expands to ff_dim and back. Frozen weights are Gaussian
// with std 1/sqrt(fan_in).
inline ModelSpec build_stack(int layers, int dim, int ff_dim, Nonlinearity nl,
                             std::uint64_t seed) {
  if (layers < 1 || dim < 1 || ff_dim < 1) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  ModelSpec spec;
  spec.nonlinearity = nl;
  for (int l = 0; l < layers; ++l) {
    const std::string p = "L" + std::to_string(l) + ".";
    for (const std::string& kind : site_kinds()) {
      const int rows = kind == "f2" ? ff_dim : dim;
      const int cols = kind == "f1" ? ff_dim : dim;
      spec.sites.push_back(Site{p + kind, Matrix::gaussian(rows, cols, 1.0 / std::sqrt(rows), rng)});
    }
  }
  return spec;
}

inline Matrix apply_nonlinearity(const Matrix& h, Nonlinearity nl) {
  if (nl == Nonlinearity::None) return h;
  Matrix out = h;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double& v = out.data()[i];
    v = nl == Nonlinearity::Rectifier ? std::max(0.0, v) : std::tanh(v);
  }
  return out;
}

inline Matrix frozen_forward(const ModelSpec& spec, const Matrix& x) {
  spec.validate();
  Matrix h = x;
  for (std::size_t i = 0; i < spec.sites.size(); ++i) {
    if (i > 0) h = apply_nonlinearity(h, spec.nonlinearity);
    h = matmul(h, spec.sites[i].w0);
  }
  return h;
}

// Forward with per-site additive increments already materialized.
inline Matrix forward_with_deltas(const ModelSpec& spec,
                                  const std::map<std::string, Matrix>& deltas, const Matrix& x) {
  spec.validate();
  for (const auto& [name, delta] : deltas) (void)spec.site_index(name);
  Matrix h = x;
  for (std::size_t i = 0; i < spec.sites.size(); ++i) {
    if (i > 0) h = apply_nonlinearity(h, spec.nonlinearity);
    auto it = deltas.find(spec.sites[i].name);
    if (it == deltas.end()) {
      h = matmul(h, spec.sites[i].w0);
    } else {
      h = matmul(h, add(spec.sites[i].w0, it->second));
    }
  }
  return h;
}

inline Matrix model_forward(const ModelSpec& spec,
                            const std::map<std::string, const Lora2Adapter*>& adapters,
                            const Matrix& x) {
  spec.validate();
  for (const auto& [name, ad] : adapters) spec.site_index(name);
  Matrix h = x;
  for (std::size_t i = 0; i < spec.sites.size(); ++i) {
    if (i > 0) h = apply_nonlinearity(h, spec.nonlinearity);
    auto it = adapters.find(spec.sites[i].name);
    if (it == adapters.end()) {
      h = matmul(h, spec.sites[i].w0);
    } else {
      h = adapted_forward(*it->second, spec.sites[i].w0, h);
    }
  }
  return h;
}

enum class LossKind { Mse, CrossEntropy };

inline const char* loss_kind_name(LossKind k) {
  return k == LossKind::Mse ? "mse" : "xent";
}

inline LossKind loss_kind_from_name(const std::string& s) {
  if (s == "mse") return LossKind::Mse;
  if (s == "xent") return LossKind::CrossEntropy;
  throw std::invalid_argument("unknown loss kind '" + s + "'");
}

struct Batch {
  Matrix x;
  Matrix y;                 // regression targets (unused for labels)
  std::vector<int> labels;  // classification targets (unused for regression)
  LossKind kind = LossKind::Mse;

  int n() const { return x.rows(); }

  void validate() const {
    if (kind == LossKind::Mse) {
      if (y.rows() != x.rows()) throw std::invalid_argument("batch x/y row mismatch");
    } else if (static_cast<int>(labels.size()) != x.rows()) {
      throw std::invalid_argument("batch x/label row mismatch");
    }
  }
};

inline double task_loss(const Matrix& pred, const Batch& batch) {
  batch.validate();
  if (batch.kind == LossKind::Mse) {
    check_same_shape(pred, batch.y, "task_loss");
    const Matrix d = sub(pred, batch.y);
    return frobenius_sq(d) / static_cast<double>(d.size());
  }
  if (pred.rows() != static_cast<int>(batch.labels.size())) {
    throw std::invalid_argument("task_loss: logits rows do not match label count");
  }
  double acc = 0.0;
  for (int r = 0; r < pred.rows(); ++r) {
    const int lab = batch.labels[static_cast<std::size_t>(r)];
    if (lab < 0 || lab >= pred.cols()) {
      throw std::invalid_argument("task_loss: label " + std::to_string(lab) + " out of range");
    }
    double zmax = pred(r, 0);
    for (int c = 1; c < pred.cols(); ++c) zmax = std::max(zmax, pred(r, c));
    double denom = 0.0;
    for (int c = 0; c < pred.cols(); ++c) denom += std::exp(pred(r, c) - zmax);
    acc += zmax + std::log(denom) - pred(r, lab);
  }
  return acc / pred.rows();
}

// A single-matrix regression problem with a known low-rank increment:
// y = x . (w0 + delta_star) + noise, where delta_star has rank exactly rho
// and unit Frobenius norm (zero when rho == 0).
struct PlantedTask {
  Matrix w0;
  Matrix delta_star;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

// Sum of rho outer products of unit-norm Gaussian vectors, rescaled to unit
// Frobenius norm.
inline Matrix planted_increment(int din, int dout, int rho, std::mt19937_64& rng) {
  if (rho < 0 || rho > std::min(din, dout)) {
    throw std::invalid_argument("planted rank " + std::to_string(rho) + " invalid for " +
                                shape_str(din, dout));
  }
  Matrix delta(din, dout);
  if (rho == 0) return delta;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int t = 0; t < rho; ++t) {
    std::vector<double> l(static_cast<std::size_t>(din)), r(static_cast<std::size_t>(dout));
    double ln = 0.0, rn = 0.0;
    for (double& v : l) {
      v = gauss(rng);
      ln += v * v;
    }
    for (double& v : r) {
      v = gauss(rng);
      rn += v * v;
    }
    ln = std::sqrt(ln);
    rn = std::sqrt(rn);
    for (int i = 0; i < din; ++i)
      for (int j = 0; j < dout; ++j) delta(i, j) += (l[i] / ln) * (r[j] / rn);
  }
  const double norm = std::sqrt(frobenius_sq(delta));
  return scale(delta, 1.0 / norm);
}

inline PlantedTask gen_planted_task(int din, int dout, int rho, double noise_std,
                                    std::uint64_t seed) {
  if (din < 1 || dout < 1) throw std::invalid_argument("task dims must be positive");
  if (noise_std < 0.0) throw std::invalid_argument("noise_std must be non-negative");
  std::mt19937_64 rng(seed);
  PlantedTask task;
  task.noise_std = noise_std;
  task.seed = seed;
  task.w0 = Matrix::gaussian(din, dout, 1.0 / std::sqrt(din), rng);
  task.delta_star = planted_increment(din, dout, rho, rng);
  return task;
}

inline Batch sample_planted_batch(const PlantedTask& task, int n, std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("batch size must be positive");
  Batch b;
  b.kind = LossKind::Mse;
  b.x = Matrix::gaussian(n, task.w0.rows(), 1.0, rng);
  b.y = matmul(b.x, add(task.w0, task.delta_star));
  if (task.noise_std > 0.0) {
    const Matrix noise = Matrix::gaussian(n, task.w0.cols(), task.noise_std, rng);
    b.y = add(b.y, noise);
  }
  return b;
}

// Plain-text dataset: header "din dout n kind", then one sample per line with
// din inputs followed by dout targets (mse) or one integer label (xent).
// Values print with 17 significant digits so a round trip is value-exact.
inline void save_dataset(const std::string& path, const Batch& batch) {
  batch.validate();
  const int din = batch.x.cols();
  int dout = batch.y.cols();
  if (batch.kind == LossKind::CrossEntropy && dout == 0) {
    for (int lab : batch.labels) dout = std::max(dout, lab + 1);
  }
  std::ostringstream out;
  out.setf(std::ios::scientific);
  out.precision(16);
  out << din << ' ' << dout << ' ' << batch.n() << ' ' << loss_kind_name(batch.kind) << '\n';
  for (int i = 0; i < batch.n(); ++i) {
    for (int j = 0; j < din; ++j) {
      if (j) out << ' ';
      out << batch.x(i, j);
    }
    if (batch.kind == LossKind::Mse) {
      for (int j = 0; j < dout; ++j) out << ' ' << batch.y(i, j);
    } else {
      out << ' ' << batch.labels[static_cast<std::size_t>(i)];
    }
    out << '\n';
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << out.str();
  if (!f.flush()) throw std::runtime_error("write failed for '" + path + "'");
}

inline Batch load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  int din = 0, dout = 0, n = 0;
  std::string kind;
  if (!(f >> din >> dout >> n >> kind)) {
    throw std::runtime_error("malformed dataset header in '" + path + "'");
  }
  if (din < 1 || dout < 1 || n < 1) throw std::runtime_error("invalid dataset dims in '" + path + "'");
  Batch b;
  b.kind = loss_kind_from_name(kind);
  b.x = Matrix(n, din);
  if (b.kind == LossKind::Mse) {
    b.y = Matrix(n, dout);
  } else {
    b.y = Matrix(n, dout);  // class count carried by dout; targets live in labels
    b.labels.assign(static_cast<std::size_t>(n), 0);
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < din; ++j) {
      if (!(f >> b.x(i, j))) throw std::runtime_error("truncated dataset '" + path + "'");
    }
    if (b.kind == LossKind::Mse) {
      for (int j = 0; j < dout; ++j) {
        if (!(f >> b.y(i, j))) throw std::runtime_error("truncated dataset '" + path + "'");
      }
    } else {
      int lab = 0;
      if (!(f >> lab)) throw std::runtime_error("truncated dataset '" + path + "'");
      if (lab < 0 || lab >= dout) throw std::runtime_error("label out of range in '" + path + "'");
      b.labels[static_cast<std::size_t>(i)] = lab;
    }
  }
  b.x.ensure_finite("dataset load");
  b.y.ensure_finite("dataset load");
  return b;
}

}  // namespace lora2
