#pragma once

// Incremental-update parametrizations over a frozen base weight:
//   low-rank pair        delta = b . a
//   svd-style triple     delta = p . diag(lambda) . q
//   five-factor chain    delta = u_out . u_in . diag(lambda) . v_in . v_out
// The five-factor chain keeps the two large outer factors (din x k, k x dout)
// out of sensitivity tracking; the prunable unit is one diagonal entry of
// lambda together with its mask bit. delta is exactly zero right after init.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lora2/autodiff.hpp"
#include "lora2/matrix.hpp"

namespace lora2 {

struct Lora2Config {
  int din = 0;
  int dout = 0;
  int k = 1;       // projection width shared by the outer factor pair
  int r_init = 1;  // initial rank of the diagonal core
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (din < 1 || dout < 1) throw std::invalid_argument("adapter dims must be positive");
    if (k < 1) throw std::invalid_argument("projection width k must be >= 1");
    if (r_init < 1) throw std::invalid_argument("initial rank must be >= 1");
    if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
  }
};

struct Lora2Adapter {
  Matrix u_out;   // din x k, outer-left, untracked by sensitivity scoring
  Matrix u_in;    // k x r, inner-left
  Matrix lambda;  // r x 1 diagonal core
  Matrix v_in;    // r x k, inner-right
  Matrix v_out;   // k x dout, outer-right, untracked
  std::vector<std::uint8_t> mask;  // retained singular-value flags

  int din() const { return u_out.rows(); }
  int dout() const { return v_out.cols(); }
  int k() const { return u_out.cols(); }
  int r() const { return lambda.rows(); }
};

inline Lora2Adapter init_lora2(const Lora2Config& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  Lora2Adapter ad;
  ad.u_out = Matrix::gaussian(cfg.din, cfg.k, cfg.init_std, rng);
  ad.u_in = Matrix::gaussian(cfg.k, cfg.r_init, cfg.init_std, rng);
  ad.lambda = Matrix(cfg.r_init, 1);
  ad.v_in = Matrix::gaussian(cfg.r_init, cfg.k, cfg.init_std, rng);
  ad.v_out = Matrix::gaussian(cfg.k, cfg.dout, cfg.init_std, rng);
  ad.mask.assign(static_cast<std::size_t>(cfg.r_init), 1);
  return ad;
}

// Masked indices always carry lambda == 0; reviving a mask bit leaves the
// zeroed lambda in place so the unit relearns from scratch.
inline void set_mask(Lora2Adapter& ad, int i, bool keep) {
  if (i < 0 || i >= ad.r()) throw std::invalid_argument("mask index out of range");
  ad.mask[i] = keep ? 1 : 0;
  if (!keep) ad.lambda(i, 0) = 0.0;
}

inline Matrix masked_lambda(const Lora2Adapter& ad) {
  Matrix out = ad.lambda;
  for (int i = 0; i < ad.r(); ++i) {
    if (!ad.mask[i]) out(i, 0) = 0.0;
  }
  return out;
}

inline Matrix delta_matrix(const Lora2Adapter& ad) {
  const Matrix plane = matmul(ad.u_out, ad.u_in);       // din x r
  const Matrix scaled = col_scale(plane, masked_lambda(ad));
  return matmul(matmul(scaled, ad.v_in), ad.v_out);     // din x dout
}

inline int effective_rank(const Lora2Adapter& ad) {
  int n = 0;
  for (std::uint8_t m : ad.mask) n += m ? 1 : 0;
  return n;
}

struct LoraConfig {
  int din = 0;
  int dout = 0;
  int r = 1;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (din < 1 || dout < 1) throw std::invalid_argument("adapter dims must be positive");
    if (r < 1) throw std::invalid_argument("rank must be >= 1");
    if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
  }
};

struct LoraAdapter {
  Matrix b;  // din x r, zero at init so the product starts at zero
  Matrix a;  // r x dout, Gaussian

  int din() const { return b.rows(); }
  int dout() const { return a.cols(); }
  int r() const { return b.cols(); }
};

inline LoraAdapter init_lora(const LoraConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  LoraAdapter ad;
  ad.b = Matrix(cfg.din, cfg.r);
  ad.a = Matrix::gaussian(cfg.r, cfg.dout, cfg.init_std, rng);
  return ad;
}

inline Matrix delta_matrix(const LoraAdapter& ad) { return matmul(ad.b, ad.a); }

struct SvdConfig {
  int din = 0;
  int dout = 0;
  int r = 1;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (din < 1 || dout < 1) throw std::invalid_argument("adapter dims must be positive");
    if (r < 1) throw std::invalid_argument("rank must be >= 1");
    if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
  }
};

struct SvdAdapter {
  Matrix p;       // din x r, Gaussian
  Matrix lambda;  // r x 1, zero at init
  Matrix q;       // r x dout, Gaussian
  std::vector<std::uint8_t> mask;

  int din() const { return p.rows(); }
  int dout() const { return q.cols(); }
  int r() const { return lambda.rows(); }
};

inline SvdAdapter init_svd(const SvdConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  SvdAdapter ad;
  ad.p = Matrix::gaussian(cfg.din, cfg.r, cfg.init_std, rng);
  ad.lambda = Matrix(cfg.r, 1);
  ad.q = Matrix::gaussian(cfg.r, cfg.dout, cfg.init_std, rng);
  ad.mask.assign(static_cast<std::size_t>(cfg.r), 1);
  return ad;
}

inline void set_mask(SvdAdapter& ad, int i, bool keep) {
  if (i < 0 || i >= ad.r()) throw std::invalid_argument("mask index out of range");
  ad.mask[i] = keep ? 1 : 0;
  if (!keep) ad.lambda(i, 0) = 0.0;
}

inline Matrix masked_lambda(const SvdAdapter& ad) {
  Matrix out = ad.lambda;
  for (int i = 0; i < ad.r(); ++i) {
    if (!ad.mask[i]) out(i, 0) = 0.0;
  }
  return out;
}

inline Matrix delta_matrix(const SvdAdapter& ad) {
  return matmul(col_scale(ad.p, masked_lambda(ad)), ad.q);
}

inline int effective_rank(const SvdAdapter& ad) {
  int n = 0;
  for (std::uint8_t m : ad.mask) n += m ? 1 : 0;
  return n;
}

inline long long param_count(const Lora2Adapter& ad) {
  const long long din = ad.din(), dout = ad.dout(), k = ad.k(), r = ad.r();
  return din * k + k * r + r + r * k + k * dout;
}

inline long long param_count(const LoraAdapter& ad) {
  const long long din = ad.din(), dout = ad.dout(), r = ad.r();
  return din * r + r * dout;
}

inline long long param_count(const SvdAdapter& ad) {
  const long long din = ad.din(), dout = ad.dout(), r = ad.r();
  return din * r + r + r * dout;
}

inline long long param_count(const Lora2Config& cfg) {
  const long long din = cfg.din, dout = cfg.dout, k = cfg.k, r = cfg.r_init;
  return din * k + k * r + r + r * k + k * dout;
}

// Entries whose sensitivity statistics are skipped: the two outer factors.
inline long long outer_entry_count(const Lora2Config& cfg) {
  return static_cast<long long>(cfg.din) * cfg.k + static_cast<long long>(cfg.k) * cfg.dout;
}

// x . (w0 + delta), evaluated factor by factor without materializing delta.
inline Matrix adapted_forward(const Lora2Adapter& ad, const Matrix& w0, const Matrix& x) {
  if (w0.rows() != ad.din() || w0.cols() != ad.dout()) {
    throw std::invalid_argument("adapted_forward: base weight is " +
                                shape_str(w0.rows(), w0.cols()) + ", adapter expects " +
                                shape_str(ad.din(), ad.dout()));
  }
  const Matrix base = matmul(x, w0);
  Matrix h = matmul(x, ad.u_out);
  h = matmul(h, ad.u_in);
  h = col_scale(h, masked_lambda(ad));
  h = matmul(h, ad.v_in);
  h = matmul(h, ad.v_out);
  return add(base, h);
}

inline Matrix merge_into_base(const Lora2Adapter& ad, const Matrix& w0) {
  if (w0.rows() != ad.din() || w0.cols() != ad.dout()) {
    throw std::invalid_argument("merge_into_base: base weight is " +
                                shape_str(w0.rows(), w0.cols()) + ", adapter expects " +
                                shape_str(ad.din(), ad.dout()));
  }
  return add(w0, delta_matrix(ad));
}

inline Matrix merge_into_base(const LoraAdapter& ad, const Matrix& w0) {
  return add(w0, delta_matrix(ad));
}

inline Matrix merge_into_base(const SvdAdapter& ad, const Matrix& w0) {
  return add(w0, delta_matrix(ad));
}

// Graph-side registration: trainable leaves named "<prefix>.<factor>", plus a
// frozen 0/1 mask column so masked lambda entries receive zero gradient.
struct Lora2Leaves {
  NodeId u_out = -1, u_in = -1, lambda = -1, v_in = -1, v_out = -1;
  NodeId masked_lambda = -1;
};

inline Lora2Leaves register_leaves(Graph& g, const std::string& prefix, const Lora2Adapter& ad) {
  Lora2Leaves l;
  l.u_out = g.leaf(prefix + ".u_out", ad.u_out);
  l.u_in = g.leaf(prefix + ".u_in", ad.u_in);
  l.lambda = g.leaf(prefix + ".lambda", ad.lambda);
  l.v_in = g.leaf(prefix + ".v_in", ad.v_in);
  l.v_out = g.leaf(prefix + ".v_out", ad.v_out);
  Matrix m(ad.r(), 1);
  for (int i = 0; i < ad.r(); ++i) m(i, 0) = ad.mask[i] ? 1.0 : 0.0;
  l.masked_lambda = g.hadamard(l.lambda, g.constant(std::move(m)));
  return l;
}

inline NodeId apply_delta(Graph& g, const Lora2Leaves& l, NodeId h) {
  NodeId t = g.matmul(h, l.u_out);
  t = g.matmul(t, l.u_in);
  t = g.col_scale(t, l.masked_lambda);
  t = g.matmul(t, l.v_in);
  return g.matmul(t, l.v_out);
}

struct LoraLeaves {
  NodeId b = -1, a = -1;
};

inline LoraLeaves register_leaves(Graph& g, const std::string& prefix, const LoraAdapter& ad) {
  LoraLeaves l;
  l.b = g.leaf(prefix + ".b", ad.b);
  l.a = g.leaf(prefix + ".a", ad.a);
  return l;
}

inline NodeId apply_delta(Graph& g, const LoraLeaves& l, NodeId h) {
  return g.matmul(g.matmul(h, l.b), l.a);
}

struct SvdLeaves {
  NodeId p = -1, lambda = -1, q = -1;
  NodeId masked_lambda = -1;
};

inline SvdLeaves register_leaves(Graph& g, const std::string& prefix, const SvdAdapter& ad) {
  SvdLeaves l;
  l.p = g.leaf(prefix + ".p", ad.p);
  l.lambda = g.leaf(prefix + ".lambda", ad.lambda);
  l.q = g.leaf(prefix + ".q", ad.q);
  Matrix m(ad.r(), 1);
  for (int i = 0; i < ad.r(); ++i) m(i, 0) = ad.mask[i] ? 1.0 : 0.0;
  l.masked_lambda = g.hadamard(l.lambda, g.constant(std::move(m)));
  return l;
}

inline NodeId apply_delta(Graph& g, const SvdLeaves& l, NodeId h) {
  NodeId t = g.col_scale(g.matmul(h, l.p), l.masked_lambda);
  return g.matmul(t, l.q);
}

}  // namespace lora2
