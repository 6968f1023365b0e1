#pragma once

// Soft orthogonality penalties on adapter factors: each operand contributes
// ||G^T G - I||_F^2 where G is the operand oriented so rows >= cols (the Gram
// matrix is always the smaller square). Selectable operand sets range from
// the two factors of one plane to all four factors plus both composites.

#include <stdexcept>
#include <string>
#include <vector>

#include "lora2/adapters.hpp"
#include "lora2/autodiff.hpp"
#include "lora2/matrix.hpp"

namespace lora2 {

enum class OrthMode {
  InnerLeftPair,   // u_out, u_in
  InnerRightPair,  // v_in, v_out
  BothPairs,       // all four factors
  Composite,       // P = u_out.u_in, Q = v_in.v_out
  All,             // BothPairs plus Composite
};

inline const char* orth_mode_name(OrthMode m) {
  switch (m) {
    case OrthMode::InnerLeftPair: return "inner_left";
    case OrthMode::InnerRightPair: return "inner_right";
    case OrthMode::BothPairs: return "both_pairs";
    case OrthMode::Composite: return "composite";
    case OrthMode::All: return "all";
  }
  throw std::logic_error("unreachable orth mode");
}

inline OrthMode orth_mode_from_name(const std::string& s) {
  if (s == "inner_left") return OrthMode::InnerLeftPair;
  if (s == "inner_right") return OrthMode::InnerRightPair;
  if (s == "both_pairs") return OrthMode::BothPairs;
  if (s == "composite") return OrthMode::Composite;
  if (s == "all") return OrthMode::All;
  throw std::invalid_argument("unknown orth mode '" + s + "'");
}

inline double gram_penalty(const Matrix& m) {
  const Matrix g = m.rows() >= m.cols() ? m : transpose(m);
  const Matrix gram = matmul(transpose(g), g);
  return frobenius_sq(sub(gram, Matrix::identity(gram.rows())));
}

inline NodeId gram_penalty_node(Graph& g, NodeId m) {
  const Matrix& v = g.value(m);
  const NodeId oriented = v.rows() >= v.cols() ? m : g.transpose(m);
  const int side = g.value(oriented).cols();
  const NodeId gram = g.matmul(g.transpose(oriented), oriented);
  return g.frobenius_sq(g.sub(gram, g.constant(Matrix::identity(side))));
}

namespace detail {

inline std::vector<Matrix> orth_operands(const Lora2Adapter& ad, OrthMode mode) {
  std::vector<Matrix> ops;
  const bool factors = mode == OrthMode::InnerLeftPair || mode == OrthMode::InnerRightPair ||
                       mode == OrthMode::BothPairs || mode == OrthMode::All;
  if (factors && mode != OrthMode::InnerRightPair) {
    ops.push_back(ad.u_out);
    ops.push_back(ad.u_in);
  }
  if (factors && mode != OrthMode::InnerLeftPair) {
    ops.push_back(ad.v_in);
    ops.push_back(ad.v_out);
  }
  if (mode == OrthMode::Composite || mode == OrthMode::All) {
    ops.push_back(matmul(ad.u_out, ad.u_in));
    ops.push_back(matmul(ad.v_in, ad.v_out));
  }
  return ops;
}

}  // namespace detail

// One penalty value per operand of the mode, in a fixed order
// (u_out, u_in, v_in, v_out, P, Q restricted to the mode's set).
inline std::vector<double> gram_terms(const Lora2Adapter& ad, OrthMode mode) {
  std::vector<double> out;
  for (const Matrix& m : detail::orth_operands(ad, mode)) out.push_back(gram_penalty(m));
  return out;
}

inline double orth_loss(const Lora2Adapter& ad, OrthMode mode, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("gamma must be non-negative");
  if (gamma == 0.0) return 0.0;
  double sum = 0.0;
  for (double t : gram_terms(ad, mode)) sum += t;
  return gamma * sum;
}

// Graph form: gamma * sum of penalties over the mode's operands, built on the
// already-registered factor leaves so gradients reach every participant.
inline NodeId orth_loss_node(Graph& g, const Lora2Leaves& l, OrthMode mode, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("gamma must be non-negative");
  std::vector<NodeId> operands;
  const bool factors = mode == OrthMode::InnerLeftPair || mode == OrthMode::InnerRightPair ||
                       mode == OrthMode::BothPairs || mode == OrthMode::All;
  if (factors && mode != OrthMode::InnerRightPair) {
    operands.push_back(l.u_out);
    operands.push_back(l.u_in);
  }
  if (factors && mode != OrthMode::InnerLeftPair) {
    operands.push_back(l.v_in);
    operands.push_back(l.v_out);
  }
  if (mode == OrthMode::Composite || mode == OrthMode::All) {
    operands.push_back(g.matmul(l.u_out, l.u_in));
    operands.push_back(g.matmul(l.v_in, l.v_out));
  }
  NodeId sum = -1;
  for (NodeId m : operands) {
    const NodeId term = gram_penalty_node(g, m);
    sum = sum < 0 ? term : g.add(sum, term);
  }
  return g.scale(sum, gamma);
}

}  // namespace lora2
