#pragma once

// Define-by-run scalar-output compute graph with exact reverse-mode
// differentiation, plus a central finite-difference gradient checker.
// Graphs are rebuilt per training step; node values are evaluated eagerly
// on construction and can be re-evaluated in tape order after a leaf edit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lora2/matrix.hpp"

namespace lora2 {

using NodeId = int;

// Gradient of the scalar output with respect to each trainable leaf.
using GradientSet = std::map<std::string, Matrix>;

class Graph {
 public:
  enum class Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Hadamard,
    Scale,
    Transpose,
    ColScale,
    Relu,
    Tanh,
    FrobeniusSq,
    AbsSum,
    CrossEntropy,
  };

  NodeId leaf(const std::string& name, Matrix value, bool trainable = true) {
    if (name.empty()) throw std::invalid_argument("leaf name must be non-empty");
    if (leaves_.count(name)) throw std::invalid_argument("duplicate leaf '" + name + "'");
    Node n;
    n.op = Op::Leaf;
    n.name = name;
    n.trainable = trainable;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    const NodeId id = static_cast<NodeId>(nodes_.size()) - 1;
    leaves_.emplace(name, id);
    return id;
  }

  NodeId constant(Matrix value) {
    Node n;
    n.op = Op::Leaf;
    n.trainable = false;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  NodeId matmul(NodeId a, NodeId b) { return binary(Op::MatMul, a, b); }
  NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
  NodeId hadamard(NodeId a, NodeId b) { return binary(Op::Hadamard, a, b); }
  NodeId col_scale(NodeId m, NodeId diag) { return binary(Op::ColScale, m, diag); }

  NodeId scale(NodeId a, double c) {
    if (!std::isfinite(c)) throw std::domain_error("non-finite scale factor");
    Node n;
    n.op = Op::Scale;
    n.inputs = {check_id(a), -1};
    n.factor = c;
    return push_eval(std::move(n));
  }

  NodeId transpose(NodeId a) { return unary(Op::Transpose, a); }
  NodeId relu(NodeId a) { return unary(Op::Relu, a); }
  NodeId tanh(NodeId a) { return unary(Op::Tanh, a); }
  NodeId frobenius_sq(NodeId a) { return unary(Op::FrobeniusSq, a); }
  NodeId abs_sum(NodeId a) { return unary(Op::AbsSum, a); }

  // Mean over rows of -log softmax(logits)[label]; labels are frozen.
  NodeId cross_entropy(NodeId logits, std::vector<int> labels) {
    const Matrix& z = value(check_id(logits));
    if (static_cast<int>(labels.size()) != z.rows()) {
      throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for " + std::to_string(z.rows()) + " rows");
    }
    for (int lab : labels) {
      if (lab < 0 || lab >= z.cols()) {
        throw std::invalid_argument("cross_entropy: label " + std::to_string(lab) +
                                    " out of range [0," + std::to_string(z.cols()) + ")");
      }
    }
    Node n;
    n.op = Op::CrossEntropy;
    n.inputs = {logits, -1};
    n.labels = std::move(labels);
    return push_eval(std::move(n));
  }

  const Matrix& value(NodeId id) const { return nodes_[check_id(id)].value; }
  std::size_t size() const { return nodes_.size(); }
  Op op(NodeId id) const { return nodes_[check_id(id)].op; }

  bool has_leaf(const std::string& name) const { return leaves_.count(name) != 0; }

  NodeId leaf_id(const std::string& name) const {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw std::invalid_argument("unknown leaf '" + name + "'");
    return it->second;
  }

  bool leaf_trainable(const std::string& name) const { return nodes_[leaf_id(name)].trainable; }

  const Matrix& leaf_value(const std::string& name) const { return nodes_[leaf_id(name)].value; }

  void set_leaf(const std::string& name, Matrix value) {
    Node& n = nodes_[leaf_id(name)];
    if (!n.value.same_shape(value)) {
      throw std::invalid_argument("set_leaf '" + name + "': shape " +
                                  shape_str(value.rows(), value.cols()) + " does not match " +
                                  shape_str(n.value.rows(), n.value.cols()));
    }
    n.value = std::move(value);
  }

  std::vector<std::string> trainable_leaves() const {
    std::vector<std::string> out;
    for (const auto& [name, id] : leaves_)
      if (nodes_[id].trainable) out.push_back(name);
    return out;
  }

  // Re-evaluate every non-leaf node in tape order (after a set_leaf).
  void recompute() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op != Op::Leaf) eval(nodes_[i]);
    }
  }

  // Exact reverse-mode gradients of the scalar at `output` for every
  // trainable leaf; frozen leaves receive no entry.
  GradientSet backward(NodeId output) const {
    const Node& out = nodes_[check_id(output)];
    if (out.value.rows() != 1 || out.value.cols() != 1) {
      throw std::invalid_argument("backward: output is " +
                                  shape_str(out.value.rows(), out.value.cols()) +
                                  ", expected a 1x1 scalar");
    }
    std::vector<Matrix> grads(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      grads[i] = Matrix(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
    grads[output](0, 0) = 1.0;

    for (int i = output; i >= 0; --i) {
      const Node& n = nodes_[i];
      if (n.op == Op::Leaf) continue;
      const Matrix& up = grads[i];
      const NodeId a = n.inputs[0];
      const NodeId b = n.inputs[1];
      if (a >= i || (b >= 0 && b >= i)) {
        throw std::logic_error("graph is not topologically ordered (cycle)");
      }
      switch (n.op) {
        case Op::MatMul:
          accumulate(grads[a], lora2::matmul(up, lora2::transpose(nodes_[b].value)));
          accumulate(grads[b], lora2::matmul(lora2::transpose(nodes_[a].value), up));
          break;
        case Op::Add:
          accumulate(grads[a], up);
          accumulate(grads[b], up);
          break;
        case Op::Sub:
          accumulate(grads[a], up);
          accumulate(grads[b], lora2::scale(up, -1.0));
          break;
        case Op::Hadamard:
          accumulate(grads[a], lora2::hadamard(up, nodes_[b].value));
          accumulate(grads[b], lora2::hadamard(up, nodes_[a].value));
          break;
        case Op::Scale:
          accumulate(grads[a], lora2::scale(up, n.factor));
          break;
        case Op::Transpose:
          accumulate(grads[a], lora2::transpose(up));
          break;
        case Op::ColScale: {
          const Matrix& m = nodes_[a].value;
          const Matrix& d = nodes_[b].value;
          Matrix gm(m.rows(), m.cols());
          Matrix gd(d.rows(), 1);
          for (int r = 0; r < m.rows(); ++r) {
            for (int c = 0; c < m.cols(); ++c) {
              gm(r, c) = up(r, c) * d(c, 0);
              gd(c, 0) += up(r, c) * m(r, c);
            }
          }
          accumulate(grads[a], gm);
          accumulate(grads[b], gd);
          break;
        }
        case Op::Relu: {
          const Matrix& x = nodes_[a].value;
          Matrix g(x.rows(), x.cols());
          for (int r = 0; r < x.rows(); ++r)
            for (int c = 0; c < x.cols(); ++c) g(r, c) = x(r, c) > 0.0 ? up(r, c) : 0.0;
          accumulate(grads[a], g);
          break;
        }
        case Op::Tanh: {
          const Matrix& y = n.value;  // tanh(x)
          Matrix g(y.rows(), y.cols());
          for (int r = 0; r < y.rows(); ++r)
            for (int c = 0; c < y.cols(); ++c) g(r, c) = up(r, c) * (1.0 - y(r, c) * y(r, c));
          accumulate(grads[a], g);
          break;
        }
        case Op::FrobeniusSq:
          accumulate(grads[a], lora2::scale(nodes_[a].value, 2.0 * up(0, 0)));
          break;
        case Op::AbsSum: {
          const Matrix& x = nodes_[a].value;
          Matrix g(x.rows(), x.cols());
          for (int r = 0; r < x.rows(); ++r)
            for (int c = 0; c < x.cols(); ++c) {
              const double v = x(r, c);
              g(r, c) = v > 0.0 ? up(0, 0) : (v < 0.0 ? -up(0, 0) : 0.0);
            }
          accumulate(grads[a], g);
          break;
        }
        case Op::CrossEntropy: {
          const Matrix& z = nodes_[a].value;
          Matrix g(z.rows(), z.cols());
          const double w = up(0, 0) / z.rows();
          for (int r = 0; r < z.rows(); ++r) {
            double zmax = z(r, 0);
            for (int c = 1; c < z.cols(); ++c) zmax = std::max(zmax, z(r, c));
            double denom = 0.0;
            for (int c = 0; c < z.cols(); ++c) denom += std::exp(z(r, c) - zmax);
            for (int c = 0; c < z.cols(); ++c) {
              const double p = std::exp(z(r, c) - zmax) / denom;
              g(r, c) = w * (p - (c == n.labels[r] ? 1.0 : 0.0));
            }
          }
          accumulate(grads[a], g);
          break;
        }
        case Op::Leaf:
          break;
      }
    }

    GradientSet out_set;
    for (const auto& [name, id] : leaves_) {
      if (nodes_[id].trainable) out_set.emplace(name, std::move(grads[id]));
    }
    return out_set;
  }

  // Values of every input feeding a kinked op (relu / abs-sum); used by the
  // finite-difference checker to detect central differences that straddle a
  // non-differentiable point.
  std::vector<Matrix> kink_inputs() const {
    std::vector<Matrix> out;
    for (const auto& n : nodes_) {
      if (n.op == Op::Relu || n.op == Op::AbsSum) out.push_back(nodes_[n.inputs[0]].value);
    }
    return out;
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::array<NodeId, 2> inputs = {-1, -1};
    double factor = 0.0;          // Scale
    std::vector<int> labels;      // CrossEntropy
    std::string name;             // Leaf
    bool trainable = false;       // Leaf
    Matrix value;
  };

  NodeId check_id(NodeId id) const {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
      throw std::invalid_argument("invalid node id " + std::to_string(id));
    }
    return id;
  }

  NodeId unary(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.inputs = {check_id(a), -1};
    return push_eval(std::move(n));
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    Node n;
    n.op = op;
    n.inputs = {check_id(a), check_id(b)};
    return push_eval(std::move(n));
  }

  NodeId push_eval(Node n) {
    eval(n);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  void eval(Node& n) {
    const Matrix& a = nodes_[n.inputs[0]].value;
    switch (n.op) {
      case Op::MatMul:
        n.value = lora2::matmul(a, nodes_[n.inputs[1]].value);
        break;
      case Op::Add:
        n.value = lora2::add(a, nodes_[n.inputs[1]].value);
        break;
      case Op::Sub:
        n.value = lora2::sub(a, nodes_[n.inputs[1]].value);
        break;
      case Op::Hadamard:
        n.value = lora2::hadamard(a, nodes_[n.inputs[1]].value);
        break;
      case Op::ColScale:
        n.value = lora2::col_scale(a, nodes_[n.inputs[1]].value);
        break;
      case Op::Scale:
        n.value = lora2::scale(a, n.factor);
        break;
      case Op::Transpose:
        n.value = lora2::transpose(a);
        break;
      case Op::Relu: {
        Matrix y = a;
        for (int i = 0; i < y.rows(); ++i)
          for (int j = 0; j < y.cols(); ++j) y(i, j) = std::max(0.0, y(i, j));
        n.value = std::move(y);
        break;
      }
      case Op::Tanh: {
        Matrix y = a;
        for (int i = 0; i < y.rows(); ++i)
          for (int j = 0; j < y.cols(); ++j) y(i, j) = std::tanh(y(i, j));
        n.value = std::move(y);
        break;
      }
      case Op::FrobeniusSq:
        n.value = Matrix(1, 1, {lora2::frobenius_sq(a)});
        break;
      case Op::AbsSum:
        n.value = Matrix(1, 1, {lora2::abs_sum(a)});
        break;
      case Op::CrossEntropy: {
        double acc = 0.0;
        for (int r = 0; r < a.rows(); ++r) {
          double zmax = a(r, 0);
          for (int c = 1; c < a.cols(); ++c) zmax = std::max(zmax, a(r, c));
          double denom = 0.0;
          for (int c = 0; c < a.cols(); ++c) denom += std::exp(a(r, c) - zmax);
          acc += zmax + std::log(denom) - a(r, n.labels[r]);
        }
        n.value = Matrix(1, 1, {acc / a.rows()});
        break;
      }
      case Op::Leaf:
        break;
    }
    n.value.ensure_finite("graph evaluation");
  }

  static void accumulate(Matrix& into, const Matrix& g) {
    for (int i = 0; i < into.rows(); ++i)
      for (int j = 0; j < into.cols(); ++j) into(i, j) += g(i, j);
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> leaves_;
};

struct FdReport {
  std::string leaf;
  double max_rel_error = 0.0;  // over entries compared relatively
  double max_abs_error = 0.0;  // over near-zero entries compared absolutely
  int checked = 0;
  int skipped_nondifferentiable = 0;
  bool pass = true;
  int worst_row = -1, worst_col = -1;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

namespace detail {
// True when an entry of a kinked-op input changes sign (or touches zero)
// between the +h and -h evaluations: the central difference spans the kink.
inline bool kink_crossed(const std::vector<Matrix>& plus, const std::vector<Matrix>& minus) {
  for (std::size_t k = 0; k < plus.size(); ++k) {
    for (std::size_t e = 0; e < plus[k].size(); ++e) {
      const double p = plus[k].data()[e];
      const double m = minus[k].data()[e];
      if (p * m < 0.0 || (p == 0.0) != (m == 0.0)) return true;
    }
  }
  return false;
}
}  // namespace detail

// Central finite differences vs analytic gradient for one trainable leaf.
// Entries with |analytic| < 1e-8 are compared absolutely within 1e-8; other
// entries must match within `tolerance` relative error. Perturbations are
// restored, and entries whose difference stencil straddles a relu/abs kink
// are reported as non-differentiable and skipped. With max_entries > 0 only
// a seeded sample of that many entries is probed (for audits of big leaves).
inline FdReport finite_diff_check(Graph& g, NodeId output, const std::string& leaf, double step,
                                  double tolerance, int max_entries = 0,
                                  std::uint64_t sample_seed = 0) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");
  if (!g.leaf_trainable(leaf)) {
    throw std::invalid_argument("finite_diff_check: leaf '" + leaf + "' is frozen");
  }
  g.recompute();
  const GradientSet grads = g.backward(output);
  const Matrix analytic = grads.at(leaf);
  const Matrix base = g.leaf_value(leaf);

  std::vector<std::size_t> picked;
  const std::size_t n_entries = base.size();
  if (max_entries > 0 && static_cast<std::size_t>(max_entries) < n_entries) {
    std::vector<std::size_t> all(n_entries);
    for (std::size_t e = 0; e < n_entries; ++e) all[e] = e;
    std::mt19937_64 rng(sample_seed);
    for (int pick = 0; pick < max_entries; ++pick) {
      const std::size_t swap_with =
          pick + static_cast<std::size_t>(rng() % (n_entries - pick));
      std::swap(all[pick], all[swap_with]);
      picked.push_back(all[pick]);
    }
  } else {
    picked.resize(n_entries);
    for (std::size_t e = 0; e < n_entries; ++e) picked[e] = e;
  }

  FdReport report;
  report.leaf = leaf;
  for (std::size_t entry : picked) {
    const int i = static_cast<int>(entry) / base.cols();
    const int j = static_cast<int>(entry) % base.cols();
    {
      Matrix pert = base;
      pert(i, j) = base(i, j) + step;
      g.set_leaf(leaf, pert);
      g.recompute();
      const double f_plus = g.value(output)(0, 0);
      const std::vector<Matrix> kp = g.kink_inputs();

      pert(i, j) = base(i, j) - step;
      g.set_leaf(leaf, pert);
      g.recompute();
      const double f_minus = g.value(output)(0, 0);
      const std::vector<Matrix> km = g.kink_inputs();

      g.set_leaf(leaf, base);
      if (detail::kink_crossed(kp, km)) {
        ++report.skipped_nondifferentiable;
        continue;
      }

      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic(i, j);
      ++report.checked;
      bool entry_ok;
      if (std::abs(a) < 1e-8) {
        const double err = std::abs(a - numeric);
        report.max_abs_error = std::max(report.max_abs_error, err);
        entry_ok = err <= 1e-8;
      } else {
        const double err = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
        if (err > report.max_rel_error) {
          report.max_rel_error = err;
          report.worst_row = i;
          report.worst_col = j;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
        entry_ok = err <= tolerance;
      }
      if (!entry_ok) report.pass = false;
    }
  }
  g.recompute();
  return report;
}

}  // namespace lora2
