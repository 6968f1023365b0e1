#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "lora2/autodiff.hpp"
#include "testutil.hpp"

using lora2::Graph;
using lora2::Matrix;
using lora2::NodeId;

TEST(Autodiff, MatmulResidualGradientClosedForm) {
  // f = ||AB - C||_F^2, df/dA = 2(AB - C)B^T, df/dB = 2A^T(AB - C).
  std::mt19937_64 rng(3);
  const Matrix a = testutil::random_matrix(4, 3, rng);
  const Matrix b = testutil::random_matrix(3, 5, rng);
  const Matrix c = testutil::random_matrix(4, 5, rng);

  Graph g;
  const NodeId na = g.leaf("a", a);
  const NodeId nb = g.leaf("b", b);
  const NodeId nc = g.constant(c);
  const NodeId loss = g.frobenius_sq(g.sub(g.matmul(na, nb), nc));
  const lora2::GradientSet grads = g.backward(loss);

  const Matrix resid = lora2::sub(lora2::matmul(a, b), c);
  const Matrix want_a = lora2::scale(lora2::matmul(resid, lora2::transpose(b)), 2.0);
  const Matrix want_b = lora2::scale(lora2::matmul(lora2::transpose(a), resid), 2.0);
  EXPECT_LT(lora2::max_abs_diff(grads.at("a"), want_a), 1e-12);
  EXPECT_LT(lora2::max_abs_diff(grads.at("b"), want_b), 1e-12);
}

TEST(Autodiff, BackwardIsLinearInUpstream) {
  // Scaling the scalar output scales every gradient by the same factor.
  std::mt19937_64 rng(5);
  Graph g;
  const NodeId na = g.leaf("a", testutil::random_matrix(3, 3, rng));
  const NodeId nb = g.leaf("b", testutil::random_matrix(3, 3, rng));
  const NodeId base = g.frobenius_sq(g.tanh(g.matmul(na, nb)));
  const NodeId scaled = g.scale(base, 3.5);
  const lora2::GradientSet g1 = g.backward(base);
  const lora2::GradientSet g2 = g.backward(scaled);
  for (const auto& [name, grad] : g1) {
    EXPECT_LT(lora2::max_abs_diff(g2.at(name), lora2::scale(grad, 3.5)), 1e-12) << name;
  }
}

TEST(Autodiff, FiniteDifferenceOnRandomCompositions) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed * 7919 + 1);
    Graph g;
    const NodeId a = g.leaf("a", testutil::random_matrix(4, 3, rng));
    const NodeId b = g.leaf("b", testutil::random_matrix(3, 4, rng));
    const NodeId d = g.leaf("d", testutil::random_matrix(4, 1, rng));
    const NodeId c = g.constant(testutil::random_matrix(4, 4, rng));

    NodeId h = g.matmul(a, b);
    switch (seed % 5) {
      case 0: h = g.tanh(h); break;
      case 1: h = g.relu(h); break;
      case 2: h = g.hadamard(h, c); break;
      case 3: h = g.add(h, c); break;
      case 4: h = g.matmul(g.transpose(h), h); break;
    }
    h = g.col_scale(g.matmul(h, c), d);
    const NodeId loss =
        seed % 2 ? g.abs_sum(h) : g.scale(g.frobenius_sq(g.sub(h, c)), 0.25);

    for (const std::string& leaf : g.trainable_leaves()) {
      const lora2::FdReport rep = lora2::finite_diff_check(g, loss, leaf, 1e-6, 1e-5);
      EXPECT_TRUE(rep.pass) << "seed " << seed << " leaf " << leaf << " rel "
                            << rep.max_rel_error << " analytic " << rep.worst_analytic
                            << " numeric " << rep.worst_numeric;
      EXPECT_GT(rep.checked, 0);
    }
  }
}

TEST(Autodiff, ReluKinkEntriesAreSkipped) {
  Graph g;
  Matrix v(2, 2);
  v(0, 0) = 0.0;  // exactly on the kink
  v(0, 1) = 1.0;
  v(1, 0) = -1.0;
  v(1, 1) = 2.0;
  const NodeId a = g.leaf("a", v);
  const NodeId loss = g.frobenius_sq(g.relu(a));
  const lora2::FdReport rep = lora2::finite_diff_check(g, loss, "a", 1e-6, 1e-5);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.skipped_nondifferentiable, 1);
  EXPECT_EQ(rep.checked, 3);
}

TEST(Autodiff, AbsSumSignCrossingSkipped) {
  Graph g;
  Matrix v(1, 3);
  v(0, 0) = 5e-8;  // sign flips under a 1e-6 step
  v(0, 1) = 0.5;
  v(0, 2) = -0.5;
  const NodeId a = g.leaf("a", v);
  const NodeId loss = g.abs_sum(a);
  const lora2::FdReport rep = lora2::finite_diff_check(g, loss, "a", 1e-6, 1e-5);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.skipped_nondifferentiable, 1);
  EXPECT_EQ(rep.checked, 2);
}

TEST(Autodiff, CrossEntropyGradientIsSoftmaxMinusOnehot) {
  Graph g;
  const Matrix logits = Matrix::from_rows({{1.0, 2.0, 0.5}, {-1.0, 0.0, 3.0}});
  const std::vector<int> labels{1, 2};
  const NodeId z = g.leaf("z", logits);
  const NodeId loss = g.cross_entropy(z, labels);
  const lora2::GradientSet grads = g.backward(loss);

  Matrix want(2, 3);
  for (int i = 0; i < 2; ++i) {
    double mx = logits(i, 0);
    for (int j = 1; j < 3; ++j) mx = std::max(mx, logits(i, j));
    double denom = 0.0;
    for (int j = 0; j < 3; ++j) denom += std::exp(logits(i, j) - mx);
    for (int j = 0; j < 3; ++j) {
      want(i, j) = (std::exp(logits(i, j) - mx) / denom - (labels[i] == j ? 1.0 : 0.0)) / 2.0;
    }
  }
  EXPECT_LT(lora2::max_abs_diff(grads.at("z"), want), 1e-12);

  const lora2::FdReport rep = lora2::finite_diff_check(g, loss, "z", 1e-6, 1e-6);
  EXPECT_TRUE(rep.pass) << rep.max_rel_error;
}

TEST(Autodiff, CrossEntropyValidatesLabels) {
  Graph g;
  const NodeId z = g.leaf("z", Matrix(2, 3));
  EXPECT_THROW(g.cross_entropy(z, {0}), std::invalid_argument);
  EXPECT_THROW(g.cross_entropy(z, {0, 3}), std::invalid_argument);
  EXPECT_THROW(g.cross_entropy(z, {0, -1}), std::invalid_argument);
}

TEST(Autodiff, BackwardRequiresScalarOutput) {
  Graph g;
  const NodeId a = g.leaf("a", Matrix(2, 2));
  EXPECT_THROW(g.backward(a), std::invalid_argument);
}

TEST(Autodiff, DuplicateOrEmptyLeafNamesRejected) {
  Graph g;
  g.leaf("a", Matrix(1, 1));
  EXPECT_THROW(g.leaf("a", Matrix(1, 1)), std::invalid_argument);
  EXPECT_THROW(g.leaf("", Matrix(1, 1)), std::invalid_argument);
}

TEST(Autodiff, RecomputeTracksLeafUpdates) {
  std::mt19937_64 rng(17);
  Graph g;
  const Matrix a0 = testutil::random_matrix(3, 3, rng);
  const NodeId a = g.leaf("a", a0);
  const NodeId loss = g.frobenius_sq(g.relu(a));
  const double before = g.value(loss)(0, 0);

  const Matrix a1 = testutil::random_matrix(3, 3, rng);
  g.set_leaf("a", a1);
  g.recompute();
  double want = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double r = std::max(0.0, a1(i, j));
      want += r * r;
    }
  EXPECT_DOUBLE_EQ(g.value(loss)(0, 0), want);
  EXPECT_NE(g.value(loss)(0, 0), before);
  EXPECT_THROW(g.set_leaf("a", Matrix(2, 2)), std::invalid_argument);
}

TEST(Autodiff, SampledFiniteDifferenceIsDeterministicSubset) {
  std::mt19937_64 rng(23);
  Graph g;
  const NodeId a = g.leaf("a", testutil::random_matrix(6, 6, rng));
  const NodeId b = g.constant(testutil::random_matrix(6, 6, rng));
  const NodeId loss = g.frobenius_sq(g.sub(g.matmul(a, b), b));

  const lora2::FdReport r1 = lora2::finite_diff_check(g, loss, "a", 1e-6, 1e-5, 10, 77);
  const lora2::FdReport r2 = lora2::finite_diff_check(g, loss, "a", 1e-6, 1e-5, 10, 77);
  EXPECT_TRUE(r1.pass);
  EXPECT_EQ(r1.checked, 10);
  EXPECT_EQ(r1.checked + r1.skipped_nondifferentiable, 10);
  EXPECT_EQ(r2.worst_row, r1.worst_row);
  EXPECT_EQ(r2.worst_col, r1.worst_col);
  EXPECT_EQ(r2.max_rel_error, r1.max_rel_error);

  const lora2::FdReport full = lora2::finite_diff_check(g, loss, "a", 1e-6, 1e-5);
  EXPECT_EQ(full.checked, 36);
}
