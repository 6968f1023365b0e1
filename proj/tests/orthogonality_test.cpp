#include <random>
#include <stdexcept>

#include <gtest/gtest.h>

#include "lora2/orthogonality.hpp"
#include "testutil.hpp"

using lora2::Lora2Adapter;
using lora2::Lora2Config;
using lora2::Matrix;
using lora2::OrthMode;

namespace {

Lora2Adapter random_adapter(std::uint64_t seed) {
  const Lora2Config cfg{10, 8, 3, 4, 0.5, seed};
  Lora2Adapter ad = lora2::init_lora2(cfg);
  std::mt19937_64 rng(seed + 1);
  ad.lambda = testutil::random_matrix(4, 1, rng);
  return ad;
}

}  // namespace

TEST(Orthogonality, ScaledIdentityClosedForm) {
  // For m = 2I_n: G^T G - I = 3I, penalty = 9n.
  for (int n : {2, 3, 5}) {
    EXPECT_DOUBLE_EQ(lora2::gram_penalty(lora2::scale(Matrix::identity(n), 2.0)), 9.0 * n);
  }
}

TEST(Orthogonality, PenaltyMatchesScalarLoopOracle) {
  std::mt19937_64 rng(101);
  for (auto [rows, cols] : {std::pair{6, 3}, {3, 6}, {4, 4}, {1, 5}, {5, 1}}) {
    const Matrix m = testutil::random_matrix(rows, cols, rng);
    EXPECT_NEAR(lora2::gram_penalty(m), testutil::gram_penalty_oracle(m), 1e-10)
        << rows << "x" << cols;
  }
}

TEST(Orthogonality, OrthonormalFactorsScoreZero) {
  std::mt19937_64 rng(103);
  const Matrix q = testutil::orthonormal_columns(12, 4, rng);
  EXPECT_LT(lora2::gram_penalty(q), 1e-20);
  // Wide matrices are graded on their row space.
  EXPECT_LT(lora2::gram_penalty(lora2::transpose(q)), 1e-20);
}

TEST(Orthogonality, TermDecompositionPerMode) {
  const Lora2Adapter ad = random_adapter(7);
  const double u_out = lora2::gram_penalty(ad.u_out);
  const double u_in = lora2::gram_penalty(ad.u_in);
  const double v_in = lora2::gram_penalty(ad.v_in);
  const double v_out = lora2::gram_penalty(ad.v_out);
  const double p = lora2::gram_penalty(lora2::matmul(ad.u_out, ad.u_in));
  const double q = lora2::gram_penalty(lora2::matmul(ad.v_in, ad.v_out));

  const auto sum = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  };
  EXPECT_NEAR(sum(lora2::gram_terms(ad, OrthMode::InnerLeftPair)), u_out + u_in, 1e-12);
  EXPECT_NEAR(sum(lora2::gram_terms(ad, OrthMode::InnerRightPair)), v_in + v_out, 1e-12);
  EXPECT_NEAR(sum(lora2::gram_terms(ad, OrthMode::BothPairs)), u_out + u_in + v_in + v_out,
              1e-12);
  EXPECT_NEAR(sum(lora2::gram_terms(ad, OrthMode::Composite)), p + q, 1e-12);
  EXPECT_NEAR(sum(lora2::gram_terms(ad, OrthMode::All)), u_out + u_in + v_in + v_out + p + q,
              1e-12);
  EXPECT_EQ(lora2::gram_terms(ad, OrthMode::All).size(), 6u);
}

TEST(Orthogonality, FullModeDominatesItsSubsets) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const Lora2Adapter ad = random_adapter(seed);
    const double all = lora2::orth_loss(ad, OrthMode::All, 1.0);
    EXPECT_GE(all, lora2::orth_loss(ad, OrthMode::BothPairs, 1.0));
    EXPECT_GE(all, lora2::orth_loss(ad, OrthMode::Composite, 1.0));
    EXPECT_GE(lora2::orth_loss(ad, OrthMode::BothPairs, 1.0),
              lora2::orth_loss(ad, OrthMode::InnerLeftPair, 1.0));
    EXPECT_GE(lora2::orth_loss(ad, OrthMode::BothPairs, 1.0),
              lora2::orth_loss(ad, OrthMode::InnerRightPair, 1.0));
  }
}

TEST(Orthogonality, GammaScalingAndValidation) {
  const Lora2Adapter ad = random_adapter(9);
  const double base = lora2::orth_loss(ad, OrthMode::All, 1.0);
  EXPECT_NEAR(lora2::orth_loss(ad, OrthMode::All, 0.1), 0.1 * base, 1e-12);
  EXPECT_EQ(lora2::orth_loss(ad, OrthMode::All, 0.0), 0.0);
  EXPECT_THROW(lora2::orth_loss(ad, OrthMode::All, -0.1), std::invalid_argument);
}

TEST(Orthogonality, GraphLossMatchesEagerAndDifferentiates) {
  const Lora2Adapter ad = random_adapter(11);
  for (OrthMode mode : {OrthMode::InnerLeftPair, OrthMode::InnerRightPair, OrthMode::BothPairs,
                        OrthMode::Composite, OrthMode::All}) {
    lora2::Graph g;
    const lora2::Lora2Leaves leaves = lora2::register_leaves(g, "a", ad);
    const lora2::NodeId loss = lora2::orth_loss_node(g, leaves, mode, 0.1);
    EXPECT_NEAR(g.value(loss)(0, 0), lora2::orth_loss(ad, mode, 0.1), 1e-12)
        << lora2::orth_mode_name(mode);
    for (const std::string leaf : {"a.u_out", "a.u_in", "a.v_in", "a.v_out"}) {
      const lora2::FdReport rep = lora2::finite_diff_check(g, loss, leaf, 1e-6, 1e-5);
      EXPECT_TRUE(rep.pass) << lora2::orth_mode_name(mode) << " " << leaf << " rel "
                            << rep.max_rel_error;
    }
  }
}

TEST(Orthogonality, ModeNamesRoundTrip) {
  for (OrthMode mode : {OrthMode::InnerLeftPair, OrthMode::InnerRightPair, OrthMode::BothPairs,
                        OrthMode::Composite, OrthMode::All}) {
    EXPECT_EQ(lora2::orth_mode_from_name(lora2::orth_mode_name(mode)), mode);
  }
  EXPECT_THROW(lora2::orth_mode_from_name("diagonal"), std::invalid_argument);
}
