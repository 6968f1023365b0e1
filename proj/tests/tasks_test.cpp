#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <gtest/gtest.h>

#include "lora2/tasks.hpp"
#include "testutil.hpp"

using lora2::Batch;
using lora2::Matrix;
using lora2::ModelSpec;
using lora2::Nonlinearity;

namespace {

int svd_rank(const Matrix& m, double tol = 1e-9) {
  Eigen::MatrixXd em(m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) em(i, j) = m(i, j);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(em);
  const auto& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv[i] > tol * sv[0]) ++rank;
  return rank;
}

std::filesystem::path temp_file(const char* stem) {
  return std::filesystem::temp_directory_path() / stem;
}

}  // namespace

TEST(Tasks, StackShapesAndNaming) {
  const ModelSpec spec = lora2::build_stack(2, 16, 32, Nonlinearity::Rectifier, 5);
  ASSERT_EQ(spec.sites.size(), 10u);
  EXPECT_EQ(spec.sites[0].name, "L0.Wq");
  EXPECT_EQ(spec.sites[4].name, "L0.f2");
  EXPECT_EQ(spec.sites[5].name, "L1.Wq");
  EXPECT_EQ(spec.sites[8].name, "L1.f1");
  EXPECT_EQ(spec.site("L1.f1").w0.rows(), 16);
  EXPECT_EQ(spec.site("L1.f1").w0.cols(), 32);
  EXPECT_EQ(spec.site("L1.f2").w0.rows(), 32);
  EXPECT_EQ(spec.site("L1.f2").w0.cols(), 16);
  EXPECT_EQ(spec.input_dim(), 16);
  EXPECT_EQ(spec.output_dim(), 16);
  EXPECT_THROW(spec.site("L2.Wq"), std::invalid_argument);
  spec.validate();
}

TEST(Tasks, StackBuildIsSeedDeterministic) {
  const ModelSpec a = lora2::build_stack(1, 8, 16, Nonlinearity::Saturating, 9);
  const ModelSpec b = lora2::build_stack(1, 8, 16, Nonlinearity::Saturating, 9);
  const ModelSpec c = lora2::build_stack(1, 8, 16, Nonlinearity::Saturating, 10);
  for (std::size_t i = 0; i < a.sites.size(); ++i) {
    EXPECT_EQ(a.sites[i].w0, b.sites[i].w0);
  }
  EXPECT_FALSE(a.sites[0].w0 == c.sites[0].w0);
}

TEST(Tasks, FrozenForwardMatchesManualComposition) {
  const ModelSpec spec = lora2::build_stack(1, 6, 12, Nonlinearity::Rectifier, 21);
  std::mt19937_64 rng(22);
  const Matrix x = testutil::random_matrix(4, 6, rng);
  Matrix h = x;
  for (std::size_t s = 0; s < spec.sites.size(); ++s) {
    if (s > 0) h = lora2::apply_nonlinearity(h, spec.nonlinearity);
    h = lora2::matmul(h, spec.sites[s].w0);
  }
  EXPECT_EQ(lora2::frozen_forward(spec, x), h);

  // Re-running the same forward is bit-identical: no hidden state.
  EXPECT_EQ(lora2::frozen_forward(spec, x), lora2::frozen_forward(spec, x));
}

TEST(Tasks, NonlinearityVariants) {
  const Matrix h = Matrix::from_rows({{-1.0, 0.5}});
  EXPECT_EQ(lora2::apply_nonlinearity(h, Nonlinearity::None), h);
  EXPECT_EQ(lora2::apply_nonlinearity(h, Nonlinearity::Rectifier),
            Matrix::from_rows({{0.0, 0.5}}));
  const Matrix t = lora2::apply_nonlinearity(h, Nonlinearity::Saturating);
  EXPECT_DOUBLE_EQ(t(0, 0), std::tanh(-1.0));
  EXPECT_DOUBLE_EQ(t(0, 1), std::tanh(0.5));
  EXPECT_EQ(lora2::nonlinearity_from_name("rectifier"), Nonlinearity::Rectifier);
  EXPECT_THROW(lora2::nonlinearity_from_name("gelu"), std::invalid_argument);
}

TEST(Tasks, ForwardWithDeltasShiftsOnlyNamedSites) {
  const ModelSpec spec = lora2::build_stack(1, 5, 10, Nonlinearity::None, 31);
  std::mt19937_64 rng(32);
  const Matrix x = testutil::random_matrix(3, 5, rng);
  const Matrix base = lora2::frozen_forward(spec, x);
  EXPECT_EQ(lora2::forward_with_deltas(spec, {}, x), base);

  const Matrix delta = testutil::random_matrix(5, 5, rng);
  const Matrix shifted = lora2::forward_with_deltas(spec, {{"L0.Wq", delta}}, x);
  EXPECT_GT(lora2::max_abs_diff(shifted, base), 0.0);

  // Manually adding the same delta reproduces it.
  ModelSpec manual = spec;
  manual.sites[0].w0 = lora2::add(spec.sites[0].w0, delta);
  EXPECT_LT(lora2::max_abs_diff(shifted, lora2::frozen_forward(manual, x)), 1e-12);
  EXPECT_THROW(lora2::forward_with_deltas(spec, {{"L9.Wq", delta}}, x), std::invalid_argument);
}

TEST(Tasks, PlantedIncrementRankAndNorm) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const int rho = 1 + static_cast<int>(seed % 4);
    const Matrix d = lora2::planted_increment(24, 18, rho, rng);
    EXPECT_EQ(svd_rank(d), rho) << "seed " << seed;
    EXPECT_NEAR(std::sqrt(lora2::frobenius_sq(d)), 1.0, 1e-12);
  }
  std::mt19937_64 rng(1);
  EXPECT_EQ(lora2::max_abs(lora2::planted_increment(6, 6, 0, rng)), 0.0);
  EXPECT_THROW(lora2::planted_increment(4, 6, 5, rng), std::invalid_argument);
}

TEST(Tasks, PlantedBatchFollowsShiftedMap) {
  const lora2::PlantedTask task = lora2::gen_planted_task(8, 6, 2, 0.0, 77);
  std::mt19937_64 rng(78);
  const Batch b = lora2::sample_planted_batch(task, 16, rng);
  EXPECT_EQ(b.n(), 16);
  const Matrix want = lora2::matmul(b.x, lora2::add(task.w0, task.delta_star));
  EXPECT_EQ(b.y, want);  // noiseless: exact

  // Noise perturbs targets but not inputs, deterministically per rng state.
  std::mt19937_64 r1(79), r2(79);
  lora2::PlantedTask noisy = task;
  noisy.noise_std = 0.1;
  const Batch n1 = lora2::sample_planted_batch(noisy, 8, r1);
  const Batch n2 = lora2::sample_planted_batch(noisy, 8, r2);
  EXPECT_EQ(n1.x, n2.x);
  EXPECT_EQ(n1.y, n2.y);
  EXPECT_GT(lora2::max_abs_diff(n1.y, lora2::matmul(n1.x, lora2::add(task.w0, task.delta_star))),
            0.0);
}

TEST(Tasks, MseLossIsMeanSquaredResidual) {
  Batch b;
  b.kind = lora2::LossKind::Mse;
  b.x = Matrix(2, 1);
  b.y = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  const Matrix pred = Matrix::from_rows({{2.0, 2.0}, {3.0, 0.0}});
  // Residuals: -1, 0, 0, 4 -> (1 + 16) / 4.
  EXPECT_DOUBLE_EQ(lora2::task_loss(pred, b), 17.0 / 4.0);
}

TEST(Tasks, CrossEntropyLossOnUniformLogitsIsLogK) {
  Batch b;
  b.kind = lora2::LossKind::CrossEntropy;
  b.x = Matrix(2, 1);
  b.y = Matrix();
  b.labels = {0, 1};
  const Matrix pred = Matrix::filled(2, 2, 0.3);  // uniform rows
  EXPECT_NEAR(lora2::task_loss(pred, b), std::log(2.0), 1e-12);
  b.labels = {0, 2};
  EXPECT_THROW(lora2::task_loss(pred, b), std::invalid_argument);
}

TEST(Tasks, DatasetRoundTripIsValueExact) {
  const lora2::PlantedTask task = lora2::gen_planted_task(5, 4, 1, 0.05, 91);
  std::mt19937_64 rng(92);
  const Batch b = lora2::sample_planted_batch(task, 12, rng);
  const auto path = temp_file("lora2_mse_dataset.txt");
  lora2::save_dataset(path.string(), b);
  const Batch loaded = lora2::load_dataset(path.string());
  EXPECT_EQ(loaded.kind, lora2::LossKind::Mse);
  EXPECT_EQ(loaded.x, b.x);
  EXPECT_EQ(loaded.y, b.y);
  std::filesystem::remove(path);
}

TEST(Tasks, LabeledDatasetRoundTrip) {
  Batch b;
  b.kind = lora2::LossKind::CrossEntropy;
  std::mt19937_64 rng(93);
  b.x = testutil::random_matrix(6, 3, rng);
  b.y = Matrix();
  b.labels = {0, 2, 1, 2, 0, 1};
  const auto path = temp_file("lora2_xent_dataset.txt");
  lora2::save_dataset(path.string(), b);
  const Batch loaded = lora2::load_dataset(path.string());
  EXPECT_EQ(loaded.kind, lora2::LossKind::CrossEntropy);
  EXPECT_EQ(loaded.x, b.x);
  EXPECT_EQ(loaded.labels, b.labels);
  std::filesystem::remove(path);
}

TEST(Tasks, DatasetLoaderRejectsCorruptFiles) {
  const auto path = temp_file("lora2_bad_dataset.txt");
  std::ofstream f(path);
  f << "3 2 2 mse\n1 2 3 4 5\n";  // row too short
  f.close();
  EXPECT_THROW(lora2::load_dataset(path.string()), std::runtime_error);
  std::ofstream g(path);
  g << "3 2 1 banana\n1 2 3 4 5\n";
  g.close();
  EXPECT_ANY_THROW(lora2::load_dataset(path.string()));
  std::filesystem::remove(path);
  EXPECT_THROW(lora2::load_dataset(path.string()), std::runtime_error);
}
