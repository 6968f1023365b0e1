// Shared oracles for the test suites. Everything here is deliberately naive:
// the point is an independent second opinion, not speed.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "lora2/matrix.hpp"

namespace testutil {

// Triple-loop product, accumulating in the same ascending-inner-index order
// as the library so results agree bitwise under -ffp-contract=off.
inline lora2::Matrix matmul_oracle(const lora2::Matrix& a, const lora2::Matrix& b) {
  lora2::Matrix out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

inline lora2::Matrix random_matrix(int rows, int cols, std::mt19937_64& rng,
                                   double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  lora2::Matrix out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out(i, j) = dist(rng);
  }
  return out;
}

// Gram-Schmidt. Returns a matrix with orthonormal columns (rows >= cols).
inline lora2::Matrix orthonormal_columns(int rows, int cols, std::mt19937_64& rng) {
  lora2::Matrix m = random_matrix(rows, cols, rng);
  for (int j = 0; j < cols; ++j) {
    for (int p = 0; p < j; ++p) {
      double dot = 0.0;
      for (int i = 0; i < rows; ++i) dot += m(i, j) * m(i, p);
      for (int i = 0; i < rows; ++i) m(i, j) -= dot * m(i, p);
    }
    double norm = 0.0;
    for (int i = 0; i < rows; ++i) norm += m(i, j) * m(i, j);
    norm = std::sqrt(norm);
    for (int i = 0; i < rows; ++i) m(i, j) /= norm;
  }
  return m;
}

// ||G^T G - I||_F^2 by scalar loops, orientation chosen like the library.
inline double gram_penalty_oracle(const lora2::Matrix& m) {
  const bool tall = m.rows() >= m.cols();
  const int n = tall ? m.cols() : m.rows();
  const int depth = tall ? m.rows() : m.cols();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      for (int p = 0; p < depth; ++p) {
        const double x = tall ? m(p, i) : m(i, p);
        const double y = tall ? m(p, j) : m(j, p);
        dot += x * y;
      }
      const double diff = dot - (i == j ? 1.0 : 0.0);
      total += diff * diff;
    }
  }
  return total;
}

}  // namespace testutil
