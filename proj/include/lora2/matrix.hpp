#pragma once

// Dense row-major matrix of 64-bit reals. The single numeric carrier for
// factors, gradients and activations; every published operation keeps the
// all-entries-finite invariant.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lora2 {

inline std::string shape_str(int rows, int cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

class Matrix {
 public:
  Matrix() = default;  // empty placeholder, 0x0

  Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    check_dims(rows, cols);
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  }

  Matrix(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_dims(rows, cols);
    if (data_.size() != static_cast<std::size_t>(rows) * cols) {
      throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(rows, cols));
    }
    ensure_finite("construction");
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix filled(int rows, int cols, double v) {
    Matrix m(rows, cols);
    for (double& x : m.data_) x = v;
    m.ensure_finite("fill");
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    Matrix m(r, c);
    int i = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c) {
        throw std::invalid_argument("ragged row in matrix literal");
      }
      int j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    m.ensure_finite("construction");
    return m;
  }

  // i.i.d. Gaussian(0, stddev^2) entries in row-major fill order.
  static Matrix gaussian(int rows, int cols, double stddev, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : m.data_) x = dist(rng);
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& values() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  void ensure_finite(const char* what) const {
    for (double v : data_) {
      if (!std::isfinite(v)) {
        throw std::domain_error(std::string("non-finite value after ") + what);
      }
    }
  }

 private:
  static void check_dims(int rows, int cols) {
    if (rows <= 0 || cols <= 0) {
      throw std::invalid_argument("matrix dimensions must be positive, got " +
                                  shape_str(rows, cols));
    }
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// a*b with fixed ascending-inner-index summation for run-to-run determinism.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.rows(), a.cols()) +
                                " * " + shape_str(b.rows(), b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int t = 0; t < a.cols(); ++t) acc += a(i, t) * b(t, j);
      out(i, j) = acc;
    }
  }
  out.ensure_finite("matmul");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + " shape mismatch: " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()));
  }
}

inline void check_same_shape(const Matrix& a, const Matrix& b, const std::string& op) {
  check_same_shape(a, b, op.c_str());
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "add");
  Matrix out = a;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) += b(i, j);
  out.ensure_finite("add");
  return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "sub");
  Matrix out = a;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) -= b(i, j);
  out.ensure_finite("sub");
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) *= b(i, j);
  out.ensure_finite("hadamard");
  return out;
}

inline Matrix scale(const Matrix& a, double c) {
  Matrix out = a;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) *= c;
  out.ensure_finite("scale");
  return out;
}

// a * diag(d); d is a column vector with one entry per column of a.
inline Matrix col_scale(const Matrix& a, const Matrix& d) {
  if (d.cols() != 1 || d.rows() != a.cols()) {
    throw std::invalid_argument("col_scale shape mismatch: " + shape_str(a.rows(), a.cols()) +
                                " * diag of " + shape_str(d.rows(), d.cols()));
  }
  Matrix out = a;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) *= d(j, 0);
  out.ensure_finite("col_scale");
  return out;
}

inline double frobenius_sq(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  return acc;
}

inline double abs_sum(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += std::abs(v);
  return acc;
}

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

// SplitMix64 step; used to derive independent per-component seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace lora2
