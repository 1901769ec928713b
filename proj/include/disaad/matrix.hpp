#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "disaad/common.hpp"

namespace disaad {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw InputError("Matrix: data size does not match shape");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data_) v = rng.normal(0.0, stddev);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  // this += scale * o
  void axpy(double scale, const Matrix& o) {
    require_same_shape(o, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * o.data_[i];
  }

  Matrix scaled(double s) const {
    Matrix out = *this;
    for (double& v : out.data_) v *= s;
    return out;
  }

  Matrix transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void require_same_shape(const Matrix& o, const char* what) const {
    if (!same_shape(o)) throw InputError(std::string("Matrix::") + what + ": shape mismatch");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw InputError("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

// y = M x
inline Vec matvec(const Matrix& m, std::span<const double> x) {
  if (x.size() != m.cols()) throw InputError("matvec: vector length does not match columns");
  Vec y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double acc = 0.0;
    const auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

// y = M^T x
inline Vec matvec_t(const Matrix& m, std::span<const double> x) {
  if (x.size() != m.rows()) throw InputError("matvec_t: vector length does not match rows");
  Vec y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) y[c] += row[c] * xr;
  }
  return y;
}

// m += scale * u v^T
inline void add_outer(Matrix& m, double scale, std::span<const double> u, std::span<const double> v) {
  if (u.size() != m.rows() || v.size() != m.cols()) throw InputError("add_outer: shape mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double ur = scale * u[r];
    if (ur == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += ur * v[c];
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

struct SpectralNormOptions {
  int max_iterations = 100;
  double tolerance = 1e-8;
};

// Largest singular value by power iteration on M^T M. The start vector is
// fixed so the result is deterministic.
inline double spectral_norm(const Matrix& m, SpectralNormOptions opts = {}) {
  if (m.empty()) return 0.0;
  Vec v(m.cols());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  double n = norm2(v);
  for (double& x : v) x /= n;

  double sigma = 0.0;
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Vec u = matvec(m, v);
    const double un = norm2(u);
    if (un == 0.0) return 0.0;
    Vec w = matvec_t(m, u);
    const double wn = norm2(w);
    if (wn == 0.0) return 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / wn;
    // ||M^T M v|| / ||M v|| converges to sigma_max from below.
    const double next = wn / un;
    const bool converged = std::abs(next - sigma) <= opts.tolerance * std::max(1.0, next);
    sigma = next;
    if (converged) break;
  }
  return sigma;
}

}  // namespace disaad
