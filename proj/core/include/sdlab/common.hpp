#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab {

using Vec = std::vector<double>;

// Error conventions used across the library:
//   std::invalid_argument  — validation / shape errors (caller bug, rejected up front)
//   std::out_of_range      — index or timestep range errors
//   std::runtime_error     — numeric failures discovered mid-computation
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// y += c * x
inline void axpy(double c, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Row-major dense matrix; rows are token embeddings in prompt contexts.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vec data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool empty() const { return rows == 0; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
  }
};

// Mean over rows. Every conditioning path into a teacher goes through this.
inline Vec pool_rows(const Matrix& m) {
  require(m.rows > 0, "pool_rows: empty matrix");
  Vec out(m.cols, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) axpy(1.0, m.row(r), out);
  for (double& x : out) x /= static_cast<double>(m.rows);
  return out;
}

// Row-wise concatenation, in argument order.
inline Matrix vstack(const std::vector<const Matrix*>& parts) {
  std::size_t rows = 0, cols = 0;
  for (const Matrix* p : parts) {
    if (p->rows == 0) continue;
    if (cols == 0) cols = p->cols;
    require(p->cols == cols, "vstack: column mismatch");
    rows += p->rows;
  }
  Matrix out(rows, cols);
  std::size_t r = 0;
  for (const Matrix* p : parts) {
    for (std::size_t i = 0; i < p->rows; ++i, ++r) {
      std::copy(p->row(i).begin(), p->row(i).end(), out.row(r).begin());
    }
  }
  return out;
}

}  // namespace sdlab
