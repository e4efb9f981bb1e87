#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "cst/rng.hpp"

namespace cst {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. All training math runs at double
// precision so gradient checks stay sharp.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  Vec data;

  Matrix() = default;
  Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(size_t r) { return data.data() + r * cols; }
  const double* row(size_t r) const { return data.data() + r * cols; }

  double& at(size_t r, size_t c) { return data[r * cols + c]; }
  double at(size_t r, size_t c) const { return data[r * cols + c]; }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (auto& v : data) v = rng.uniform(lo, hi);
  }
};

// y += M x
inline void matvec_acc(const Matrix& m, const Vec& x, Vec& y) {
  for (size_t r = 0; r < m.rows; ++r) {
    const double* row = m.row(r);
    double acc = 0.0;
    for (size_t c = 0; c < m.cols; ++c) acc += row[c] * x[c];
    y[r] += acc;
  }
}

// y += M^T x
inline void matvec_t_acc(const Matrix& m, const Vec& x, Vec& y) {
  for (size_t r = 0; r < m.rows; ++r) {
    const double* row = m.row(r);
    const double xr = x[r];
    for (size_t c = 0; c < m.cols; ++c) y[c] += row[c] * xr;
  }
}

// M += a b^T
inline void outer_acc(Matrix& m, const Vec& a, const Vec& b) {
  for (size_t r = 0; r < m.rows; ++r) {
    double* row = m.row(r);
    const double ar = a[r];
    for (size_t c = 0; c < m.cols; ++c) row[c] += ar * b[c];
  }
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool all_finite(const Matrix& m) { return all_finite(m.data); }

// In-place numerically stable softmax; returns log(sum(exp)) shifted back so
// that log p[i] = logits[i] - lse.
inline double softmax_inplace(Vec& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : logits) v /= sum;
  return mx + std::log(sum);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace cst
