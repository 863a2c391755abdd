// Copyright 2026 The FedASK Simulator Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major double matrices and the handful of factorizations the
// protocol needs: Householder QR and one-sided Jacobi SVD.

#ifndef FEDASK_MATRIX_HPP_
#define FEDASK_MATRIX_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedask/error.hpp"
#include "fedask/rng.hpp"

namespace fedask {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows)
      : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols_ + j];
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (auto& x : data_) x *= s;
    return *this;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) {
      throw ShapeError(std::string("operator") + op + ": " +
                       std::to_string(rows_) + "x" + std::to_string(cols_) +
                       " vs " + std::to_string(o.rows_) + "x" +
                       std::to_string(o.cols_));
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }
inline Matrix operator-(Matrix a) { return a *= -1.0; }

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Sub-block [row0, row0+nrows) x [col0, col0+ncols).
inline Matrix slice(const Matrix& a, std::size_t row0, std::size_t nrows,
                    std::size_t col0, std::size_t ncols) {
  if (row0 + nrows > a.rows() || col0 + ncols > a.cols()) {
    throw ShapeError("slice out of range for " + shape_str(a));
  }
  Matrix s(nrows, ncols);
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j) s(i, j) = a(row0 + i, col0 + j);
  return s;
}

inline Matrix diag(std::span<const double> d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

// a * diag(s): scales column j by s[j].
inline Matrix scale_columns(Matrix a, std::span<const double> s) {
  if (s.size() != a.cols()) throw ShapeError("scale_columns: length mismatch");
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) a(i, j) *= s[j];
  return a;
}

// diag(s) * a: scales row i by s[i].
inline Matrix scale_rows(Matrix a, std::span<const double> s) {
  if (s.size() != a.rows()) throw ShapeError("scale_rows: length mismatch");
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (auto& x : a.row(i)) x *= s[i];
  return a;
}

inline double frobenius_inner(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("frobenius_inner: " + shape_str(a) + " vs " + shape_str(b));
  }
  double s = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return s;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double x : a.values()) s += x * x;
  return std::sqrt(s);
}

inline double cosine_similarity(const Matrix& a, const Matrix& b) {
  const double na = frobenius_norm(a);
  const double nb = frobenius_norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw DegenerateInputError("cosine_similarity: zero-norm input");
  }
  return std::clamp(frobenius_inner(a, b) / (na * nb), -1.0, 1.0);
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double x) { return std::isfinite(x); });
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, RngState& rng) {
  Matrix m(rows, cols);
  for (auto& x : m.values()) x = rng.normal();
  return m;
}

struct QrResult {
  Matrix q;  // rows x cols, orthonormal columns
  Matrix r;  // cols x cols, upper triangular
};

// Thin Householder QR of a tall matrix. Rank-deficient input is fine: a
// column that is already zero below the diagonal gets the identity reflector.
inline QrResult qr(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m < n) throw ShapeError("qr: needs rows >= cols, got " + shape_str(a));

  Matrix work = a;
  std::vector<std::vector<double>> reflectors(n);
  for (std::size_t j = 0; j < n; ++j) {
    double norm2 = 0.0;
    for (std::size_t i = j; i < m; ++i) norm2 += work(i, j) * work(i, j);
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) continue;
    const double alpha = work(j, j) >= 0.0 ? -norm : norm;
    std::vector<double> v(m - j);
    for (std::size_t i = j; i < m; ++i) v[i - j] = work(i, j);
    v[0] -= alpha;
    const double vnorm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    for (auto& x : v) x /= vnorm;
    for (std::size_t c = j; c < n; ++c) {
      double dot = 0.0;
      for (std::size_t i = j; i < m; ++i) dot += v[i - j] * work(i, c);
      for (std::size_t i = j; i < m; ++i) work(i, c) -= 2.0 * v[i - j] * dot;
    }
    work(j, j) = alpha;
    for (std::size_t i = j + 1; i < m; ++i) work(i, j) = 0.0;
    reflectors[j] = std::move(v);
  }

  Matrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
  for (std::size_t jj = n; jj-- > 0;) {
    const auto& v = reflectors[jj];
    if (v.empty()) continue;
    for (std::size_t c = 0; c < n; ++c) {
      double dot = 0.0;
      for (std::size_t i = jj; i < m; ++i) dot += v[i - jj] * q(i, c);
      for (std::size_t i = jj; i < m; ++i) q(i, c) -= 2.0 * v[i - jj] * dot;
    }
  }
  return {std::move(q), slice(work, 0, n, 0, n)};
}

struct SvdResult {
  Matrix u;                            // m x k, orthonormal columns
  std::vector<double> singular_values;  // k, non-increasing
  Matrix vt;                           // k x n, orthonormal rows
};

namespace detail {

// Extends columns [filled, k) of `u` to an orthonormal set by Gram-Schmidt
// over the standard basis.
inline void complete_basis(Matrix& u, const std::vector<bool>& valid) {
  const std::size_t m = u.rows();
  const std::size_t k = u.cols();
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (valid[j]) continue;
    for (;; ++candidate) {
      if (candidate >= m) throw DegenerateInputError("svd: basis completion failed");
      std::vector<double> e(m, 0.0);
      e[candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < k; ++c) {
          if (c == j || (!valid[c] && c > j)) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += u(i, c) * e[i];
          for (std::size_t i = 0; i < m; ++i) e[i] -= dot * u(i, c);
        }
      }
      const double norm = std::sqrt(std::inner_product(e.begin(), e.end(), e.begin(), 0.0));
      if (norm > 0.5) {
        for (std::size_t i = 0; i < m; ++i) u(i, j) = e[i] / norm;
        ++candidate;
        break;
      }
    }
  }
}

// One-sided (Hestenes) Jacobi on a square matrix. Returns the rotated
// working matrix, whose columns are mutually orthogonal, and accumulates the
// right rotations in `v`.
inline Matrix hestenes_jacobi(Matrix w, Matrix& v) {
  const std::size_t n = w.cols();
  const std::size_t m = w.rows();
  v = Matrix::identity(n);
  const double tol = static_cast<double>(std::max<std::size_t>(m, 1)) *
                     std::numeric_limits<double>::epsilon();
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::abs(zeta) > 1e150
                             ? 1.0 / (2.0 * zeta)
                             : std::copysign(1.0, zeta) /
                                   (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w(i, p);
          const double wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p);
          const double vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  return w;
}

// SVD of a tall (rows >= cols) matrix via QR followed by Jacobi on R.
inline SvdResult svd_tall(const Matrix& a) {
  const std::size_t n = a.cols();
  auto [q, r] = qr(a);
  Matrix v;
  const Matrix w = hestenes_jacobi(std::move(r), v);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += w(i, j) * w(i, j);
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  Matrix ur(n, n);
  Matrix vt(n, n);
  std::vector<double> sigma(n);
  std::vector<bool> valid(n, true);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    sigma[j] = norms[src];
    for (std::size_t i = 0; i < n; ++i) vt(j, i) = v(i, src);
    if (sigma[j] == 0.0 || !std::isnormal(sigma[j])) {
      valid[j] = false;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) ur(i, j) = w(i, src) / sigma[j];
  }
  if (std::find(valid.begin(), valid.end(), false) != valid.end()) {
    complete_basis(ur, valid);
  }
  return {matmul(q, ur), std::move(sigma), std::move(vt)};
}

}  // namespace detail

// Thin SVD, k = min(rows, cols). Each left singular vector is signed so its
// largest-magnitude entry (first one on ties) is non-negative.
inline SvdResult svd(const Matrix& a) {
  if (a.empty()) throw ShapeError("svd: empty matrix");
  SvdResult out;
  if (a.rows() >= a.cols()) {
    out = detail::svd_tall(a);
  } else {
    SvdResult t = detail::svd_tall(transpose(a));
    out = {transpose(t.vt), std::move(t.singular_values), transpose(t.u)};
  }
  for (std::size_t j = 0; j < out.u.cols(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.u.rows(); ++i) {
      if (std::abs(out.u(i, j)) > std::abs(out.u(best, j))) best = i;
    }
    if (out.u(best, j) < 0.0) {
      for (std::size_t i = 0; i < out.u.rows(); ++i) out.u(i, j) = -out.u(i, j);
      for (auto& x : out.vt.row(j)) x = -x;
    }
  }
  return out;
}

inline Matrix reconstruct(const SvdResult& s) {
  return matmul(scale_columns(s.u, s.singular_values), s.vt);
}

}  // namespace fedask

#endif  // FEDASK_MATRIX_HPP_
