// Copyright 2026 The flatkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major matrices with f32 storage and f64 accumulation, plus the
// handful of linear-algebra routines the compression stages need.

#ifndef FLATKIT_NUMERICS_HPP_
#define FLATKIT_NUMERICS_HPP_

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flatkit {

// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

using Vector = std::vector<float>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const float> diag);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<float> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Square matrix that is symmetric and numerically positive semidefinite.
// Construction checks squareness, symmetry (1e-5 relative) and a nonnegative
// diagonal; full PSD is the caller's contract.
class SpdMatrix {
 public:
  explicit SpdMatrix(Matrix m);

  const Matrix& matrix() const { return m_; }
  std::size_t dim() const { return m_.rows(); }

 private:
  Matrix m_;
};

// --- elementwise / structural -------------------------------------------

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, float factor);

// C = A B, accumulated in f64.
Matrix matmul(const Matrix& a, const Matrix& b);
// C = Aᵀ B, accumulated in f64.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix hconcat(const Matrix& a, const Matrix& b);
Matrix vconcat(const Matrix& a, const Matrix& b);
Matrix slice_cols(const Matrix& a, std::size_t first, std::size_t count);
Matrix slice_rows(const Matrix& a, std::size_t first, std::size_t count);
Matrix select_cols(const Matrix& a, std::span<const std::size_t> idx);
Matrix select_rows(const Matrix& a, std::span<const std::size_t> idx);

// diag(v) · A, i.e. row r of A scaled by v[r].
Matrix scale_rows(const Matrix& a, std::span<const float> v);

double frobenius_norm(const Matrix& a);
double squared_distance(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double trace(const Matrix& a);

// --- solvers / reductions -------------------------------------------------

// Solves (A + ridge·I) X = B by LU with partial pivoting in f64.
// Throws SingularMatrixError when a pivot falls below 1e-12 of the matrix
// scale, DimensionError on shape mismatch.
Matrix spd_solve(const SpdMatrix& a, double ridge, const Matrix& b);
// Same solve, row-major n x m result kept in f64.
std::vector<double> spd_solve_f64(const SpdMatrix& a, double ridge, const Matrix& b);

// trace(A) / n; equal to the mean eigenvalue (and singular value) for SPD A.
double mean_eigenvalue(const SpdMatrix& a);

// Row-wise softmax, stabilized by subtracting the row maximum.
Matrix row_softmax(const Matrix& x);

// Mean over token rows of cos(A_t, B_t). Rows where either side has norm
// below 1e-12 are skipped; throws if every row is degenerate.
double mean_token_cosine(const Matrix& a, const Matrix& b);

// Indices of the k largest scores, ties toward the smaller index, returned
// in increasing index order.
std::vector<std::size_t> top_k_indices(std::span<const double> scores,
                                       std::size_t k);

// --- parallelism ------------------------------------------------------------

// Thread count used by parallel_for. Defaults to 1.
void set_thread_count(std::size_t n);
std::size_t thread_count();

// Runs fn(i) for i in [0, n). Work is statically partitioned; callers write
// results into per-index slots so reductions keep a fixed order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace flatkit

#endif  // FLATKIT_NUMERICS_HPP_
