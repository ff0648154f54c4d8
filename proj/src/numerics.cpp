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

#include "flatkit/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace flatkit {
namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape mismatch " +
                         shape_str(a) + " vs " + shape_str(b));
  }
}

std::atomic<std::size_t> g_threads{1};

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::diagonal(std::span<const float> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v); });
}

SpdMatrix::SpdMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() != m_.cols()) {
    throw DimensionError("SPD matrix must be square, got " + shape_str(m_));
  }
  const double scale = std::max(max_abs(m_), 1e-30);
  for (std::size_t i = 0; i < m_.rows(); ++i) {
    if (m_(i, i) < -1e-6 * scale) {
      throw Error("SPD matrix has negative diagonal entry at " +
                  std::to_string(i));
    }
    for (std::size_t j = i + 1; j < m_.cols(); ++j) {
      if (std::abs(double(m_(i, j)) - double(m_(j, i))) > 1e-5 * scale) {
        throw Error("SPD matrix is not symmetric at (" + std::to_string(i) +
                    ", " + std::to_string(j) + ")");
      }
    }
  }
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  }
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

Matrix scale(const Matrix& a, float factor) {
  Matrix out = a;
  for (float& v : out.data()) v *= factor;
  return out;
}

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 8;

// c[i0.., j0..] for a full kTileRows x kTileCols tile, accumulated in f64
// registers over the whole inner dimension. `panel` holds columns
// j0..j0+kTileCols of b packed row by row.
void matmul_tile(const Matrix& a, const float* panel, Matrix& c, std::size_t i0,
                 std::size_t j0) {
  double acc[kTileRows][kTileCols] = {};
  const std::size_t inner = a.cols();
  const float* a0 = a.row(i0).data();
  const std::size_t lda = a.cols();
  for (std::size_t p = 0; p < inner; ++p) {
    const float* brow = panel + p * kTileCols;
    double bv[kTileCols];
    for (std::size_t j = 0; j < kTileCols; ++j) bv[j] = brow[j];
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const double av = a0[r * lda + p];
      for (std::size_t j = 0; j < kTileCols; ++j) acc[r][j] += av * bv[j];
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r) {
    float* crow = c.row(i0 + r).data() + j0;
    for (std::size_t j = 0; j < kTileCols; ++j) crow[j] = static_cast<float>(acc[r][j]);
  }
}

// Scalar fallback for the ragged edges.
void matmul_edge(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i0,
                 std::size_t i1, std::size_t j0, std::size_t j1) {
  for (std::size_t i = i0; i < i1; ++i) {
    for (std::size_t j = j0; j < j1; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) acc += double(a(i, p)) * b(p, j);
      c(i, j) = static_cast<float>(acc);
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a) + " times " + shape_str(b));
  }
  const std::size_t m = a.rows();
  const std::size_t n = b.cols();
  Matrix c(m, n);
  const std::size_t m_full = m - m % kTileRows;
  const std::size_t n_full = n - n % kTileCols;
  std::vector<float> panel(b.rows() * kTileCols);
  for (std::size_t j = 0; j < n_full; j += kTileCols) {
    for (std::size_t p = 0; p < b.rows(); ++p) {
      const float* src = b.row(p).data() + j;
      std::copy(src, src + kTileCols, panel.data() + p * kTileCols);
    }
    for (std::size_t i = 0; i < m_full; i += kTileRows) {
      matmul_tile(a, panel.data(), c, i, j);
    }
  }
  matmul_edge(a, b, c, 0, m_full, n_full, n);
  matmul_edge(a, b, c, m_full, m, 0, n);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape_str(a) + "^T times " +
                         shape_str(b));
  }
  return matmul(transpose(a), b);
}

Matrix hconcat(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("hconcat: " + shape_str(a) + " with " + shape_str(b));
  }
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto dst = out.row(r);
    std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
    std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + a.cols());
  }
  return out;
}

Matrix vconcat(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("vconcat: " + shape_str(a) + " with " + shape_str(b));
  }
  std::vector<float> data(a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Matrix(a.rows() + b.rows(), a.cols(), std::move(data));
}

Matrix slice_cols(const Matrix& a, std::size_t first, std::size_t count) {
  if (first + count > a.cols()) {
    throw DimensionError("slice_cols out of range on " + shape_str(a));
  }
  Matrix out(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto src = a.row(r).subspan(first, count);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

Matrix slice_rows(const Matrix& a, std::size_t first, std::size_t count) {
  if (first + count > a.rows()) {
    throw DimensionError("slice_rows out of range on " + shape_str(a));
  }
  auto src = a.data().subspan(first * a.cols(), count * a.cols());
  return Matrix(count, a.cols(), std::vector<float>(src.begin(), src.end()));
}

Matrix select_cols(const Matrix& a, std::span<const std::size_t> idx) {
  Matrix out(a.rows(), idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= a.cols()) {
      throw DimensionError("select_cols index out of range on " + shape_str(a));
    }
  }
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t k = 0; k < idx.size(); ++k) out(r, k) = a(r, idx[k]);
  }
  return out;
}

Matrix select_rows(const Matrix& a, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= a.rows()) {
      throw DimensionError("select_rows index out of range on " + shape_str(a));
    }
    std::copy(a.row(idx[k]).begin(), a.row(idx[k]).end(), out.row(k).begin());
  }
  return out;
}

Matrix scale_rows(const Matrix& a, std::span<const float> v) {
  if (v.size() != a.rows()) {
    throw DimensionError("scale_rows: vector length " +
                         std::to_string(v.size()) + " for " + shape_str(a));
  }
  Matrix out = a;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (float& x : out.row(r)) x *= v[r];
  }
  return out;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (float v : a.data()) s += double(v) * double(v);
  return std::sqrt(s);
}

double squared_distance(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "squared_distance");
  double s = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = double(ad[i]) - double(bd[i]);
    s += d * d;
  }
  return s;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (float v : a.data()) m = std::max(m, std::abs(double(v)));
  return m;
}

double trace(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) s += a(i, i);
  return s;
}

std::vector<double> spd_solve_f64(const SpdMatrix& spd, double ridge, const Matrix& b) {
  const Matrix& a = spd.matrix();
  const std::size_t n = a.rows();
  if (ridge < 0.0) throw Error("spd_solve: ridge must be nonnegative");
  if (b.rows() != n) {
    throw DimensionError("spd_solve: system is " + shape_str(a) +
                         " but right-hand side is " + shape_str(b));
  }
  const std::size_t m = b.cols();

  std::vector<double> lu(n * n);
  double matrix_scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      lu[i * n + j] = a(i, j) + (i == j ? ridge : 0.0);
      matrix_scale = std::max(matrix_scale, std::abs(lu[i * n + j]));
    }
  }
  std::vector<double> x(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) x[i * m + j] = b(i, j);
  }

  const double tiny = 1e-12 * matrix_scale;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(lu[i * n + k]) > std::abs(lu[piv * n + k])) piv = i;
    }
    if (!(std::abs(lu[piv * n + k]) > tiny)) {
      throw SingularMatrixError("spd_solve: singular system (pivot " +
                                std::to_string(k) + " of " + std::to_string(n) +
                                ")");
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu[k * n + j], lu[piv * n + j]);
      for (std::size_t j = 0; j < m; ++j) std::swap(x[k * m + j], x[piv * m + j]);
    }
    const double inv = 1.0 / lu[k * n + k];
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu[i * n + k] * inv;
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) lu[i * n + j] -= f * lu[k * n + j];
      for (std::size_t j = 0; j < m; ++j) x[i * m + j] -= f * x[k * m + j];
    }
  }
  for (std::size_t k = n; k-- > 0;) {
    double* xk = x.data() + k * m;
    const double pivot = lu[k * n + k];
    for (std::size_t j = 0; j < m; ++j) xk[j] /= pivot;
    for (std::size_t i = 0; i < k; ++i) {
      const double f = lu[i * n + k];
      if (f == 0.0) continue;
      double* xi = x.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) xi[j] -= f * xk[j];
    }
  }

  for (double v : x) {
    if (!std::isfinite(v)) throw SingularMatrixError("spd_solve: solution is not finite");
  }
  return x;
}

Matrix spd_solve(const SpdMatrix& spd, double ridge, const Matrix& b) {
  const std::vector<double> x = spd_solve_f64(spd, ridge, b);
  Matrix out(b.rows(), b.cols());
  auto od = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) od[i] = static_cast<float>(x[i]);
  if (!out.all_finite()) {
    throw SingularMatrixError("spd_solve: solution is not finite");
  }
  return out;
}

double mean_eigenvalue(const SpdMatrix& a) {
  if (a.dim() == 0) return 0.0;
  return trace(a.matrix()) / static_cast<double>(a.dim());
}

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  std::vector<double> e(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      e[c] = std::exp(double(in[c]) - mx);
      sum += e[c];
    }
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = static_cast<float>(e[c] / sum);
    }
  }
  return out;
}

double mean_token_cosine(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "mean_token_cosine");
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t t = 0; t < a.rows(); ++t) {
    auto ar = a.row(t);
    auto br = b.row(t);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < ar.size(); ++c) {
      dot += double(ar[c]) * br[c];
      na += double(ar[c]) * ar[c];
      nb += double(br[c]) * br[c];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < 1e-12 || nb < 1e-12) continue;
    total += std::clamp(dot / (na * nb), -1.0, 1.0);
    ++counted;
  }
  if (counted == 0) {
    throw Error("mean_token_cosine: every token row is degenerate");
  }
  return total / static_cast<double>(counted);
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores,
                                       std::size_t k) {
  if (k > scores.size()) {
    throw DimensionError("top_k_indices: k = " + std::to_string(k) +
                         " exceeds " + std::to_string(scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return scores[i] > scores[j];
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

void set_thread_count(std::size_t n) { g_threads = std::max<std::size_t>(n, 1); }

std::size_t thread_count() { return g_threads; }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace flatkit
