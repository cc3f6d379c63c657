// Copyright 2026 The MulAlign Authors
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
//

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mulalign {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A NaN, infinity or zero norm reached a numeric kernel.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major matrix. The scalar type is float for training and double
/// for gradient checks and bit-reproducible runs.
template <class T>
class Mat {
 public:
  using value_type = T;

  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error("Mat: data length " + std::to_string(data_.size()) +
                  " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Mat(std::size_t rows, std::size_t cols, std::initializer_list<T> values)
      : Mat(rows, cols, std::vector<T>(values)) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Mat& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  template <class U>
  Mat<U> cast() const {
    Mat<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Mat& a, const Mat& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <class T>
void require_same_shape(const Mat<T>& a, const Mat<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(std::string(what) + ": shape mismatch " +
                shape_str(a.rows(), a.cols()) + " vs " +
                shape_str(b.rows(), b.cols()));
  }
}

}  // namespace detail

template <class T>
bool all_finite(const Mat<T>& m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](T v) { return std::isfinite(v); });
}

template <class T>
void require_finite(const Mat<T>& m, const char* what) {
  if (!all_finite(m)) throw NumericError(std::string(what) + ": non-finite input");
}

// ---------------------------------------------------------------------------
// Elementwise and structural helpers.

template <class T>
Mat<T> transpose(const Mat<T>& m) {
  Mat<T> out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  return out;
}

/// a += scale * b
template <class T>
void axpy(Mat<T>& a, const Mat<T>& b, T scale = T(1)) {
  detail::require_same_shape(a, b, "axpy");
  T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += scale * pb[i];
}

template <class T>
Mat<T> add(Mat<T> a, const Mat<T>& b) {
  axpy(a, b);
  return a;
}

template <class T>
Mat<T> scaled(Mat<T> a, T s) {
  for (auto& v : a.values()) v *= s;
  return a;
}

template <class T>
T sum(const Mat<T>& m) {
  T acc{};
  for (T v : m.values()) acc += v;
  return acc;
}

/// Sum of elementwise products.
template <class T>
T dot_all(const Mat<T>& a, const Mat<T>& b) {
  detail::require_same_shape(a, b, "dot_all");
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Adds a 1 x cols bias row to every row.
template <class T>
void add_row_bias(Mat<T>& m, const Mat<T>& bias) {
  if (bias.rows() != 1 || bias.cols() != m.cols())
    throw Error("add_row_bias: bias must be 1x" + std::to_string(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias[c];
  }
}

/// acc (1 x cols) += column sums of m.
template <class T>
void accumulate_col_sums(Mat<T>& acc, const Mat<T>& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += row[c];
  }
}

template <class T>
Mat<T> slice_rows(const Mat<T>& m, std::size_t begin, std::size_t end) {
  Mat<T> out(end - begin, m.cols());
  std::copy(m.data() + begin * m.cols(), m.data() + end * m.cols(), out.data());
  return out;
}

template <class T>
Mat<T> slice_cols(const Mat<T>& m, std::size_t begin, std::size_t end) {
  Mat<T> out(m.rows(), end - begin);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = m(r, c);
  return out;
}

template <class T>
void set_cols(Mat<T>& m, std::size_t begin, const Mat<T>& block) {
  for (std::size_t r = 0; r < block.rows(); ++r)
    for (std::size_t c = 0; c < block.cols(); ++c) m(r, begin + c) = block(r, c);
}

template <class T>
Mat<T> stack_rows(std::span<const Mat<T>> parts) {
  std::size_t rows = 0;
  std::size_t cols = parts.empty() ? 0 : parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("stack_rows: column mismatch");
    rows += p.rows();
  }
  Mat<T> out(rows, cols);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + at * cols);
    at += p.rows();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products. Loops are ordered so the innermost runs over contiguous
// memory of the output and the right operand.

/// a * b
template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.rows())
    throw Error("matmul: " + detail::shape_str(a.rows(), a.cols()) + " * " +
                detail::shape_str(b.rows(), b.cols()));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Mat<T> out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    T* orow = out.data() + i * m;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// a * b^T
template <class T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.cols())
    throw Error("matmul_nt: " + detail::shape_str(a.rows(), a.cols()) +
                " * (" + detail::shape_str(b.rows(), b.cols()) + ")^T");
  return matmul(a, transpose(b));
}

/// a^T * b
template <class T>
Mat<T> matmul_tn(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows())
    throw Error("matmul_tn: (" + detail::shape_str(a.rows(), a.cols()) +
                ")^T * " + detail::shape_str(b.rows(), b.cols()));
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  Mat<T> out(n, m);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * n;
    const T* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = arow[i];
      T* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// acc += a^T * b without allocating the product.
template <class T>
void accumulate_matmul_tn(Mat<T>& acc, const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || acc.rows() != a.cols() || acc.cols() != b.cols())
    throw Error("accumulate_matmul_tn: shape mismatch");
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * n;
    const T* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = arow[i];
      T* orow = acc.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Softmax.

/// Row-wise softmax with per-row max subtraction. When `valid_cols` is given,
/// columns at or beyond it are treated as -inf logits and receive zero mass.
template <class T>
Mat<T> softmax_rows(const Mat<T>& m,
                    std::size_t valid_cols = std::numeric_limits<std::size_t>::max()) {
  require_finite(m, "softmax_rows");
  const std::size_t live = std::min(valid_cols, m.cols());
  if (live == 0 && m.cols() > 0) throw Error("softmax_rows: every column masked");
  Mat<T> out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto o = out.row(r);
    T mx = in[0];
    for (std::size_t c = 1; c < live; ++c) mx = std::max(mx, in[c]);
    T z{};
    for (std::size_t c = 0; c < live; ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (std::size_t c = 0; c < live; ++c) o[c] /= z;
  }
  return out;
}

/// Gradient of the logits given softmax output `p` and upstream `dp`.
template <class T>
Mat<T> softmax_rows_backward(const Mat<T>& p, const Mat<T>& dp) {
  detail::require_same_shape(p, dp, "softmax_rows_backward");
  Mat<T> out(p.rows(), p.cols());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto pr = p.row(r);
    auto dr = dp.row(r);
    T inner{};
    for (std::size_t c = 0; c < p.cols(); ++c) inner += pr[c] * dr[c];
    auto o = out.row(r);
    for (std::size_t c = 0; c < p.cols(); ++c) o[c] = pr[c] * (dr[c] - inner);
  }
  return out;
}

// ---------------------------------------------------------------------------
// GELU, exact Gaussian CDF form.

template <class T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> /
                std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

template <class T>
Mat<T> gelu(const Mat<T>& m) {
  require_finite(m, "gelu");
  Mat<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = gelu_scalar(m[i]);
  return out;
}

/// Gradient w.r.t. the gelu input `x` given upstream `dy`.
template <class T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  detail::require_same_shape(x, dy, "gelu_backward");
  Mat<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = dy[i] * gelu_grad_scalar(x[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Row L2 normalization.

template <class T>
struct NormalizedRows {
  Mat<T> out;
  std::vector<T> norms;
};

template <class T>
NormalizedRows<T> l2_normalize_rows_with_norms(const Mat<T>& m) {
  NormalizedRows<T> res{Mat<T>(m.rows(), m.cols()), std::vector<T>(m.rows())};
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    T sq{};
    for (T v : in) sq += v * v;
    const T n = std::sqrt(sq);
    if (!(n > T(0)) || !std::isfinite(n))
      throw NumericError("l2_normalize_rows: row " + std::to_string(r) +
                  " has zero or non-finite norm");
    res.norms[r] = n;
    auto o = res.out.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) o[c] = in[c] / n;
  }
  return res;
}

template <class T>
Mat<T> l2_normalize_rows(const Mat<T>& m) {
  return l2_normalize_rows_with_norms(m).out;
}

/// Gradient w.r.t. the unnormalized rows, given normalized output `y`, the
/// row norms, and upstream `dy`.
template <class T>
Mat<T> l2_normalize_rows_backward(const Mat<T>& y, std::span<const T> norms,
                                  const Mat<T>& dy) {
  detail::require_same_shape(y, dy, "l2_normalize_rows_backward");
  Mat<T> out(y.rows(), y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto dr = dy.row(r);
    const T proj = dot<T>(yr, dr);
    auto o = out.row(r);
    for (std::size_t c = 0; c < y.cols(); ++c) o[c] = (dr[c] - yr[c] * proj) / norms[r];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dot-product attention weights.

/// softmax_rows(q * k^T / scale)
template <class T>
Mat<T> attn_weights(const Mat<T>& q, const Mat<T>& k, T scale) {
  if (q.cols() != k.cols())
    throw Error("attn_weights: query dim " + std::to_string(q.cols()) +
                " != key dim " + std::to_string(k.cols()));
  if (!(scale > T(0))) throw Error("attn_weights: scale must be positive");
  return softmax_rows(scaled(matmul_nt(q, k), T(1) / scale));
}

// ---------------------------------------------------------------------------
// Layer normalization over rows with learned scale/shift (1 x cols each).

template <class T>
struct LayerNormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& shift,
                  LayerNormCache<T>& cache, T eps = T(1e-5)) {
  const std::size_t n = x.cols();
  cache.xhat = Mat<T>(x.rows(), n);
  cache.rstd.assign(x.rows(), T{});
  Mat<T> out(x.rows(), n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    T mean{};
    for (T v : in) mean += v;
    mean /= T(n);
    T var{};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= T(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    cache.rstd[r] = rstd;
    auto xh = cache.xhat.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      xh[c] = (in[c] - mean) * rstd;
      o[c] = xh[c] * gain[c] + shift[c];
    }
  }
  return out;
}

/// Returns dx; accumulates parameter gradients into dgain/dshift.
template <class T>
Mat<T> layer_norm_backward(const LayerNormCache<T>& cache, const Mat<T>& gain,
                           const Mat<T>& dy, Mat<T>& dgain, Mat<T>& dshift) {
  const std::size_t n = dy.cols();
  Mat<T> dx(dy.rows(), n);
  std::vector<T> g(n);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    auto d = dy.row(r);
    auto xh = cache.xhat.row(r);
    T mean_g{}, mean_gx{};
    for (std::size_t c = 0; c < n; ++c) {
      dgain[c] += d[c] * xh[c];
      dshift[c] += d[c];
      g[c] = d[c] * gain[c];
      mean_g += g[c];
      mean_gx += g[c] * xh[c];
    }
    mean_g /= T(n);
    mean_gx /= T(n);
    auto o = dx.row(r);
    for (std::size_t c = 0; c < n; ++c)
      o[c] = cache.rstd[r] * (g[c] - mean_g - xh[c] * mean_gx);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Initialization.

template <class T>
Mat<T> randn(std::size_t rows, std::size_t cols, T stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Mat<T> out(rows, cols);
  for (auto& v : out.values()) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace mulalign
