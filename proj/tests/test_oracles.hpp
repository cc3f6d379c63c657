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

// Deliberately naive reference implementations. They share no code with the
// library beyond the Mat container.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "mulalign/numerics.hpp"

namespace mulalign::testing {

inline Mat<double> unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<double> m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      m(r, c) = n(rng);
      s += m(r, c) * m(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) m(r, c) /= std::sqrt(s);
  }
  return m;
}

inline long double naive_dot(const Mat<double>& a, std::size_t i, const Mat<double>& b,
                             std::size_t j) {
  long double s = 0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += (long double)a(i, c) * b(j, c);
  return s;
}

/// -(1/B) sum_i sum_j log(1 / (1 + exp(-z_ij * (e^t <u_i, w_j> + b))))
inline double sigmoid_oracle(const Mat<double>& u, const Mat<double>& w, double t_logit,
                             double bias) {
  const std::size_t B = u.rows();
  long double total = 0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) {
      const long double z = i == j ? 1 : -1;
      const long double logit = std::exp((long double)t_logit) * naive_dot(u, i, w, j) + bias;
      total += std::log1p(std::exp(-z * logit));
    }
  return (double)(total / B);
}

/// Rebuild each row of x from `other` by scaled dot-product attention, then a
/// symmetric within-sample cross-entropy on <x_i, R_j> / tau.
inline double recon_oracle(const Mat<double>& x, const Mat<double>& other, double tau) {
  const std::size_t n = x.rows(), m = other.rows(), d = x.cols();
  std::vector<std::vector<long double>> R(n, std::vector<long double>(d, 0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<long double> w(m);
    long double z = 0;
    for (std::size_t j = 0; j < m; ++j) {
      w[j] = std::exp(naive_dot(x, i, other, j) / std::sqrt((long double)d));
      z += w[j];
    }
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t c = 0; c < d; ++c) R[i][c] += w[j] / z * other(j, c);
  }
  std::vector<std::vector<long double>> Z(n, std::vector<long double>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < d; ++c) Z[i][j] += x(i, c) * R[j][c];
      Z[i][j] /= tau;
    }
  long double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long double row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += std::exp(Z[i][j]);
      col += std::exp(Z[j][i]);
    }
    loss += -(Z[i][i] - std::log(row)) - (Z[i][i] - std::log(col));
  }
  return (double)(loss / (2.0L * n));
}

/// Per subcaption index: pool each valid sample's patches by attention, then
/// a sigmoid contrast over the samples holding that index. Averaged over the
/// indices that appear.
inline double sap_oracle(const std::vector<Mat<double>>& v, const std::vector<Mat<double>>& subs,
                         const std::vector<std::vector<std::uint8_t>>& mask, double t_logit,
                         double bias) {
  const std::size_t B = v.size(), m_max = subs[0].rows(), d = v[0].cols();
  long double total = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < m_max; ++i) {
    std::vector<std::size_t> members;
    for (std::size_t b = 0; b < B; ++b)
      if (mask[b][i]) members.push_back(b);
    if (members.empty()) continue;
    ++used;
    Mat<double> pooled(members.size(), d), text(members.size(), d);
    for (std::size_t k = 0; k < members.size(); ++k) {
      const auto& patches = v[members[k]];
      std::vector<long double> a(patches.rows());
      long double z = 0;
      for (std::size_t p = 0; p < patches.rows(); ++p) {
        a[p] = std::exp(naive_dot(subs[members[k]], i, patches, p) / std::sqrt((long double)d));
        z += a[p];
      }
      long double norm = 0;
      std::vector<long double> bar(d, 0);
      for (std::size_t p = 0; p < patches.rows(); ++p)
        for (std::size_t c = 0; c < d; ++c) bar[c] += a[p] / z * patches(p, c);
      for (auto x : bar) norm += x * x;
      for (std::size_t c = 0; c < d; ++c) {
        pooled(k, c) = (double)(bar[c] / std::sqrt(norm));
        text(k, c) = subs[members[k]](i, c);
      }
    }
    total += sigmoid_oracle(pooled, text, t_logit, bias);
  }
  return (double)(total / used);
}

/// Recall@k by fully sorting each row (stable, descending) and locating the
/// ground-truth column.
inline double recall_sort_oracle(const Mat<double>& s, const std::vector<std::size_t>& truth,
                                 std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    std::vector<std::size_t> idx(s.cols());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return s(r, a) > s(r, b); });
    const auto pos = std::find(idx.begin(), idx.end(), truth[r]) - idx.begin();
    if (static_cast<std::size_t>(pos) < k) ++hits;
  }
  return double(hits) / double(s.rows());
}

}  // namespace mulalign::testing
