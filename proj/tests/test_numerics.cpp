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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "mulalign/gradcheck.hpp"
#include "mulalign/numerics.hpp"

using namespace mulalign;

namespace {

Mat<double> naive_matmul(const Mat<double>& a, const Mat<double>& b) {
  Mat<double> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += (long double)a(i, k) * b(k, j);
      out(i, j) = (double)s;
    }
  return out;
}

long double gelu_oracle(long double x) {
  return 0.5L * x * (1.0L + std::erf(x / std::sqrt(2.0L)));
}

}  // namespace

TEST(Mat, ShapeAndAccess) {
  Mat<double> m(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.row(1)[0], 4.0);
  EXPECT_THROW(Mat<double>(2, 2, std::vector<double>{1, 2, 3}), Error);
}

TEST(Mat, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = randn<double>(5, 7, 1.0, rng), b = randn<double>(7, 4, 1.0, rng);
    const auto want = naive_matmul(a, b);
    const auto got = matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    const auto nt = matmul_nt(a, transpose(b));
    const auto tn = matmul_tn(transpose(a), b);
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NEAR(nt[i], want[i], 1e-12);
      EXPECT_NEAR(tn[i], want[i], 1e-12);
    }
  }
  EXPECT_THROW(matmul(Mat<double>(2, 3), Mat<double>(2, 3)), Error);
}

TEST(Softmax, Examples) {
  const auto p = softmax_rows(Mat<double>(1, 2, {0.0, std::log(3.0)}));
  EXPECT_NEAR(p[0], 0.25, 1e-12);
  EXPECT_NEAR(p[1], 0.75, 1e-12);
  const auto big = softmax_rows(Mat<double>(1, 2, {1000.0, 0.0}));
  EXPECT_TRUE(all_finite(big));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);
  const auto u = softmax_rows(Mat<double>(1, 4, 2.5));
  for (double v : u.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, RejectsNonFinite) {
  Mat<double> m(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(softmax_rows(m), Error);
  m[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax_rows(m), Error);
}

TEST(Softmax, MaskedColumnsGetNoMass) {
  const auto p = softmax_rows(Mat<double>(1, 4, {1.0, 2.0, 50.0, 80.0}), 2);
  EXPECT_EQ(p[2], 0.0);
  EXPECT_EQ(p[3], 0.0);
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-15);
}

TEST(Softmax, RowsSumToOneProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const double sd = std::pow(10.0, trial % 4);
    const auto p = softmax_rows(randn<double>(6, 9, sd, rng));
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0;
      for (double v : p.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Gelu, MatchesErfOracle) {
  EXPECT_NEAR(gelu_scalar(1.0), 0.8413447, 1e-7);
  EXPECT_EQ(gelu_scalar(0.0), 0.0);
  for (double x = -6.0; x <= 6.0; x += 0.37)
    EXPECT_NEAR(gelu_scalar(x), (double)gelu_oracle(x), 1e-14) << x;
  // derivative against a central difference of the oracle
  for (double x = -4.0; x <= 4.0; x += 0.41) {
    const long double h = 1e-6L;
    const double fd = (double)((gelu_oracle(x + h) - gelu_oracle(x - h)) / (2 * h));
    EXPECT_NEAR(gelu_grad_scalar(x), fd, 1e-8) << x;
  }
}

TEST(L2Normalize, ExamplesAndErrors) {
  const auto y = l2_normalize_rows(Mat<double>(1, 2, {3.0, 4.0}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
  EXPECT_THROW(l2_normalize_rows(Mat<double>(2, 3)), Error);
}

TEST(L2Normalize, UnitNormProperty) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto y = l2_normalize_rows(randn<double>(4, 7, 0.01 + trial, rng));
    for (std::size_t r = 0; r < y.rows(); ++r)
      EXPECT_NEAR(std::sqrt(dot<double>(y.row(r), y.row(r))), 1.0, 1e-12);
  }
}

TEST(Attention, IdentityExample) {
  Mat<double> eye(2, 2, {1, 0, 0, 1});
  const auto a = attn_weights(eye, eye, 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(a(0, 0), e / (e + 1), 1e-12);
  EXPECT_NEAR(a(0, 1), 1 / (e + 1), 1e-12);
  EXPECT_NEAR(a(1, 1), e / (e + 1), 1e-12);
  EXPECT_THROW(attn_weights(eye, Mat<double>(2, 3), 1.0), Error);
}

TEST(LayerNorm, NormalizesRows) {
  std::mt19937_64 rng(2);
  const auto x = randn<double>(5, 16, 3.0, rng);
  LayerNormCache<double> c;
  const auto y = layer_norm(x, Mat<double>(1, 16, 1.0), Mat<double>(1, 16, 0.0), c);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double m = 0, v = 0;
    for (double t : y.row(r)) m += t;
    m /= 16;
    for (double t : y.row(r)) v += (t - m) * (t - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-4);
  }
}

TEST(GradCheck, SquareExample) {
  DiffBlock sq{"square", {}, [](const Mat<double>& x) { return Mat<double>(1, 1, x[0] * x[0]); },
               [](const Mat<double>& x, const Mat<double>& up) {
                 return BlockGradients{Mat<double>(1, 1, 2 * x[0] * up[0]), {}};
               }};
  const auto rep = grad_check(sq, Mat<double>(1, 1, 1.0), 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_rel_err, 1e-8);
  EXPECT_NEAR(rep.worst_numeric, 2.0, 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  DiffBlock bad{"bad", {}, [](const Mat<double>& x) { return Mat<double>(1, 1, x[0] * x[0]); },
                [](const Mat<double>& x, const Mat<double>& up) {
                  return BlockGradients{Mat<double>(1, 1, 3 * x[0] * up[0]), {}};
                }};
  const auto rep = grad_check(bad, Mat<double>(1, 1, 1.0), 1e-5, 1e-4);
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.worst_tensor, "<input>");
}

TEST(GradCheck, NonFiniteLossNamesParameter) {
  Mat<double> w(1, 1, 0.0);
  DiffBlock blk{"log", {{"w", &w}},
                [&](const Mat<double>&) { return Mat<double>(1, 1, std::log(w[0])); },
                [&](const Mat<double>& x, const Mat<double>&) {
                  return BlockGradients{Mat<double>(x.rows(), x.cols()), {Mat<double>(1, 1, 0.0)}};
                }};
  try {
    grad_check(blk, Mat<double>(1, 1, 1.0), 1e-5, 1e-4);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
}

TEST(GradCheck, RejectsBadEps) {
  DiffBlock id{"id", {}, [](const Mat<double>& x) { return x; },
               [](const Mat<double>&, const Mat<double>& up) { return BlockGradients{up, {}}; }};
  EXPECT_THROW(grad_check(id, Mat<double>(1, 1, 1.0), 1e-1, 1e-4), Error);
}
