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

#include <algorithm>
#include <random>

#include "mulalign/encoders.hpp"

using namespace mulalign;

namespace {

Image random_image(std::size_t c, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Image img{c, side, side, std::vector<float>(c * side * side)};
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

void expect_unit_rows(const Mat<double>& m) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    EXPECT_NEAR(std::sqrt(dot<double>(m.row(r), m.row(r))), 1.0, 1e-5);
}

TextConfig small_text() {
  TextConfig c;
  c.vocab_size = 20;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_hidden = 24;
  c.d_out = 8;
  c.base_len = 12;
  c.keep = 4;
  c.ratio = 2;
  return c;
}

}  // namespace

TEST(PositionalExtension, ScalarExample) {
  Mat<double> pos(4, 1, {10, 20, 0, 1});
  const auto out = extend_positional_embeddings(pos, 2, 2);
  ASSERT_EQ(out.rows(), 6u);
  const std::vector<double> want = {10, 20, 0, 0.5, 1, 1};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(out[i], want[i]);
}

TEST(PositionalExtension, LengthFormula) {
  Mat<double> pos(77, 3, 1.0);
  EXPECT_EQ(extend_positional_embeddings(pos, 20, 4).rows(), 248u);
  EXPECT_EQ(20u + 57u * 4u, 248u);
}

TEST(PositionalExtension, RatioOneIsIdentity) {
  std::mt19937_64 rng(1);
  const auto pos = randn<double>(30, 5, 1.0, rng);
  EXPECT_EQ(extend_positional_embeddings(pos, 7, 1), pos);
}

TEST(PositionalExtension, KeepsPrefixBitExact) {
  std::mt19937_64 rng(2);
  const auto pos = randn<double>(20, 4, 1.0, rng);
  const auto out = extend_positional_embeddings(pos, 6, 3);
  for (std::size_t i = 0; i < 6 * 4; ++i) EXPECT_EQ(out[i], pos[i]);
}

TEST(PositionalExtension, LinearRampStaysLinear) {
  const std::size_t L = 40, keep = 10, ratio = 4;
  Mat<double> pos(L, 2);
  for (std::size_t i = 0; i < L; ++i) {
    pos(i, 0) = 3.0 + 0.5 * double(i);
    pos(i, 1) = -2.0 * double(i);
  }
  const auto out = extend_positional_embeddings(pos, keep, ratio);
  // tail rows sampling below the last source row lie on the same ramp
  for (std::size_t j = 0; j + ratio <= (L - 1 - keep) * ratio; ++j) {
    const double src = double(keep) + double(j) / double(ratio);
    EXPECT_NEAR(out(keep + j, 0), 3.0 + 0.5 * src, 1e-12);
    EXPECT_NEAR(out(keep + j, 1), -2.0 * src, 1e-12);
  }
}

TEST(PositionalExtension, Errors) {
  Mat<double> pos(5, 2);
  EXPECT_THROW(extend_positional_embeddings(pos, 5, 2), Error);
  EXPECT_THROW(extend_positional_embeddings(pos, 0, 2), Error);
  EXPECT_THROW(extend_positional_embeddings(pos, 2, 0), Error);
}

TEST(VisionEncoder, SingleChannelPatchCount) {
  VisionConfig cfg{1, 4, 2, 16, 1, 2, 32, 8, true};
  std::mt19937_64 rng(3);
  const auto enc = VisionEncoder<double>::init(cfg, rng);
  const auto img = random_image(1, 8, 4);
  EXPECT_EQ(patchify<double>(img, 4).rows(), 4u);
  const auto e = enc.encode(img);
  EXPECT_EQ(e.cls.rows(), 1u);
  EXPECT_EQ(e.loc.rows(), 4u);
  EXPECT_EQ(e.loc.cols(), 8u);
}

TEST(VisionEncoder, UnitNormAndDeterministic) {
  VisionConfig cfg;
  std::mt19937_64 rng(5);
  const auto enc = VisionEncoder<double>::init(cfg, rng);
  const auto img = random_image(3, 16, 6);
  const auto a = enc.encode(img), b = enc.encode(img);
  EXPECT_EQ(a.cls, b.cls);
  EXPECT_EQ(a.loc, b.loc);
  expect_unit_rows(a.cls);
  expect_unit_rows(a.loc);
}

TEST(VisionEncoder, ShapeErrors) {
  VisionConfig cfg;
  std::mt19937_64 rng(5);
  const auto enc = VisionEncoder<double>::init(cfg, rng);
  EXPECT_THROW(enc.encode(random_image(3, 12, 1)), Error);
  EXPECT_THROW(enc.encode(random_image(1, 16, 1)), Error);
  EXPECT_THROW(patchify<double>(random_image(1, 10, 1), 4), Error);
}

TEST(TextEncoder, SingleLocalToken) {
  std::mt19937_64 rng(7);
  const auto enc = TextEncoder<double>::init(small_text(), rng);
  const std::vector<int> toks = {5, 0};
  const auto e = enc.encode(toks);
  EXPECT_EQ(e.loc.rows(), 1u);
  expect_unit_rows(e.eot);
  expect_unit_rows(e.loc);
}

TEST(TextEncoder, EotAndLengthErrors) {
  std::mt19937_64 rng(7);
  const auto enc = TextEncoder<double>::init(small_text(), rng);
  EXPECT_THROW(enc.encode(std::vector<int>{3, 4}), Error);
  EXPECT_THROW(enc.encode(std::vector<int>{0, 4, 0}), Error);
  EXPECT_THROW(enc.encode(std::vector<int>{25, 0}), Error);
  std::vector<int> long_seq(small_text().max_len() + 1, 3);
  long_seq.back() = 0;
  EXPECT_THROW(enc.encode(long_seq), Error);
  std::vector<int> max_seq(small_text().max_len(), 3);
  max_seq.back() = 0;
  EXPECT_NO_THROW(enc.encode(max_seq));
}

TEST(TextEncoder, LocalOrderFollowsTokens) {
  // with a zeroed positional table, bidirectional attention is
  // permutation-equivariant, so swapping tokens swaps local rows
  TextConfig cfg = small_text();
  cfg.ratio = 1;
  std::mt19937_64 rng(9);
  auto enc = TextEncoder<double>::init(cfg, rng);
  enc.pos_embed.fill(0.0);
  const auto a = enc.encode(std::vector<int>{3, 7, 9, 0});
  const auto b = enc.encode(std::vector<int>{9, 7, 3, 0});
  for (std::size_t c = 0; c < a.loc.cols(); ++c) {
    EXPECT_NEAR(a.loc(0, c), b.loc(2, c), 1e-12);
    EXPECT_NEAR(a.loc(2, c), b.loc(0, c), 1e-12);
    EXPECT_NEAR(a.loc(1, c), b.loc(1, c), 1e-12);
  }
}

TEST(TextEncoder, PositionalTableAffectsEot) {
  std::mt19937_64 rng(11);
  auto enc = TextEncoder<double>::init(small_text(), rng);
  const std::vector<int> toks = {3, 4, 5, 0};
  const auto a = enc.encode(toks);
  enc.pos_embed(1, 0) += 0.5;
  const auto b = enc.encode(toks);
  EXPECT_NE(a.eot, b.eot);
}

TEST(TextEncoder, SubcaptionsMatchIndependentCalls) {
  std::mt19937_64 rng(13);
  const auto enc = TextEncoder<double>::init(small_text(), rng);
  const std::vector<std::vector<int>> subs = {{3, 4, 0}, {5, 6, 7, 0}, {3, 4, 0}};
  const auto m = enc.encode_subcaptions(subs);
  ASSERT_EQ(m.rows(), 3u);
  for (std::size_t i = 0; i < subs.size(); ++i) {
    const auto e = enc.encode(subs[i]);
    for (std::size_t c = 0; c < m.cols(); ++c) EXPECT_NEAR(m(i, c), e.eot[c], 1e-6);
  }
  for (std::size_t c = 0; c < m.cols(); ++c) EXPECT_EQ(m(0, c), m(2, c));
}

TEST(TextEncoder, PositionalTableIsExtendedAtInit) {
  std::mt19937_64 rng(1);
  TextConfig cfg;
  const auto enc = TextEncoder<float>::init(cfg, rng);
  EXPECT_EQ(enc.pos_embed.rows(), 20u + 44u * 4u);
  EXPECT_EQ(cfg.max_len(), enc.pos_embed.rows());
}
