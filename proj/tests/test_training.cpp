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
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "mulalign/training.hpp"

using namespace mulalign;

namespace {

// Narrow model sized for the default corpus images (4x4 grid of 4px patches).
ModelConfig small_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vision = {3, 4, 4, 16, 1, 2, 32, 8, true};
  c.text.vocab_size = Vocabulary().size();
  c.text.d_model = 16;
  c.text.n_layers = 1;
  c.text.n_heads = 2;
  c.text.mlp_hidden = 32;
  c.text.d_out = 8;
  c.seed = seed;
  return c;
}

const std::vector<SyntheticSample>& corpus512() {
  static const auto c = generate_corpus(CorpusConfig{});
  return c;
}

template <class T>
bool same_params(Model<T>& a, Model<T>& b) {
  auto pa = collect_params(a), pb = collect_params(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!std::ranges::equal(pa[i].value->values(), pb[i].value->values())) return false;
  return true;
}

TrainConfig quick_config() {
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.warmup_steps = 4;
  tc.lr_backbone = 1e-3;
  tc.lr_refine = 1e-2;
  return tc;
}

std::span<const SyntheticSample> first(std::size_t n) {
  return std::span<const SyntheticSample>(corpus512().data(), n);
}

}  // namespace

TEST(LearningRate, WarmupExamples) {
  EXPECT_DOUBLE_EQ(lr_at(100, 200, 2e-4), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(200, 200, 2e-4), 2e-4);
  EXPECT_DOUBLE_EQ(lr_at(5000, 200, 2e-4), 2e-4);
  EXPECT_DOUBLE_EQ(lr_at(1, 0, 1e-5), 1e-5);
}

TEST(LearningRate, MonotoneAndBounded) {
  for (std::uint64_t warm : {1u, 7u, 200u})
    for (std::uint64_t s = 1; s < 400; ++s) {
      EXPECT_LE(lr_at(s, warm, 1.0), 1.0);
      EXPECT_LE(lr_at(s, warm, 1.0), lr_at(s + 1, warm, 1.0));
    }
}

TEST(AdamW, SingleStepExamples) {
  AdamWConfig hp;
  Mat<double> p(1, 1, {1.0}), m(1, 1), v(1, 1);
  adamw_update(p, Mat<double>(1, 1, {1.0}), m, v, 1, 0.1, 0.0, hp);
  EXPECT_NEAR(p[0], 0.9, 1e-8);

  Mat<double> q(1, 2, {1.0, -3.0}), m2(1, 2), v2(1, 2);
  adamw_update(q, Mat<double>(1, 2), m2, v2, 1, 0.1, 0.0, hp);
  EXPECT_EQ(q[0], 1.0);
  EXPECT_EQ(q[1], -3.0);
  adamw_update(q, Mat<double>(1, 2), m2, v2, 2, 0.1, 0.05, hp);
  EXPECT_NEAR(q[0], 0.995, 1e-15);
  EXPECT_NEAR(q[1], -2.985, 1e-15);
  adamw_update(q, Mat<double>(1, 2, {4.0, 5.0}), m2, v2, 3, 0.0, 0.05, hp);
  EXPECT_NEAR(q[0], 0.995, 1e-15);
  EXPECT_NEAR(q[1], -2.985, 1e-15);
}

TEST(AdamW, GroupRatesAndDecayFlags) {
  auto model = Model<double>::init(small_config());
  auto before = model;
  auto grads = zeros_like(model);
  auto state = OptimState<double>::fresh(model);
  AdamWConfig hp;
  hp.weight_decay = 1.0;
  adamw_step(model, grads, state, 0.1, 0.2, hp);
  EXPECT_EQ(state.step, 1u);
  auto now = collect_params(model), old = collect_params(before);
  std::set<ParamGroup> groups;
  for (std::size_t i = 0; i < now.size(); ++i) {
    groups.insert(now[i].info.group);
    const double scale = !now[i].info.decay ? 1.0
                         : now[i].info.group == ParamGroup::backbone ? 0.9
                                                                      : 0.8;
    for (std::size_t k = 0; k < now[i].value->size(); ++k)
      ASSERT_NEAR((*now[i].value)[k], scale * (*old[i].value)[k], 1e-15) << now[i].name;
  }
  EXPECT_EQ(groups.size(), 2u);
}

TEST(AdamW, NonFiniteGradientIsDivergence) {
  auto model = Model<double>::init(small_config());
  auto grads = zeros_like(model);
  grads.calib_v.w_q[3] = std::numeric_limits<double>::quiet_NaN();
  auto state = OptimState<double>::fresh(model);
  try {
    adamw_step(model, grads, state, 0.1, 0.1, AdamWConfig{});
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 1u);
    EXPECT_NE(std::string(e.what()).find("calib_v"), std::string::npos);
  }
}

TEST(Params, GroupsPartitionTheModel) {
  auto model = Model<double>::init(small_config());
  std::set<std::string> names;
  std::size_t backbone = 0, refinement = 0;
  Model<double>::visit(model, [&](const std::string& name, Mat<double>&, ParamInfo info) {
    EXPECT_TRUE(names.insert(name).second) << name;
    (info.group == ParamGroup::backbone ? backbone : refinement)++;
    const bool refine_name = name.rfind("calib_", 0) == 0 || name.rfind("loss.", 0) == 0 ||
                             name.find("head") != std::string::npos;
    EXPECT_EQ(info.group == ParamGroup::refinement, refine_name) << name;
  });
  EXPECT_GT(backbone, 0u);
  EXPECT_GT(refinement, 0u);
}

TEST(Fit, ZeroEpochsIsANoOp) {
  auto model = Model<double>::init(small_config());
  auto before = model;
  TrainConfig tc = quick_config();
  tc.epochs = 0;
  const auto res = fit(model, first(32), tc);
  EXPECT_TRUE(res.log.empty());
  EXPECT_TRUE(same_params(model, before));
}

TEST(Fit, RejectsBadSetup) {
  auto model = Model<double>::init(small_config());
  TrainConfig tc = quick_config();
  EXPECT_THROW(fit(model, first(4), tc), Error);
  tc.batch_size = 1;
  EXPECT_THROW(fit(model, first(32), tc), Error);
}

TEST(Fit, FixedSeedIsBitIdentical) {
  auto a = Model<double>::init(small_config(3));
  auto b = Model<double>::init(small_config(3));
  const auto ra = fit(a, first(64), quick_config());
  const auto rb = fit(b, first(64), quick_config());
  ASSERT_EQ(ra.log.size(), 8u);
  ASSERT_EQ(rb.log.size(), 8u);
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].l_total, rb.log[i].l_total);
  EXPECT_TRUE(same_params(a, b));
}

TEST(Fit, LogRecordsScheduleAndTerms) {
  auto model = Model<double>::init(small_config());
  const auto res = fit(model, first(64), quick_config());
  for (const auto& r : res.log) {
    EXPECT_DOUBLE_EQ(r.lr_backbone, lr_at(r.step, 4, 1e-3));
    EXPECT_DOUBLE_EQ(r.lr_refine, lr_at(r.step, 4, 1e-2));
    EXPECT_NEAR(r.l_total, r.l_global + r.l_word + r.l_sub, 1e-9 * std::abs(r.l_total));
  }
  const auto j = to_json(res.log.front(), variant_from_name("global_only"));
  EXPECT_TRUE(j.contains("l_global"));
  EXPECT_FALSE(j.contains("l_word"));
  EXPECT_FALSE(j.contains("l_sub"));
  EXPECT_EQ(j.at("time").get<std::string>().back(), 'Z');
}

TEST(Fit, DivergenceStopsTraining) {
  auto model = Model<double>::init(small_config());
  TrainConfig tc = quick_config();
  tc.divergence_threshold = 1e-3;
  Trainer<double> tr(model, first(64), tc);
  EXPECT_THROW(tr.step(), DivergenceError);
  EXPECT_EQ(tr.state().step, 0u);
}

TEST(Fit, FullVariantLossTrendsDown) {
  auto model = Model<float>::init(small_config());
  TrainConfig tc;  // 512 samples, batch 16, 8 epochs
  const auto res = fit(model, std::span(corpus512()), tc);
  ASSERT_EQ(res.log.size(), 256u);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 32; ++i) {
    head += res.log[i].l_total;
    tail += res.log[res.log.size() - 1 - i].l_total;
  }
  EXPECT_LT(tail, head);
  EXPECT_LT(res.log.back().l_total, res.log.front().l_total);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto model = Model<double>::init(small_config(5));
  auto state = OptimState<double>::fresh(model);
  fit(model, first(16), quick_config());
  const auto bytes = serialize_checkpoint(make_checkpoint(model, state, "variant=full\n"));
  const auto ck = parse_checkpoint(bytes);
  EXPECT_EQ(ck.meta(), "variant=full\n");
  EXPECT_EQ(serialize_checkpoint(ck), bytes);
  auto other = Model<double>::init(small_config(5));
  OptimState<double> st2;
  restore_checkpoint(ck, other, &st2);
  EXPECT_TRUE(same_params(model, other));
  EXPECT_EQ(st2.step, state.step);
}

TEST(Checkpoint, CorruptionIsReported) {
  auto model = Model<double>::init(small_config());
  const auto good = serialize_checkpoint(make_checkpoint(model, OptimState<double>::fresh(model)));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(
      {
        try {
          parse_checkpoint(bad_magic);
        } catch (const Error& e) {
          EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
          throw;
        }
      },
      Error);

  auto truncated = good;
  truncated.resize(good.size() / 2);
  try {
    parse_checkpoint(truncated);
    FAIL() << "truncation accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }

  auto flipped = good;
  flipped[good.size() - 9] ^= 0x40;  // inside the last tensor's data
  try {
    parse_checkpoint(flipped);
    FAIL() << "CRC mismatch accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }

  auto bad_dtype = good;
  bad_dtype[4 + 4 + 8 + 8 + 4 + 4 + 11] = 3;  // dtype of "meta/config"
  EXPECT_THROW(parse_checkpoint(bad_dtype), Error);
}

TEST(Checkpoint, ConfigHashMismatchNeedsForce) {
  auto model = Model<double>::init(small_config());
  auto ck = make_checkpoint(model, OptimState<double>::fresh(model));
  ck.config_hash ^= 1;
  EXPECT_THROW(restore_checkpoint(ck, model, static_cast<OptimState<double>*>(nullptr)), Error);
  EXPECT_NO_THROW(restore_checkpoint(ck, model, static_cast<OptimState<double>*>(nullptr), true));
  ck.config_hash ^= 1;
  ck.version = 2;
  EXPECT_THROW(restore_checkpoint(ck, model, static_cast<OptimState<double>*>(nullptr)), Error);
  auto wider = small_config();
  wider.vision.d_out = 10;
  wider.text.d_out = 10;
  EXPECT_NE(wider.hash(), model.cfg.hash());
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  TrainConfig tc = quick_config();
  tc.epochs = 2;
  auto straight = Model<double>::init(small_config(9));
  fit(straight, first(32), tc);

  auto part = Model<double>::init(small_config(9));
  Trainer<double> first_half(part, first(32), tc);
  first_half.run(5);
  const auto path = (std::filesystem::temp_directory_path() / "mulalign_resume.ckpt").string();
  save_checkpoint(path, part, first_half.state(), "resume");

  auto resumed = Model<double>::init(small_config(1234));
  OptimState<double> state;
  restore_checkpoint(load_checkpoint(path), resumed, &state);
  Trainer<double> second_half(resumed, first(32), tc, state);
  EXPECT_EQ(second_half.run().size(), 3u);
  EXPECT_TRUE(same_params(straight, resumed));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), Error);
}
