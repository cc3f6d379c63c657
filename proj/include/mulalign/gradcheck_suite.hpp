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

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mulalign/gradcheck.hpp"
#include "mulalign/model.hpp"

namespace mulalign {

/// A DiffBlock together with the storage it points into.
struct GradCheckCase {
  std::string name;  // "<module>.<block>"
  std::shared_ptr<void> state;
  DiffBlock block;
  Mat<double> input;
};

namespace detail {

template <class S>
std::shared_ptr<S> make_state(S s) {
  return std::make_shared<S>(std::move(s));
}

inline Mat<double> unit_rows(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  return l2_normalize_rows(randn<double>(r, c, 1.0, rng));
}

/// Two-sample batch from a tiny corpus matching ModelConfig::tiny().
inline TokenizedBatch tiny_batch(std::uint64_t seed) {
  CorpusConfig cc;
  cc.n = 2;
  cc.grid = 2;
  cc.patch_size = 2;
  cc.max_objects = 2;
  cc.seed = seed;
  const auto corpus = generate_corpus(cc);
  const std::vector<std::size_t> idx = {0, 1};
  return make_batch(corpus, idx, Vocabulary());
}

}  // namespace detail

inline GradCheckCase total_loss_case(const std::string& variant, std::uint64_t seed,
                                     double lambda = 1.0,
                                     SampleContrast form = SampleContrast::info_nce) {
  struct State {
    Model<double> model;
    TokenizedBatch batch;
    LossOptions opt;
  };
  ModelConfig cfg = ModelConfig::tiny();
  cfg.seed = seed;
  LossOptions opt;
  opt.variant = variant_from_name(variant);
  opt.lambda_w = opt.lambda_s = lambda;
  opt.tau_tok = 0.5;
  opt.sample_contrast = form;
  auto st = detail::make_state(State{Model<double>::init(cfg), detail::tiny_batch(seed), opt});
  GradCheckCase c;
  c.name = "objectives.total_" + variant;
  c.state = st;
  c.block.name = c.name;
  for (auto& p : collect_params(st->model)) c.block.params.push_back({p.name, p.value});
  State* s = st.get();
  c.block.forward = [s](const Mat<double>&) {
    return Mat<double>(1, 1, total_loss(s->model, s->batch, s->opt, false).l_total);
  };
  c.block.backward = [s](const Mat<double>&, const Mat<double>& up) {
    auto res = total_loss(s->model, s->batch, s->opt, true);
    BlockGradients g;
    for (auto& p : collect_params(res.grads)) g.params.push_back(scaled(*p.value, up[0]));
    return g;
  };
  return c;
}

/// Every differentiable block in the library, at gradient-check scale.
inline std::vector<GradCheckCase> gradcheck_cases(std::uint64_t seed = 11) {
  std::vector<GradCheckCase> cases;
  std::mt19937_64 rng(seed);

  {
    GradCheckCase c;
    c.name = "numerics.softmax_rows";
    c.block = {c.name, {},
               [](const Mat<double>& x) { return softmax_rows(x); },
               [](const Mat<double>& x, const Mat<double>& up) {
                 return BlockGradients{softmax_rows_backward(softmax_rows(x), up), {}};
               }};
    c.input = randn<double>(3, 5, 2.0, rng);
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "numerics.gelu";
    c.block = {c.name, {},
               [](const Mat<double>& x) { return gelu(x); },
               [](const Mat<double>& x, const Mat<double>& up) {
                 return BlockGradients{gelu_backward(x, up), {}};
               }};
    c.input = randn<double>(4, 4, 2.0, rng);
    cases.push_back(std::move(c));
  }
  {
    GradCheckCase c;
    c.name = "numerics.l2_normalize_rows";
    c.block = {c.name, {},
               [](const Mat<double>& x) { return l2_normalize_rows(x); },
               [](const Mat<double>& x, const Mat<double>& up) {
                 const auto n = l2_normalize_rows_with_norms(x);
                 return BlockGradients{
                     l2_normalize_rows_backward(n.out, std::span<const double>(n.norms), up),
                     {}};
               }};
    c.input = randn<double>(3, 4, 1.0, rng);
    cases.push_back(std::move(c));
  }
  {
    struct State {
      Mat<double> gain, shift;
    };
    auto st = detail::make_state(
        State{add(randn<double>(1, 6, 0.3, rng), Mat<double>(1, 6, 1.0)), randn<double>(1, 6, 0.3, rng)});
    GradCheckCase c;
    c.name = "numerics.layer_norm";
    c.state = st;
    State* s = st.get();
    c.block = {c.name,
               {{"gain", &s->gain}, {"shift", &s->shift}},
               [s](const Mat<double>& x) {
                 LayerNormCache<double> cache;
                 return layer_norm(x, s->gain, s->shift, cache);
               },
               [s](const Mat<double>& x, const Mat<double>& up) {
                 LayerNormCache<double> cache;
                 layer_norm(x, s->gain, s->shift, cache);
                 BlockGradients g{Mat<double>(), {Mat<double>(1, 6), Mat<double>(1, 6)}};
                 g.input = layer_norm_backward(cache, s->gain, up, g.params[0], g.params[1]);
                 return g;
               }};
    c.input = randn<double>(3, 6, 1.5, rng);
    cases.push_back(std::move(c));
  }
  {
    struct State {
      Mat<double> keys;
    };
    auto st = detail::make_state(State{randn<double>(4, 3, 1.0, rng)});
    GradCheckCase c;
    c.name = "numerics.attn_weights";
    c.state = st;
    State* s = st.get();
    const double scale = std::sqrt(3.0);
    c.block = {c.name,
               {{"keys", &s->keys}},
               [s, scale](const Mat<double>& q) { return attn_weights(q, s->keys, scale); },
               [s, scale](const Mat<double>& q, const Mat<double>& up) {
                 const Mat<double> p = attn_weights(q, s->keys, scale);
                 const Mat<double> dl = scaled(softmax_rows_backward(p, up), 1.0 / scale);
                 return BlockGradients{matmul(dl, s->keys), {matmul_tn(dl, q)}};
               }};
    c.input = randn<double>(2, 3, 1.0, rng);
    cases.push_back(std::move(c));
  }
  {
    using Block = TransformerBlock<double>;
    auto st = detail::make_state(Block::init({8, 2, 12}, rng));
    GradCheckCase c;
    c.name = "encoders.transformer_block";
    c.state = st;
    Block* s = st.get();
    Block::visit(*s, [&](const std::string& n, Mat<double>& m, ParamInfo) {
      c.block.params.push_back({n, &m});
    });
    c.block.name = c.name;
    c.block.forward = [s](const Mat<double>& x) {
      Block::Cache cache;
      return s->forward(x, cache);
    };
    c.block.backward = [s](const Mat<double>& x, const Mat<double>& up) {
      Block::Cache cache;
      s->forward(x, cache);
      Block gr = zeros_like(*s);
      BlockGradients g;
      g.input = s->backward(cache, up, gr);
      Block::visit(gr, [&](const std::string&, Mat<double>& m, ParamInfo) { g.params.push_back(m); });
      return g;
    };
    c.input = randn<double>(5, 8, 1.0, rng);
    cases.push_back(std::move(c));
  }
  {
    using Enc = VisionEncoder<double>;
    const ModelConfig mc = ModelConfig::tiny();
    auto st = detail::make_state(Enc::init(mc.vision, rng));
    GradCheckCase c;
    c.name = "encoders.vision_encoder";
    c.state = st;
    Enc* s = st.get();
    Enc::visit(*s, [&](const std::string& n, Mat<double>& m, ParamInfo) {
      c.block.params.push_back({n, &m});
    });
    c.block.name = c.name;
    c.block.forward = [s](const Mat<double>& x) {
      Enc::Cache cache;
      return s->forward_patches(x, cache);
    };
    c.block.backward = [s](const Mat<double>& x, const Mat<double>& up) {
      Enc::Cache cache;
      s->forward_patches(x, cache);
      Enc gr = zeros_like(*s);
      BlockGradients g;
      g.input = s->backward(cache, up, gr);
      Enc::visit(gr, [&](const std::string&, Mat<double>& m, ParamInfo) { g.params.push_back(m); });
      return g;
    };
    c.input = randn<double>(mc.vision.num_patches(), mc.vision.patch_dim(), 0.5, rng);
    cases.push_back(std::move(c));
  }
  {
    using Enc = TextEncoder<double>;
    struct State {
      Enc enc;
      std::vector<int> tokens;
    };
    const ModelConfig mc = ModelConfig::tiny();
    const Vocabulary vocab;
    auto st = detail::make_state(
        State{Enc::init(mc.text, rng), tokenize("A big red square at row 1 column 0.", vocab)});
    GradCheckCase c;
    c.name = "encoders.text_encoder";
    c.state = st;
    State* s = st.get();
    Enc::visit(s->enc, [&](const std::string& n, Mat<double>& m, ParamInfo) {
      c.block.params.push_back({n, &m});
    });
    c.block.name = c.name;
    c.block.forward = [s](const Mat<double>&) {
      typename Enc::Cache cache;
      return s->enc.forward(s->tokens, cache);
    };
    c.block.backward = [s](const Mat<double>&, const Mat<double>& up) {
      typename Enc::Cache cache;
      s->enc.forward(s->tokens, cache);
      Enc gr = zeros_like(s->enc);
      s->enc.backward(cache, up, gr);
      BlockGradients g;
      Enc::visit(gr, [&](const std::string&, Mat<double>& m, ParamInfo) { g.params.push_back(m); });
      return g;
    };
    cases.push_back(std::move(c));
  }
  for (const bool padded : {false, true}) {
    using Cal = Calibrator<double>;
    auto st = detail::make_state(Cal::init({6, 0.5, 4, 2, 0.7}, rng));
    st->log_tau[0] = 0.3;
    const std::size_t valid = padded ? 4 : 6;
    GradCheckCase c;
    c.name = padded ? "calibration.calibrator_padded" : "calibration.calibrator";
    c.state = st;
    Cal* s = st.get();
    Cal::visit(*s, [&](const std::string& n, Mat<double>& m, ParamInfo) {
      c.block.params.push_back({n, &m});
    });
    c.block.name = c.name;
    c.block.forward = [s, valid](const Mat<double>& x) {
      Cal::Cache cache;
      return s->forward(x, valid, cache);
    };
    c.block.backward = [s, valid](const Mat<double>& x, const Mat<double>& up) {
      Cal::Cache cache;
      s->forward(x, valid, cache);
      Cal gr = zeros_like(*s);
      BlockGradients g;
      g.input = s->backward(cache, up, gr);
      Cal::visit(gr, [&](const std::string&, Mat<double>& m, ParamInfo) { g.params.push_back(m); });
      return g;
    };
    c.input = randn<double>(6, 4, 1.0, rng);
    if (padded)
      for (std::size_t r = valid; r < 6; ++r)
        for (auto& v : c.input.row(r)) v = 0.0;
    cases.push_back(std::move(c));
  }
  {
    struct State {
      Mat<double> w, t_logit, bias;
    };
    auto st = detail::make_state(
        State{detail::unit_rows(3, 4, rng), Mat<double>(1, 1, 0.7), Mat<double>(1, 1, -1.2)});
    GradCheckCase c;
    c.name = "objectives.sigmoid_contrastive";
    c.state = st;
    State* s = st.get();
    c.block = {c.name,
               {{"w", &s->w}, {"t_logit", &s->t_logit}, {"bias", &s->bias}},
               [s](const Mat<double>& u) {
                 return Mat<double>(
                     1, 1, sigmoid_contrastive(u, s->w, s->t_logit[0], s->bias[0]).loss);
               },
               [s](const Mat<double>& u, const Mat<double>& up) {
                 const auto r = sigmoid_contrastive(u, s->w, s->t_logit[0], s->bias[0]);
                 return BlockGradients{scaled(r.du, up[0]),
                                       {scaled(r.dw, up[0]), Mat<double>(1, 1, r.dt_logit * up[0]),
                                        Mat<double>(1, 1, r.dbias * up[0])}};
               }};
    c.input = detail::unit_rows(3, 4, rng);
    cases.push_back(std::move(c));
  }
  {
    struct State {
      Mat<double> t_long, t_short, t_logit, bias;
    };
    auto st = detail::make_state(State{detail::unit_rows(3, 4, rng), detail::unit_rows(3, 4, rng),
                                       Mat<double>(1, 1, 0.4), Mat<double>(1, 1, -0.8)});
    GradCheckCase c;
    c.name = "objectives.global_loss";
    c.state = st;
    State* s = st.get();
    c.block = {c.name,
               {{"t_long", &s->t_long},
                {"t_short", &s->t_short},
                {"t_logit", &s->t_logit},
                {"bias", &s->bias}},
               [s](const Mat<double>& v) {
                 return Mat<double>(
                     1, 1, global_loss(v, s->t_long, s->t_short, s->t_logit[0], s->bias[0]).loss);
               },
               [s](const Mat<double>& v, const Mat<double>& up) {
                 const auto r = global_loss(v, s->t_long, s->t_short, s->t_logit[0], s->bias[0]);
                 return BlockGradients{
                     scaled(r.dv, up[0]),
                     {scaled(r.dlong, up[0]), scaled(r.dshort, up[0]),
                      Mat<double>(1, 1, r.dt_logit * up[0]), Mat<double>(1, 1, r.dbias * up[0])}};
               }};
    c.input = detail::unit_rows(3, 4, rng);
    cases.push_back(std::move(c));
  }
  for (auto [mode, form, label] :
       {std::tuple{WprMode::bidirectional, SampleContrast::info_nce, "wpr_bidirectional"},
        std::tuple{WprMode::text_only, SampleContrast::info_nce, "wpr_text_only"},
        std::tuple{WprMode::image_only, SampleContrast::info_nce, "wpr_image_only"},
        std::tuple{WprMode::bidirectional, SampleContrast::sigmoid, "wpr_sigmoid_form"}}) {
    struct State {
      Mat<double> t;
    };
    auto st = detail::make_state(State{detail::unit_rows(2, 4, rng)});
    GradCheckCase c;
    c.name = std::string("objectives.") + label;
    c.state = st;
    State* s = st.get();
    const WprMode m = mode;
    const SampleContrast f = form;
    c.block = {c.name,
               {{"t", &s->t}},
               [s, m, f](const Mat<double>& v) {
                 return Mat<double>(1, 1, wpr_loss(v, s->t, m, 0.5, f).loss);
               },
               [s, m, f](const Mat<double>& v, const Mat<double>& up) {
                 const auto r = wpr_loss(v, s->t, m, 0.5, f);
                 return BlockGradients{scaled(r.dv, up[0]), {scaled(r.dt, up[0])}};
               }};
    c.input = detail::unit_rows(3, 4, rng);
    cases.push_back(std::move(c));
  }
  {
    struct State {
      std::vector<Mat<double>> vs, ts;
      Mat<double> t_logit, bias;
    };
    State init{{}, {}, Mat<double>(1, 1, 0.5), Mat<double>(1, 1, -0.5)};
    for (std::size_t b = 0; b < 3; ++b) {
      init.vs.push_back(randn<double>(2 + b, 4, 1.0, rng));
      init.ts.push_back(randn<double>(3, 4, 1.0, rng));
    }
    auto st = detail::make_state(std::move(init));
    GradCheckCase c;
    c.name = "objectives.wpr_naive_batch";
    c.state = st;
    State* s = st.get();
    for (std::size_t b = 0; b < 3; ++b) {
      c.block.params.push_back({"v" + std::to_string(b), &s->vs[b]});
      c.block.params.push_back({"t" + std::to_string(b), &s->ts[b]});
    }
    c.block.params.push_back({"t_logit", &s->t_logit});
    c.block.params.push_back({"bias", &s->bias});
    c.block.name = c.name;
    c.block.forward = [s](const Mat<double>&) {
      return Mat<double>(1, 1, naive_word_loss(s->vs, s->ts, s->t_logit[0], s->bias[0]).loss);
    };
    c.block.backward = [s](const Mat<double>&, const Mat<double>& up) {
      const auto r = naive_word_loss(s->vs, s->ts, s->t_logit[0], s->bias[0]);
      BlockGradients g;
      for (std::size_t b = 0; b < 3; ++b) {
        g.params.push_back(scaled(r.dv[b], up[0]));
        g.params.push_back(scaled(r.dt[b], up[0]));
      }
      g.params.emplace_back(1, 1, r.dt_logit * up[0]);
      g.params.emplace_back(1, 1, r.dbias * up[0]);
      return g;
    };
    cases.push_back(std::move(c));
  }
  {
    struct State {
      std::vector<Mat<double>> vs, subs;
      std::vector<std::vector<std::uint8_t>> mask;
      Mat<double> t_logit, bias;
    };
    State init{{}, {}, {{1, 1, 1}, {1, 0, 1}, {1, 1, 0}}, Mat<double>(1, 1, 0.6),
               Mat<double>(1, 1, -0.4)};
    for (std::size_t b = 0; b < 3; ++b) {
      init.vs.push_back(detail::unit_rows(3, 4, rng));
      Mat<double> sub = detail::unit_rows(3, 4, rng);
      for (std::size_t i = 0; i < 3; ++i)
        if (!init.mask[b][i]) sub.row(i)[0] = 0.0;
      init.subs.push_back(sub);
    }
    auto st = detail::make_state(std::move(init));
    GradCheckCase c;
    c.name = "objectives.sap";
    c.state = st;
    State* s = st.get();
    for (std::size_t b = 0; b < 3; ++b) {
      c.block.params.push_back({"v" + std::to_string(b), &s->vs[b]});
      c.block.params.push_back({"sub" + std::to_string(b), &s->subs[b]});
    }
    c.block.params.push_back({"t_logit", &s->t_logit});
    c.block.params.push_back({"bias", &s->bias});
    c.block.name = c.name;
    c.block.forward = [s](const Mat<double>&) {
      return Mat<double>(1, 1, sap_loss(s->vs, s->subs, s->mask, s->t_logit[0], s->bias[0]).loss);
    };
    c.block.backward = [s](const Mat<double>&, const Mat<double>& up) {
      const auto r = sap_loss(s->vs, s->subs, s->mask, s->t_logit[0], s->bias[0]);
      BlockGradients g;
      for (std::size_t b = 0; b < 3; ++b) {
        g.params.push_back(scaled(r.dv[b], up[0]));
        g.params.push_back(scaled(r.dsub[b], up[0]));
      }
      g.params.emplace_back(1, 1, r.dt_logit * up[0]);
      g.params.emplace_back(1, 1, r.dbias * up[0]);
      return g;
    };
    cases.push_back(std::move(c));
  }
  for (const auto& v : variant_names()) cases.push_back(total_loss_case(v, seed));
  return cases;
}

inline GradCheckReport run_gradcheck_case(GradCheckCase& c, double eps = 1e-5,
                                          double tol = 1e-4) {
  return grad_check(c.block, c.input, eps, tol);
}

}  // namespace mulalign
