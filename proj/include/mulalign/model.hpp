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

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mulalign/calibration.hpp"
#include "mulalign/data.hpp"
#include "mulalign/encoders.hpp"
#include "mulalign/objectives.hpp"
#include "mulalign/params.hpp"

namespace mulalign {

struct ModelConfig {
  VisionConfig vision;
  TextConfig text;
  std::size_t text_tokens = caption_token_capacity(3);  // text calibrator capacity K
  double calib_ratio = 0.5;
  std::size_t calib_dk = 0;  // 0 selects d / 2
  double calib_init_std = 0.02;
  double t_logit_init = std::log(10.0);
  double bias_init = -10.0;
  std::uint64_t seed = 1;

  /// Canonical text used for the checkpoint config hash.
  std::string canonical() const {
    std::ostringstream s;
    s << "vision:" << vision.channels << ',' << vision.patch_size << ',' << vision.grid << ','
      << vision.d_model << ',' << vision.n_layers << ',' << vision.n_heads << ','
      << vision.mlp_hidden << ',' << vision.d_out << ',' << vision.normalize_local
      << ";text:" << text.vocab_size << ',' << text.d_model << ',' << text.n_layers << ','
      << text.n_heads << ',' << text.mlp_hidden << ',' << text.d_out << ',' << text.base_len
      << ',' << text.keep << ',' << text.ratio << ',' << text.eot_id << ','
      << text.normalize_local << ";calib:" << text_tokens << ',' << calib_ratio << ','
      << calib_dk;
    return s.str();
  }

  /// FNV-1a over canonical().
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    return h;
  }

  /// Small dimensions for exhaustive finite-difference checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.vision = {3, 2, 2, 8, 1, 2, 12, 6, true};
    c.text.vocab_size = Vocabulary().size();
    c.text.d_model = 8;
    c.text.n_layers = 1;
    c.text.n_heads = 2;
    c.text.mlp_hidden = 12;
    c.text.d_out = 6;
    c.text.base_len = 24;
    c.text.keep = 8;
    c.text.ratio = 2;
    c.text_tokens = caption_token_capacity(2);
    c.calib_init_std = 0.5;
    c.t_logit_init = 0.5;
    c.bias_init = -1.0;
    return c;
  }
};

template <class T>
struct Model {
  using scalar_type = T;

  ModelConfig cfg;
  VisionEncoder<T> vision;
  TextEncoder<T> text;
  Calibrator<T> calib_v;
  Calibrator<T> calib_t;
  Mat<T> t_logit;  // 1 x 1, log temperature of every batch-level sigmoid term
  Mat<T> bias;     // 1 x 1

  static Model init(const ModelConfig& cfg) {
    if (cfg.vision.d_out != cfg.text.d_out)
      throw Error("Model: vision and text output dimensions differ");
    std::mt19937_64 rng(cfg.seed);
    Model m;
    m.cfg = cfg;
    m.vision = VisionEncoder<T>::init(cfg.vision, rng);
    m.text = TextEncoder<T>::init(cfg.text, rng);
    const std::size_t d = cfg.vision.d_out;
    m.calib_v = Calibrator<T>::init(
        {cfg.vision.num_patches(), cfg.calib_ratio, d, cfg.calib_dk, cfg.calib_init_std}, rng);
    m.calib_t = Calibrator<T>::init(
        {cfg.text_tokens, cfg.calib_ratio, d, cfg.calib_dk, cfg.calib_init_std}, rng);
    m.t_logit = Mat<T>(1, 1, static_cast<T>(cfg.t_logit_init));
    m.bias = Mat<T>(1, 1, static_cast<T>(cfg.bias_init));
    return m;
  }

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    VisionEncoder<T>::visit(s.vision, f);
    TextEncoder<T>::visit(s.text, f);
    Calibrator<T>::visit(s.calib_v, f, "calib_v.");
    Calibrator<T>::visit(s.calib_t, f, "calib_t.");
    f("loss.t_logit", s.t_logit, ParamInfo{ParamGroup::refinement, false});
    f("loss.bias", s.bias, ParamInfo{ParamGroup::refinement, false});
  }

  /// Same architecture at a different precision.
  template <class U>
  Model<U> cast() const {
    Model<U> out = Model<U>::init(cfg);
    auto src = collect_params(const_cast<Model&>(*this));
    auto dst = collect_params(out);
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].value = src[i].value->template cast<U>();
    return out;
  }
};

/// Per-sample encoder caches kept for the backward pass.
template <class T>
struct SampleForward {
  typename VisionEncoder<T>::Cache image;
  typename TextEncoder<T>::Cache long_text, short_text;
  std::vector<typename TextEncoder<T>::Cache> subs;  // m_max entries; unused when masked
  Mat<T> image_out, long_out, short_out;
};

template <class T>
DualOutputs<T> encode_sample(const Model<T>& m, const TokenizedBatch& batch, std::size_t b,
                             SampleForward<T>& fw) {
  DualOutputs<T> o;
  fw.image_out = m.vision.forward_patches(
      patchify<T>(batch.images[b], m.cfg.vision.patch_size), fw.image);
  o.v_cls = slice_rows(fw.image_out, 0, 1);
  o.v_loc = slice_rows(fw.image_out, 1, fw.image_out.rows());
  fw.long_out = m.text.forward(batch.long_tokens[b], fw.long_text);
  auto split = TextEncoder<T>::split(fw.long_out, fw.long_text.eot_pos);
  o.t_long_eot = std::move(split.eot);
  o.t_long_loc = std::move(split.loc);
  fw.short_out = m.text.forward(batch.short_tokens[b], fw.short_text);
  o.t_short_eot = slice_rows(fw.short_out, fw.short_text.eot_pos, fw.short_text.eot_pos + 1);
  const std::size_t d = m.cfg.text.d_out;
  o.sub = Mat<T>(batch.m_max, d);
  o.sub_mask = batch.sub_mask[b];
  fw.subs.resize(batch.m_max);
  for (std::size_t i = 0; i < batch.m_max; ++i) {
    if (!batch.sub_mask[b][i]) continue;
    const Mat<T> out = m.text.forward(batch.sub_tokens[b][i], fw.subs[i]);
    auto src = out.row(fw.subs[i].eot_pos);
    std::copy(src.begin(), src.end(), o.sub.row(i).begin());
  }
  return o;
}

template <class T>
void backward_sample(const Model<T>& m, const TokenizedBatch& batch, std::size_t b,
                     const SampleForward<T>& fw, const DualOutputs<T>& g, Model<T>& grads) {
  const std::size_t d = m.cfg.text.d_out;
  Mat<T> dimg(fw.image_out.rows(), d);
  std::copy(g.v_cls.data(), g.v_cls.data() + d, dimg.data());
  std::copy(g.v_loc.data(), g.v_loc.data() + g.v_loc.size(), dimg.data() + d);
  m.vision.backward(fw.image, dimg, grads.vision);

  Mat<T> dlong(fw.long_out.rows(), d);
  for (std::size_t i = 0, r = 0; i < dlong.rows(); ++i) {
    auto dst = dlong.row(i);
    auto src = i == fw.long_text.eot_pos ? g.t_long_eot.row(0) : g.t_long_loc.row(r++);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  m.text.backward(fw.long_text, dlong, grads.text);

  Mat<T> dshort(fw.short_out.rows(), d);
  std::copy(g.t_short_eot.data(), g.t_short_eot.data() + d,
            dshort.row(fw.short_text.eot_pos).begin());
  m.text.backward(fw.short_text, dshort, grads.text);

  for (std::size_t i = 0; i < batch.m_max; ++i) {
    if (!batch.sub_mask[b][i]) continue;
    Mat<T> dsub(fw.subs[i].tokens.size(), d);
    std::copy(g.sub.row(i).begin(), g.sub.row(i).end(), dsub.row(fw.subs[i].eot_pos).begin());
    m.text.backward(fw.subs[i], dsub, grads.text);
  }
}

/// Loss terms, retained intermediates, and (optionally) gradients for every
/// model parameter.
template <class T>
struct LossBundle {
  T l_global{}, l_word{}, l_sub{}, l_total{};
  T l_recon_image{}, l_recon_text{};
  std::vector<Mat<T>> attn_v2t, attn_t2v, sap_alphas;
  Model<T> grads;
  bool has_grads = false;
};

template <class T>
LossBundle<T> total_loss(const Model<T>& m, const TokenizedBatch& batch, const LossOptions& opt,
                         bool compute_grads = true) {
  const std::size_t B = batch.size();
  if (B == 0) throw Error("total_loss: empty batch");
  std::vector<SampleForward<T>> fw(B);
  std::vector<DualOutputs<T>> outs;
  outs.reserve(B);
  for (std::size_t b = 0; b < B; ++b) outs.push_back(encode_sample(m, batch, b, fw[b]));
  auto obj = objective_from_outputs(outs, m.calib_v, m.calib_t, m.t_logit[0], m.bias[0], opt);
  LossBundle<T> res;
  res.l_global = obj.l_global;
  res.l_word = obj.l_word;
  res.l_sub = obj.l_sub;
  res.l_total = obj.l_total;
  res.l_recon_image = obj.l_recon_image;
  res.l_recon_text = obj.l_recon_text;
  res.attn_v2t = std::move(obj.attn_v2t);
  res.attn_t2v = std::move(obj.attn_t2v);
  res.sap_alphas = std::move(obj.sap_alphas);
  if (!compute_grads) return res;
  res.grads = zeros_like(m);
  res.has_grads = true;
  res.grads.calib_v = std::move(obj.grads.calib_v);
  res.grads.calib_t = std::move(obj.grads.calib_t);
  res.grads.t_logit[0] = obj.grads.dt_logit;
  res.grads.bias[0] = obj.grads.dbias;
  for (std::size_t b = 0; b < B; ++b)
    backward_sample(m, batch, b, fw[b], obj.grads.outputs[b], res.grads);
  return res;
}

}  // namespace mulalign
