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
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mulalign/numerics.hpp"
#include "mulalign/params.hpp"

namespace mulalign {

/// Planar image: pixels[(c * height + y) * width + x].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Stretches the positional table past `keep` rows by `ratio` using linear
/// interpolation. Output tail row j samples source index keep + j / ratio,
/// blending floor and ceil rows and clamping at the last source row.
template <class T>
Mat<T> extend_positional_embeddings(const Mat<T>& pos, std::size_t keep,
                                    std::size_t ratio) {
  const std::size_t len = pos.rows();
  if (keep == 0 || keep >= len)
    throw Error("extend_positional_embeddings: keep must satisfy 0 < keep < " +
                std::to_string(len) + ", got " + std::to_string(keep));
  if (ratio < 1) throw Error("extend_positional_embeddings: ratio must be >= 1");
  const std::size_t tail = (len - keep) * ratio;
  Mat<T> out(keep + tail, pos.cols());
  std::copy(pos.data(), pos.data() + keep * pos.cols(), out.data());
  for (std::size_t j = 0; j < tail; ++j) {
    const std::size_t lo = keep + j / ratio;
    const std::size_t hi = std::min(lo + 1, len - 1);
    const T frac = T(j % ratio) / T(ratio);
    auto dst = out.row(keep + j);
    auto a = pos.row(lo);
    auto b = pos.row(hi);
    for (std::size_t c = 0; c < pos.cols(); ++c)
      dst[c] = (T(1) - frac) * a[c] + frac * b[c];
  }
  return out;
}

struct TransformerConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
};

/// Pre-norm transformer layer: x + MHA(LN(x)), then + MLP(LN(.)).
/// Attention is bidirectional.
template <class T>
struct TransformerBlock {
  using scalar_type = T;

  std::size_t n_heads = 1;
  Mat<T> ln1_g, ln1_b;
  Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Mat<T> ln2_g, ln2_b;
  Mat<T> w1, b1, w2, b2;

  static TransformerBlock init(const TransformerConfig& cfg, std::mt19937_64& rng) {
    if (cfg.d_model % cfg.n_heads != 0)
      throw Error("TransformerBlock: d_model must be divisible by n_heads");
    const std::size_t d = cfg.d_model, h = cfg.mlp_hidden;
    const T sd = T(1) / std::sqrt(T(d));
    TransformerBlock b;
    b.n_heads = cfg.n_heads;
    b.ln1_g = Mat<T>(1, d, T(1));
    b.ln1_b = Mat<T>(1, d);
    b.wq = randn<T>(d, d, sd, rng);
    b.bq = Mat<T>(1, d);
    b.wk = randn<T>(d, d, sd, rng);
    b.bk = Mat<T>(1, d);
    b.wv = randn<T>(d, d, sd, rng);
    b.bv = Mat<T>(1, d);
    b.wo = randn<T>(d, d, sd, rng);
    b.bo = Mat<T>(1, d);
    b.ln2_g = Mat<T>(1, d, T(1));
    b.ln2_b = Mat<T>(1, d);
    b.w1 = randn<T>(d, h, sd, rng);
    b.b1 = Mat<T>(1, h);
    b.w2 = randn<T>(h, d, T(1) / std::sqrt(T(h)), rng);
    b.b2 = Mat<T>(1, d);
    return b;
  }

  template <class Self, class F>
  static void visit(Self& s, F&& f, const std::string& prefix = "",
                    ParamGroup group = ParamGroup::backbone) {
    const ParamInfo w{group, true}, nd{group, false};
    f(prefix + "ln1.g", s.ln1_g, nd);
    f(prefix + "ln1.b", s.ln1_b, nd);
    f(prefix + "attn.wq", s.wq, w);
    f(prefix + "attn.bq", s.bq, nd);
    f(prefix + "attn.wk", s.wk, w);
    f(prefix + "attn.bk", s.bk, nd);
    f(prefix + "attn.wv", s.wv, w);
    f(prefix + "attn.bv", s.bv, nd);
    f(prefix + "attn.wo", s.wo, w);
    f(prefix + "attn.bo", s.bo, nd);
    f(prefix + "ln2.g", s.ln2_g, nd);
    f(prefix + "ln2.b", s.ln2_b, nd);
    f(prefix + "mlp.w1", s.w1, w);
    f(prefix + "mlp.b1", s.b1, nd);
    f(prefix + "mlp.w2", s.w2, w);
    f(prefix + "mlp.b2", s.b2, nd);
  }

  struct Cache {
    LayerNormCache<T> ln1, ln2;
    Mat<T> a, q, k, v;       // a = LN1(x)
    std::vector<Mat<T>> probs;  // per head
    Mat<T> o;                // concatenated head outputs
    Mat<T> m, h;             // m = LN2(x1), h = m*w1 + b1 (pre-activation)
    Mat<T> g;                // gelu(h)
  };

  Mat<T> forward(const Mat<T>& x, Cache& c) const {
    const std::size_t n = x.rows(), d = x.cols(), dh = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    c.a = layer_norm(x, ln1_g, ln1_b, c.ln1);
    c.q = matmul(c.a, wq);
    add_row_bias(c.q, bq);
    c.k = matmul(c.a, wk);
    add_row_bias(c.k, bk);
    c.v = matmul(c.a, wv);
    add_row_bias(c.v, bv);
    c.o = Mat<T>(n, d);
    c.probs.resize(n_heads);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      const Mat<T> qh = slice_cols(c.q, hd * dh, (hd + 1) * dh);
      const Mat<T> kh = slice_cols(c.k, hd * dh, (hd + 1) * dh);
      const Mat<T> vh = slice_cols(c.v, hd * dh, (hd + 1) * dh);
      c.probs[hd] = softmax_rows(scaled(matmul_nt(qh, kh), inv_sqrt));
      set_cols(c.o, hd * dh, matmul(c.probs[hd], vh));
    }
    Mat<T> x1 = matmul(c.o, wo);
    add_row_bias(x1, bo);
    axpy(x1, x);
    c.m = layer_norm(x1, ln2_g, ln2_b, c.ln2);
    c.h = matmul(c.m, w1);
    add_row_bias(c.h, b1);
    c.g = gelu(c.h);
    Mat<T> y = matmul(c.g, w2);
    add_row_bias(y, b2);
    axpy(y, x1);
    return y;
  }

  /// Accumulates parameter gradients into `gr` and returns dL/dx.
  Mat<T> backward(const Cache& c, const Mat<T>& dy, TransformerBlock& gr) const {
    const std::size_t d = dy.cols(), dh = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    // MLP branch.
    accumulate_matmul_tn(gr.w2, c.g, dy);
    accumulate_col_sums(gr.b2, dy);
    Mat<T> dh_pre = gelu_backward(c.h, matmul_nt(dy, w2));
    accumulate_matmul_tn(gr.w1, c.m, dh_pre);
    accumulate_col_sums(gr.b1, dh_pre);
    Mat<T> dx1 = layer_norm_backward(c.ln2, ln2_g, matmul_nt(dh_pre, w1), gr.ln2_g,
                                     gr.ln2_b);
    axpy(dx1, dy);
    // Attention branch.
    accumulate_matmul_tn(gr.wo, c.o, dx1);
    accumulate_col_sums(gr.bo, dx1);
    const Mat<T> d_o = matmul_nt(dx1, wo);
    Mat<T> dq(dy.rows(), d), dk(dy.rows(), d), dv(dy.rows(), d);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      const Mat<T> qh = slice_cols(c.q, hd * dh, (hd + 1) * dh);
      const Mat<T> kh = slice_cols(c.k, hd * dh, (hd + 1) * dh);
      const Mat<T> vh = slice_cols(c.v, hd * dh, (hd + 1) * dh);
      const Mat<T> doh = slice_cols(d_o, hd * dh, (hd + 1) * dh);
      const Mat<T>& p = c.probs[hd];
      set_cols(dv, hd * dh, matmul_tn(p, doh));
      const Mat<T> ds =
          scaled(softmax_rows_backward(p, matmul_nt(doh, vh)), inv_sqrt);
      set_cols(dq, hd * dh, matmul(ds, kh));
      set_cols(dk, hd * dh, matmul_tn(ds, qh));
    }
    accumulate_matmul_tn(gr.wq, c.a, dq);
    accumulate_col_sums(gr.bq, dq);
    accumulate_matmul_tn(gr.wk, c.a, dk);
    accumulate_col_sums(gr.bk, dk);
    accumulate_matmul_tn(gr.wv, c.a, dv);
    accumulate_col_sums(gr.bv, dv);
    Mat<T> da = matmul_nt(dq, wq);
    axpy(da, matmul_nt(dk, wk));
    axpy(da, matmul_nt(dv, wv));
    Mat<T> dx = layer_norm_backward(c.ln1, ln1_g, da, gr.ln1_g, gr.ln1_b);
    axpy(dx, dx1);
    return dx;
  }
};

namespace detail {

/// Final LN, projection head, and row normalization shared by both towers.
template <class T>
struct HeadCache {
  LayerNormCache<T> ln;
  Mat<T> ln_out;
  Mat<T> projected;
  NormalizedRows<T> normalized;  // only rows flagged in `normalize` are touched
  std::vector<bool> normalize;
};

template <class T>
Mat<T> head_forward(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b,
                    const Mat<T>& head, std::vector<bool> normalize, HeadCache<T>& c) {
  c.ln_out = layer_norm(x, g, b, c.ln);
  c.projected = matmul(c.ln_out, head);
  c.normalize = std::move(normalize);
  c.normalized = l2_normalize_rows_with_norms(c.projected);
  Mat<T> out = c.projected;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (!c.normalize[r]) continue;
    auto src = c.normalized.out.row(r);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

template <class T>
Mat<T> head_backward(const HeadCache<T>& c, const Mat<T>& g, const Mat<T>& head,
                     const Mat<T>& dout, Mat<T>& dg, Mat<T>& db, Mat<T>& dhead) {
  Mat<T> dproj =
      l2_normalize_rows_backward(c.normalized.out, std::span<const T>(c.normalized.norms), dout);
  for (std::size_t r = 0; r < dproj.rows(); ++r) {
    if (c.normalize[r]) continue;
    auto src = dout.row(r);
    std::copy(src.begin(), src.end(), dproj.row(r).begin());
  }
  accumulate_matmul_tn(dhead, c.ln_out, dproj);
  return layer_norm_backward(c.ln, g, matmul_nt(dproj, head), dg, db);
}

}  // namespace detail

/// Splits an image into a P x (channels * patch * patch) matrix, patches in
/// row-major grid order, features ordered (channel, y, x).
template <class T>
Mat<T> patchify(const Image& img, std::size_t patch) {
  if (patch == 0 || img.height % patch != 0 || img.width % patch != 0)
    throw Error("patchify: image " + std::to_string(img.height) + "x" +
                std::to_string(img.width) + " not divisible by patch size " +
                std::to_string(patch));
  if (img.pixels.size() != img.channels * img.height * img.width)
    throw Error("patchify: pixel buffer size mismatch");
  const std::size_t gh = img.height / patch, gw = img.width / patch;
  Mat<T> out(gh * gw, img.channels * patch * patch);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      auto row = out.row(py * gw + px);
      std::size_t f = 0;
      for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            row[f++] = static_cast<T>(img.at(c, py * patch + y, px * patch + x));
    }
  return out;
}

struct VisionConfig {
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t grid = 4;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t d_out = 32;
  bool normalize_local = true;
  double embed_std = 0.5;  // init std of the CLS and positional tables

  std::size_t num_patches() const { return grid * grid; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
};

/// Global [CLS] row followed by P local rows, all in the shared d_out space.
template <class T>
struct ImageEmbedding {
  Mat<T> cls;  // 1 x d
  Mat<T> loc;  // P x d
};

template <class T>
struct VisionEncoder {
  using scalar_type = T;

  VisionConfig cfg;
  Mat<T> patch_proj, patch_bias, cls_embedding, pos_embed;
  std::vector<TransformerBlock<T>> blocks;
  Mat<T> ln_g, ln_b, head;

  static VisionEncoder init(const VisionConfig& cfg, std::mt19937_64& rng) {
    VisionEncoder e;
    e.cfg = cfg;
    const std::size_t dm = cfg.d_model;
    e.patch_proj = randn<T>(cfg.patch_dim(), dm, T(1) / std::sqrt(T(cfg.patch_dim())), rng);
    e.patch_bias = Mat<T>(1, dm);
    e.cls_embedding = randn<T>(1, dm, T(cfg.embed_std), rng);
    e.pos_embed = randn<T>(cfg.num_patches() + 1, dm, T(cfg.embed_std), rng);
    const TransformerConfig tc{dm, cfg.n_heads, cfg.mlp_hidden};
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      e.blocks.push_back(TransformerBlock<T>::init(tc, rng));
    e.ln_g = Mat<T>(1, dm, T(1));
    e.ln_b = Mat<T>(1, dm);
    e.head = randn<T>(dm, cfg.d_out, T(1) / std::sqrt(T(dm)), rng);
    return e;
  }

  template <class Self, class F>
  static void visit(Self& s, F&& f, const std::string& prefix = "vision.") {
    const ParamInfo w{ParamGroup::backbone, true}, nd{ParamGroup::backbone, false};
    f(prefix + "patch_proj", s.patch_proj, w);
    f(prefix + "patch_bias", s.patch_bias, nd);
    f(prefix + "cls", s.cls_embedding, w);
    f(prefix + "pos", s.pos_embed, w);
    for (std::size_t l = 0; l < s.blocks.size(); ++l)
      TransformerBlock<T>::visit(s.blocks[l], f,
                                 prefix + "blocks." + std::to_string(l) + ".");
    f(prefix + "ln_f.g", s.ln_g, nd);
    f(prefix + "ln_f.b", s.ln_b, nd);
    f(prefix + "head", s.head, ParamInfo{ParamGroup::refinement, true});
  }

  struct Cache {
    Mat<T> patches;
    std::vector<typename TransformerBlock<T>::Cache> blocks;
    detail::HeadCache<T> head;
  };

  /// (P+1) x d_out: row 0 is CLS, rows 1..P are patches.
  Mat<T> forward_patches(const Mat<T>& patches, Cache& c) const {
    const std::size_t P = cfg.num_patches();
    if (patches.rows() != P || patches.cols() != cfg.patch_dim())
      throw Error("VisionEncoder: expected " + std::to_string(P) + "x" +
                  std::to_string(cfg.patch_dim()) + " patches, got " +
                  std::to_string(patches.rows()) + "x" + std::to_string(patches.cols()));
    c.patches = patches;
    Mat<T> tokens = matmul(patches, patch_proj);
    add_row_bias(tokens, patch_bias);
    Mat<T> x(P + 1, cfg.d_model);
    std::copy(cls_embedding.data(), cls_embedding.data() + cfg.d_model, x.data());
    std::copy(tokens.data(), tokens.data() + tokens.size(), x.data() + cfg.d_model);
    axpy(x, pos_embed);
    c.blocks.resize(blocks.size());
    for (std::size_t l = 0; l < blocks.size(); ++l) x = blocks[l].forward(x, c.blocks[l]);
    std::vector<bool> norm(P + 1, cfg.normalize_local);
    norm[0] = true;
    return detail::head_forward(x, ln_g, ln_b, head, std::move(norm), c.head);
  }

  /// Returns the gradient w.r.t. the patch matrix.
  Mat<T> backward(const Cache& c, const Mat<T>& dout, VisionEncoder& gr) const {
    Mat<T> dx = detail::head_backward(c.head, ln_g, head, dout, gr.ln_g, gr.ln_b, gr.head);
    for (std::size_t l = blocks.size(); l-- > 0;)
      dx = blocks[l].backward(c.blocks[l], dx, gr.blocks[l]);
    axpy(gr.pos_embed, dx);
    for (std::size_t j = 0; j < cfg.d_model; ++j) gr.cls_embedding[j] += dx[j];
    const Mat<T> dtok = slice_rows(dx, 1, dx.rows());
    accumulate_matmul_tn(gr.patch_proj, c.patches, dtok);
    accumulate_col_sums(gr.patch_bias, dtok);
    return matmul_nt(dtok, patch_proj);
  }

  ImageEmbedding<T> encode(const Image& img) const {
    if (img.channels != cfg.channels)
      throw Error("encode_image: expected " + std::to_string(cfg.channels) +
                  " channels, got " + std::to_string(img.channels));
    if (img.height != cfg.grid * cfg.patch_size || img.width != cfg.grid * cfg.patch_size)
      throw Error("encode_image: image must be " +
                  std::to_string(cfg.grid * cfg.patch_size) + " pixels per side");
    Cache c;
    const Mat<T> out = forward_patches(patchify<T>(img, cfg.patch_size), c);
    return {slice_rows(out, 0, 1), slice_rows(out, 1, out.rows())};
  }
};

struct TextConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t d_out = 32;
  std::size_t base_len = 64;  // positional table length before extension
  std::size_t keep = 20;
  std::size_t ratio = 4;
  int eot_id = 0;
  bool normalize_local = true;
  double embed_std = 0.5;  // init std of the token and positional tables

  std::size_t max_len() const {
    return ratio <= 1 ? base_len : keep + (base_len - keep) * ratio;
  }
};

template <class T>
struct TextEmbedding {
  Mat<T> eot;  // 1 x d
  Mat<T> loc;  // K x d, non-EOT tokens in order
};

template <class T>
struct TextEncoder {
  using scalar_type = T;

  TextConfig cfg;
  Mat<T> token_embed, pos_embed;
  std::vector<TransformerBlock<T>> blocks;
  Mat<T> ln_g, ln_b, head;

  static TextEncoder init(const TextConfig& cfg, std::mt19937_64& rng) {
    if (cfg.eot_id < 0 || static_cast<std::size_t>(cfg.eot_id) >= cfg.vocab_size)
      throw Error("TextEncoder: eot_id out of vocabulary range");
    TextEncoder e;
    e.cfg = cfg;
    const std::size_t dm = cfg.d_model;
    e.token_embed = randn<T>(cfg.vocab_size, dm, T(cfg.embed_std), rng);
    e.pos_embed = randn<T>(cfg.base_len, dm, T(cfg.embed_std), rng);
    if (cfg.ratio > 1) e.pos_embed = extend_positional_embeddings(e.pos_embed, cfg.keep, cfg.ratio);
    const TransformerConfig tc{dm, cfg.n_heads, cfg.mlp_hidden};
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      e.blocks.push_back(TransformerBlock<T>::init(tc, rng));
    e.ln_g = Mat<T>(1, dm, T(1));
    e.ln_b = Mat<T>(1, dm);
    e.head = randn<T>(dm, cfg.d_out, T(1) / std::sqrt(T(dm)), rng);
    return e;
  }

  template <class Self, class F>
  static void visit(Self& s, F&& f, const std::string& prefix = "text.") {
    const ParamInfo w{ParamGroup::backbone, true}, nd{ParamGroup::backbone, false};
    f(prefix + "token_embed", s.token_embed, w);
    f(prefix + "pos", s.pos_embed, w);
    for (std::size_t l = 0; l < s.blocks.size(); ++l)
      TransformerBlock<T>::visit(s.blocks[l], f,
                                 prefix + "blocks." + std::to_string(l) + ".");
    f(prefix + "ln_f.g", s.ln_g, nd);
    f(prefix + "ln_f.b", s.ln_b, nd);
    f(prefix + "head", s.head, ParamInfo{ParamGroup::refinement, true});
  }

  struct Cache {
    std::vector<int> tokens;
    std::size_t eot_pos = 0;
    std::vector<typename TransformerBlock<T>::Cache> blocks;
    detail::HeadCache<T> head;
  };

  /// Position of the single EOT token; throws on zero/multiple EOT,
  /// overlength, or out-of-range ids.
  std::size_t validate(std::span<const int> tokens) const {
    if (tokens.size() > pos_embed.rows())
      throw Error("encode_text: sequence length " + std::to_string(tokens.size()) +
                  " exceeds maximum " + std::to_string(pos_embed.rows()));
    std::size_t eot_count = 0, eot_pos = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab_size)
        throw Error("encode_text: token id " + std::to_string(tokens[i]) +
                    " outside vocabulary");
      if (tokens[i] == cfg.eot_id) {
        ++eot_count;
        eot_pos = i;
      }
    }
    if (eot_count != 1)
      throw Error("encode_text: expected exactly one EOT token, found " +
                  std::to_string(eot_count));
    return eot_pos;
  }

  /// n x d_out, one row per input token.
  Mat<T> forward(std::span<const int> tokens, Cache& c) const {
    c.eot_pos = validate(tokens);
    c.tokens.assign(tokens.begin(), tokens.end());
    const std::size_t n = tokens.size(), dm = cfg.d_model;
    Mat<T> x(n, dm);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = x.row(i);
      auto te = token_embed.row(static_cast<std::size_t>(tokens[i]));
      auto pe = pos_embed.row(i);
      for (std::size_t j = 0; j < dm; ++j) dst[j] = te[j] + pe[j];
    }
    c.blocks.resize(blocks.size());
    for (std::size_t l = 0; l < blocks.size(); ++l) x = blocks[l].forward(x, c.blocks[l]);
    std::vector<bool> norm(n, cfg.normalize_local);
    norm[c.eot_pos] = true;
    return detail::head_forward(x, ln_g, ln_b, head, std::move(norm), c.head);
  }

  void backward(const Cache& c, const Mat<T>& dout, TextEncoder& gr) const {
    Mat<T> dx = detail::head_backward(c.head, ln_g, head, dout, gr.ln_g, gr.ln_b, gr.head);
    for (std::size_t l = blocks.size(); l-- > 0;)
      dx = blocks[l].backward(c.blocks[l], dx, gr.blocks[l]);
    for (std::size_t i = 0; i < c.tokens.size(); ++i) {
      auto src = dx.row(i);
      auto te = gr.token_embed.row(static_cast<std::size_t>(c.tokens[i]));
      auto pe = gr.pos_embed.row(i);
      for (std::size_t j = 0; j < cfg.d_model; ++j) {
        te[j] += src[j];
        pe[j] += src[j];
      }
    }
  }

  TextEmbedding<T> encode(std::span<const int> tokens) const {
    Cache c;
    const Mat<T> out = forward(tokens, c);
    return split(out, c.eot_pos);
  }

  /// Row i equals encode(subs[i]).eot.
  Mat<T> encode_subcaptions(std::span<const std::vector<int>> subs) const {
    Mat<T> out(subs.size(), cfg.d_out);
    for (std::size_t i = 0; i < subs.size(); ++i) {
      const TextEmbedding<T> e = encode(subs[i]);
      std::copy(e.eot.data(), e.eot.data() + cfg.d_out, out.row(i).begin());
    }
    return out;
  }

  static TextEmbedding<T> split(const Mat<T>& out, std::size_t eot_pos) {
    TextEmbedding<T> e{slice_rows(out, eot_pos, eot_pos + 1),
                       Mat<T>(out.rows() - 1, out.cols())};
    std::size_t r = 0;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      if (i == eot_pos) continue;
      std::copy(out.row(i).begin(), out.row(i).end(), e.loc.row(r++).begin());
    }
    return e;
  }
};

}  // namespace mulalign
