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
#include <string>
#include <vector>

#include "mulalign/calibration.hpp"
#include "mulalign/numerics.hpp"

namespace mulalign {

namespace detail {

/// log(sigmoid(x)) without overflow.
template <class T>
T log_sigmoid(T x) {
  return x >= T(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pairwise sigmoid contrastive loss with learnable temperature and bias.

template <class T>
struct SigmoidResult {
  T loss{};
  Mat<T> du, dw;
  T dt_logit{};
  T dbias{};
};

/// L = -(1/B) sum_ij log sigmoid(z_ij (exp(t_logit) <u_i, w_j> + bias)),
/// z_ij = +1 on the diagonal and -1 elsewhere.
template <class T>
SigmoidResult<T> sigmoid_contrastive(const Mat<T>& u, const Mat<T>& w, T t_logit, T bias) {
  if (u.rows() == 0) throw Error("sigmoid_contrastive: empty batch");
  if (!u.same_shape(w))
    throw Error("sigmoid_contrastive: batches must be row-aligned with equal shapes");
  if (!all_finite(u) || !all_finite(w) || !std::isfinite(t_logit) || !std::isfinite(bias))
    throw NumericError("sigmoid_contrastive: non-finite input");
  const std::size_t B = u.rows();
  const T temp = std::exp(t_logit);
  const Mat<T> sims = matmul_nt(u, w);
  Mat<T> g(B, B);  // dL/dlogit
  SigmoidResult<T> r;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) {
      const T z = i == j ? T(1) : T(-1);
      const T logit = temp * sims(i, j) + bias;
      r.loss -= detail::log_sigmoid(z * logit);
      g(i, j) = -z * detail::sigmoid(-z * logit) / T(B);
    }
  r.loss /= T(B);
  r.du = scaled(matmul(g, w), temp);
  r.dw = scaled(matmul_tn(g, u), temp);
  r.dt_logit = temp * dot_all(g, sims);
  r.dbias = sum(g);
  return r;
}

template <class T>
struct GlobalResult {
  T loss{};
  T l_long{}, l_short{};
  Mat<T> dv, dlong, dshort;
  T dt_logit{}, dbias{};
};

/// sigmoid(v, t_long) + 0.5 * sigmoid(v, t_short)
template <class T>
GlobalResult<T> global_loss(const Mat<T>& v_cls, const Mat<T>& t_long, const Mat<T>& t_short,
                            T t_logit, T bias) {
  if (v_cls.rows() != t_long.rows() || v_cls.rows() != t_short.rows())
    throw Error("global_loss: batch-size mismatch");
  const auto a = sigmoid_contrastive(v_cls, t_long, t_logit, bias);
  const auto b = sigmoid_contrastive(v_cls, t_short, t_logit, bias);
  GlobalResult<T> r;
  r.l_long = a.loss;
  r.l_short = b.loss;
  r.loss = a.loss + T(0.5) * b.loss;
  r.dv = a.du;
  axpy(r.dv, b.du, T(0.5));
  r.dlong = a.dw;
  r.dshort = scaled(b.dw, T(0.5));
  r.dt_logit = a.dt_logit + T(0.5) * b.dt_logit;
  r.dbias = a.dbias + T(0.5) * b.dbias;
  return r;
}

// ---------------------------------------------------------------------------
// Word-patch reconstruction.

enum class WprMode { bidirectional, text_only, image_only, naive_batch };

/// Form of the within-sample token contrast.
enum class SampleContrast { info_nce, sigmoid };

inline const char* to_string(WprMode m) {
  switch (m) {
    case WprMode::bidirectional: return "bidirectional";
    case WprMode::text_only: return "text_only";
    case WprMode::image_only: return "image_only";
    default: return "naive_batch";
  }
}

template <class T>
struct ReconTerm {
  T loss{};
  Mat<T> dx, dother;
  Mat<T> attn;  // softmax(x other^T / sqrt(d))
};

/// One reconstruction direction: every row of x is rebuilt from `other`
/// through dot-product attention, then contrasted against the rebuilt rows
/// of the same sample.
template <class T>
ReconTerm<T> reconstruction_term(const Mat<T>& x, const Mat<T>& other, T tau_tok,
                                 SampleContrast form) {
  const std::size_t n = x.rows();
  const T inv_sqrt_d = T(1) / std::sqrt(T(x.cols()));
  ReconTerm<T> r;
  r.attn = softmax_rows(scaled(matmul_nt(x, other), inv_sqrt_d));
  const Mat<T> recon = matmul(r.attn, other);
  const Mat<T> z = scaled(matmul_nt(x, recon), T(1) / tau_tok);
  Mat<T> dz(n, n);
  if (form == SampleContrast::info_nce) {
    // Symmetric cross-entropy with the matching index as the positive.
    const Mat<T> p_row = softmax_rows(z);
    const Mat<T> p_col = softmax_rows(transpose(z));
    const T half_over_n = T(0.5) / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      r.loss -= std::log(p_row(i, i)) + std::log(p_col(i, i));
      for (std::size_t j = 0; j < n; ++j) {
        const T eye = i == j ? T(1) : T(0);
        dz(i, j) += half_over_n * (p_row(i, j) - eye);
        dz(j, i) += half_over_n * (p_col(i, j) - eye);
      }
    }
    r.loss *= half_over_n;
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T s = i == j ? T(1) : T(-1);
        r.loss -= detail::log_sigmoid(s * z(i, j));
        dz(i, j) = -s * detail::sigmoid(-s * z(i, j)) / T(n);
      }
    r.loss /= T(n);
  }
  const Mat<T> dz_t = scaled(dz, T(1) / tau_tok);
  r.dx = matmul(dz_t, recon);
  const Mat<T> drecon = matmul_tn(dz_t, x);
  r.dother = matmul_tn(r.attn, drecon);
  const Mat<T> dlogits =
      scaled(softmax_rows_backward(r.attn, matmul_nt(drecon, other)), inv_sqrt_d);
  axpy(r.dx, matmul(dlogits, other));
  axpy(r.dother, matmul_tn(dlogits, x));
  return r;
}

template <class T>
struct WprResult {
  T loss{};     // value selected by the mode
  T l_image{};  // image-side reconstruction term
  T l_text{};   // text-side reconstruction term
  Mat<T> dv, dt;
  Mat<T> attn_v2t, attn_t2v;
};

/// Within-sample reconstruction loss for one sample's refined patches `v`
/// (rP x d) and words `t` (rK x d). Both terms are always reported; the
/// gradient covers only the terms selected by `mode`.
template <class T>
WprResult<T> wpr_loss(const Mat<T>& v, const Mat<T>& t, WprMode mode, T tau_tok,
                      SampleContrast form = SampleContrast::info_nce) {
  if (v.rows() == 0 || t.rows() == 0) throw Error("wpr_loss: empty token sequence");
  if (v.cols() != t.cols()) throw Error("wpr_loss: dimension mismatch");
  if (mode == WprMode::naive_batch)
    throw Error("wpr_loss: naive_batch is batch-level; use naive_word_loss");
  if (!(tau_tok > T(0))) throw Error("wpr_loss: tau_tok must be positive");
  const auto img = reconstruction_term(v, t, tau_tok, form);
  const auto txt = reconstruction_term(t, v, tau_tok, form);
  WprResult<T> r;
  r.l_image = img.loss;
  r.l_text = txt.loss;
  r.attn_v2t = img.attn;
  r.attn_t2v = txt.attn;
  r.dv = Mat<T>(v.rows(), v.cols());
  r.dt = Mat<T>(t.rows(), t.cols());
  if (mode != WprMode::text_only) {
    r.loss += img.loss;
    axpy(r.dv, img.dx);
    axpy(r.dt, img.dother);
  }
  if (mode != WprMode::image_only) {
    r.loss += txt.loss;
    axpy(r.dt, txt.dx);
    axpy(r.dv, txt.dother);
  }
  return r;
}

template <class T>
struct NaiveWordResult {
  T loss{};
  std::vector<Mat<T>> dv, dt;
  T dt_logit{}, dbias{};
};

/// Batch-level alternative to reconstruction: sigmoid contrast between the
/// normalized mean-pooled refined patches and words of each sample.
template <class T>
NaiveWordResult<T> naive_word_loss(const std::vector<Mat<T>>& vs, const std::vector<Mat<T>>& ts,
                                   T t_logit, T bias) {
  if (vs.empty() || vs.size() != ts.size()) throw Error("naive_word_loss: batch mismatch");
  const std::size_t B = vs.size(), d = vs.front().cols();
  Mat<T> pv(B, d), pt(B, d);
  auto pool = [d](const Mat<T>& m, std::span<T> dst) {
    if (m.rows() == 0) throw Error("naive_word_loss: empty token sequence");
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) dst[c] += m(r, c) / T(m.rows());
  };
  for (std::size_t b = 0; b < B; ++b) {
    pool(vs[b], pv.row(b));
    pool(ts[b], pt.row(b));
  }
  const auto nv = l2_normalize_rows_with_norms(pv);
  const auto nt = l2_normalize_rows_with_norms(pt);
  const auto s = sigmoid_contrastive(nv.out, nt.out, t_logit, bias);
  const Mat<T> dpv = l2_normalize_rows_backward(nv.out, std::span<const T>(nv.norms), s.du);
  const Mat<T> dpt = l2_normalize_rows_backward(nt.out, std::span<const T>(nt.norms), s.dw);
  NaiveWordResult<T> r{s.loss, {}, {}, s.dt_logit, s.dbias};
  auto unpool = [d](const Mat<T>& like, std::span<const T> g) {
    Mat<T> out(like.rows(), d);
    for (std::size_t i = 0; i < like.rows(); ++i)
      for (std::size_t c = 0; c < d; ++c) out(i, c) = g[c] / T(like.rows());
    return out;
  };
  for (std::size_t b = 0; b < B; ++b) {
    r.dv.push_back(unpool(vs[b], dpv.row(b)));
    r.dt.push_back(unpool(ts[b], dpt.row(b)));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Subcaption-aggregated patches.

template <class T>
struct SapResult {
  T loss{};
  std::vector<Mat<T>> dv;     // per sample, rP x d
  std::vector<Mat<T>> dsub;   // per sample, m_max x d (zero rows where masked)
  std::vector<Mat<T>> alpha;  // per sample, m_max x rP (zero rows where masked)
  T dt_logit{}, dbias{};
  std::size_t indices_used = 0;
};

/// For each valid subcaption i of sample b: alpha = softmax(s_i v^T / sqrt d),
/// vbar = normalize(alpha v). Index i then contributes a batch-level sigmoid
/// contrast over the samples where it is valid; the loss averages over the
/// indices that appear at least once.
template <class T>
SapResult<T> sap_loss(const std::vector<Mat<T>>& v, const std::vector<Mat<T>>& subs,
                      const std::vector<std::vector<std::uint8_t>>& mask, T t_logit, T bias) {
  const std::size_t B = v.size();
  if (B == 0 || subs.size() != B || mask.size() != B) throw Error("sap_loss: batch mismatch");
  const std::size_t m_max = subs.front().rows(), d = v.front().cols();
  const T inv_sqrt_d = T(1) / std::sqrt(T(d));
  SapResult<T> r;
  std::vector<Mat<T>> vbar(B), vbar_raw(B);
  std::vector<std::vector<T>> norms(B, std::vector<T>(m_max, T(1)));
  for (std::size_t b = 0; b < B; ++b) {
    if (subs[b].rows() != m_max || mask[b].size() != m_max || subs[b].cols() != d ||
        v[b].cols() != d || v[b].rows() == 0)
      throw Error("sap_loss: inconsistent shapes for sample " + std::to_string(b));
    r.alpha.emplace_back(m_max, v[b].rows());
    vbar[b] = Mat<T>(m_max, d);
    vbar_raw[b] = Mat<T>(m_max, d);
    r.dv.emplace_back(v[b].rows(), d);
    r.dsub.emplace_back(m_max, d);
    for (std::size_t i = 0; i < m_max; ++i) {
      if (!mask[b][i]) continue;
      const Mat<T> s = slice_rows(subs[b], i, i + 1);
      const Mat<T> a = softmax_rows(scaled(matmul_nt(s, v[b]), inv_sqrt_d));
      std::copy(a.data(), a.data() + a.size(), r.alpha[b].row(i).begin());
      const Mat<T> raw = matmul(a, v[b]);
      const auto nrm = l2_normalize_rows_with_norms(raw);
      norms[b][i] = nrm.norms[0];
      std::copy(raw.data(), raw.data() + d, vbar_raw[b].row(i).begin());
      std::copy(nrm.out.data(), nrm.out.data() + d, vbar[b].row(i).begin());
    }
  }
  std::vector<Mat<T>> dvbar(B);
  for (std::size_t b = 0; b < B; ++b) dvbar[b] = Mat<T>(m_max, d);
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < m_max; ++i) {
    members.clear();
    for (std::size_t b = 0; b < B; ++b)
      if (mask[b][i]) members.push_back(b);
    if (members.empty()) continue;
    ++r.indices_used;
    Mat<T> u(members.size(), d), w(members.size(), d);
    for (std::size_t k = 0; k < members.size(); ++k) {
      std::copy(vbar[members[k]].row(i).begin(), vbar[members[k]].row(i).end(), u.row(k).begin());
      std::copy(subs[members[k]].row(i).begin(), subs[members[k]].row(i).end(), w.row(k).begin());
    }
    const auto s = sigmoid_contrastive(u, w, t_logit, bias);
    r.loss += s.loss;
    r.dt_logit += s.dt_logit;
    r.dbias += s.dbias;
    for (std::size_t k = 0; k < members.size(); ++k) {
      std::copy(s.du.row(k).begin(), s.du.row(k).end(), dvbar[members[k]].row(i).begin());
      std::copy(s.dw.row(k).begin(), s.dw.row(k).end(), r.dsub[members[k]].row(i).begin());
    }
  }
  if (r.indices_used == 0) throw Error("sap_loss: every subcaption is masked");
  const T inv_m = T(1) / T(r.indices_used);
  r.loss *= inv_m;
  r.dt_logit *= inv_m;
  r.dbias *= inv_m;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < m_max; ++i) {
      if (!mask[b][i]) continue;
      auto dsub_row = r.dsub[b].row(i);
      for (auto& x : dsub_row) x *= inv_m;
      const Mat<T> yb = slice_rows(vbar[b], i, i + 1);
      const Mat<T> dy = scaled(slice_rows(dvbar[b], i, i + 1), inv_m);
      const std::vector<T> nb{norms[b][i]};
      const Mat<T> draw = l2_normalize_rows_backward(yb, std::span<const T>(nb), dy);
      const Mat<T> a = slice_rows(r.alpha[b], i, i + 1);
      axpy(r.dv[b], matmul_tn(a, draw));
      const Mat<T> dlogit =
          scaled(softmax_rows_backward(a, matmul_nt(draw, v[b])), inv_sqrt_d);
      const Mat<T> ds = matmul(dlogit, v[b]);
      for (std::size_t c = 0; c < d; ++c) dsub_row[c] += ds[c];
      axpy(r.dv[b], matmul_tn(dlogit, slice_rows(subs[b], i, i + 1)));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Objective variants.

struct VariantSpec {
  bool use_global = true;
  bool use_lc = true;
  bool use_wpr = true;
  bool use_sap = true;
  WprMode wpr_mode = WprMode::bidirectional;

  friend bool operator==(const VariantSpec&, const VariantSpec&) = default;
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {
      "global_only", "no_lc_no_sap", "no_sap",     "no_wpr",     "full",
      "no_global",   "text_recon",   "image_recon", "naive_recon"};
  return names;
}

inline VariantSpec variant_from_name(const std::string& name) {
  if (name == "global_only") return {true, false, false, false, WprMode::bidirectional};
  if (name == "no_lc_no_sap") return {true, false, true, false, WprMode::bidirectional};
  if (name == "no_sap") return {true, true, true, false, WprMode::bidirectional};
  if (name == "no_wpr") return {true, true, false, true, WprMode::bidirectional};
  if (name == "full") return {true, true, true, true, WprMode::bidirectional};
  if (name == "no_global") return {false, true, true, true, WprMode::bidirectional};
  if (name == "text_recon") return {true, true, true, true, WprMode::text_only};
  if (name == "image_recon") return {true, true, true, true, WprMode::image_only};
  if (name == "naive_recon") return {true, true, true, true, WprMode::naive_batch};
  throw Error("unknown variant '" + name + "'");
}

/// Rejects combinations that no ablation row expresses.
inline void validate_variant(const VariantSpec& v) {
  if (v.use_sap && !v.use_lc) throw Error("variant: SAP requires local calibration");
  if (v.use_lc && !v.use_wpr && !v.use_sap)
    throw Error("variant: local calibration without WPR or SAP has no consumer");
  if (!v.use_global && !v.use_wpr && !v.use_sap) throw Error("variant: no loss terms selected");
  if (v.use_wpr && !v.use_lc && v.wpr_mode != WprMode::bidirectional)
    throw Error("variant: one-sided or naive WPR requires local calibration");
}

struct LossOptions {
  VariantSpec variant;
  double lambda_w = 1.0;
  double lambda_s = 1.0;
  double tau_tok = 0.07;
  SampleContrast sample_contrast = SampleContrast::info_nce;
};

/// Encoder outputs for one sample.
template <class T>
struct DualOutputs {
  Mat<T> v_cls;        // 1 x d
  Mat<T> v_loc;        // P x d
  Mat<T> t_long_eot;   // 1 x d
  Mat<T> t_long_loc;   // K x d
  Mat<T> t_short_eot;  // 1 x d
  Mat<T> sub;          // m_max x d, zero rows where masked
  std::vector<std::uint8_t> sub_mask;
};

template <class T>
DualOutputs<T> zeros_like(const DualOutputs<T>& o) {
  return {Mat<T>(o.v_cls.rows(), o.v_cls.cols()),
          Mat<T>(o.v_loc.rows(), o.v_loc.cols()),
          Mat<T>(o.t_long_eot.rows(), o.t_long_eot.cols()),
          Mat<T>(o.t_long_loc.rows(), o.t_long_loc.cols()),
          Mat<T>(o.t_short_eot.rows(), o.t_short_eot.cols()),
          Mat<T>(o.sub.rows(), o.sub.cols()),
          o.sub_mask};
}

template <class T>
struct ObjectiveGrads {
  std::vector<DualOutputs<T>> outputs;
  Calibrator<T> calib_v, calib_t;
  T dt_logit{}, dbias{};
};

template <class T>
struct ObjectiveResult {
  T l_global{}, l_word{}, l_sub{}, l_total{};
  T l_recon_image{}, l_recon_text{};  // batch means of the two WPR directions
  std::vector<Mat<T>> attn_v2t, attn_t2v, sap_alphas;
  ObjectiveGrads<T> grads;
};

/// Assembles the loss terms selected by the variant from encoder outputs:
///   l_total = [global] l_global + lambda_w [wpr] l_word + lambda_s [sap] l_sub
/// Calibrators refine v_loc and t_long_loc (text padded to calib_t.n_in).
template <class T>
ObjectiveResult<T> objective_from_outputs(const std::vector<DualOutputs<T>>& outs,
                                          const Calibrator<T>& calib_v,
                                          const Calibrator<T>& calib_t, T t_logit, T bias,
                                          const LossOptions& opt) {
  validate_variant(opt.variant);
  const VariantSpec& var = opt.variant;
  const std::size_t B = outs.size();
  if (B == 0) throw Error("objective: empty batch");
  const std::size_t d = outs.front().v_cls.cols();
  ObjectiveResult<T> res;
  res.grads.calib_v = zeros_like(calib_v);
  res.grads.calib_t = zeros_like(calib_t);
  for (const auto& o : outs) res.grads.outputs.push_back(zeros_like(o));

  // Local token refinement.
  std::vector<Mat<T>> vloc(B), tloc(B);
  std::vector<typename Calibrator<T>::Cache> cv(B), ct(B);
  const bool need_local = var.use_wpr || var.use_sap;
  if (need_local) {
    for (std::size_t b = 0; b < B; ++b) {
      if (var.use_lc) {
        vloc[b] = calib_v.forward(outs[b].v_loc, cv[b]);
        tloc[b] = calib_t.forward_padded(outs[b].t_long_loc, ct[b]);
      } else {
        vloc[b] = outs[b].v_loc;
        tloc[b] = outs[b].t_long_loc;
      }
    }
  }
  std::vector<Mat<T>> dvloc(B), dtloc(B);
  for (std::size_t b = 0; b < B && need_local; ++b) {
    dvloc[b] = Mat<T>(vloc[b].rows(), d);
    dtloc[b] = Mat<T>(tloc[b].rows(), d);
  }

  if (var.use_global) {
    Mat<T> v(B, d), tl(B, d), ts(B, d);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy(outs[b].v_cls.data(), outs[b].v_cls.data() + d, v.row(b).begin());
      std::copy(outs[b].t_long_eot.data(), outs[b].t_long_eot.data() + d, tl.row(b).begin());
      std::copy(outs[b].t_short_eot.data(), outs[b].t_short_eot.data() + d, ts.row(b).begin());
    }
    const auto g = global_loss(v, tl, ts, t_logit, bias);
    res.l_global = g.loss;
    res.l_total += g.loss;
    res.grads.dt_logit += g.dt_logit;
    res.grads.dbias += g.dbias;
    for (std::size_t b = 0; b < B; ++b) {
      auto& go = res.grads.outputs[b];
      std::copy(g.dv.row(b).begin(), g.dv.row(b).end(), go.v_cls.data());
      std::copy(g.dlong.row(b).begin(), g.dlong.row(b).end(), go.t_long_eot.data());
      std::copy(g.dshort.row(b).begin(), g.dshort.row(b).end(), go.t_short_eot.data());
    }
  }

  if (var.use_wpr) {
    const T lw = static_cast<T>(opt.lambda_w);
    if (var.wpr_mode == WprMode::naive_batch) {
      const auto nw = naive_word_loss(vloc, tloc, t_logit, bias);
      res.l_word = nw.loss;
      res.grads.dt_logit += lw * nw.dt_logit;
      res.grads.dbias += lw * nw.dbias;
      for (std::size_t b = 0; b < B; ++b) {
        axpy(dvloc[b], nw.dv[b], lw);
        axpy(dtloc[b], nw.dt[b], lw);
      }
    } else {
      const T inv_b = T(1) / T(B);
      for (std::size_t b = 0; b < B; ++b) {
        const auto w = wpr_loss(vloc[b], tloc[b], var.wpr_mode, static_cast<T>(opt.tau_tok),
                                opt.sample_contrast);
        res.l_word += w.loss * inv_b;
        res.l_recon_image += w.l_image * inv_b;
        res.l_recon_text += w.l_text * inv_b;
        res.attn_v2t.push_back(w.attn_v2t);
        res.attn_t2v.push_back(w.attn_t2v);
        axpy(dvloc[b], w.dv, lw * inv_b);
        axpy(dtloc[b], w.dt, lw * inv_b);
      }
    }
    res.l_total += lw * res.l_word;
  }

  if (var.use_sap) {
    const T ls = static_cast<T>(opt.lambda_s);
    std::vector<Mat<T>> subs(B);
    std::vector<std::vector<std::uint8_t>> mask(B);
    for (std::size_t b = 0; b < B; ++b) {
      subs[b] = outs[b].sub;
      mask[b] = outs[b].sub_mask;
    }
    const auto s = sap_loss(vloc, subs, mask, t_logit, bias);
    res.l_sub = s.loss;
    res.l_total += ls * s.loss;
    res.sap_alphas = s.alpha;
    res.grads.dt_logit += ls * s.dt_logit;
    res.grads.dbias += ls * s.dbias;
    for (std::size_t b = 0; b < B; ++b) {
      axpy(dvloc[b], s.dv[b], ls);
      axpy(res.grads.outputs[b].sub, s.dsub[b], ls);
    }
  }

  for (std::size_t b = 0; b < B && need_local; ++b) {
    auto& go = res.grads.outputs[b];
    if (var.use_lc) {
      axpy(go.v_loc, calib_v.backward(cv[b], dvloc[b], res.grads.calib_v));
      const Mat<T> dt_pad = calib_t.backward(ct[b], dtloc[b], res.grads.calib_t);
      axpy(go.t_long_loc, slice_rows(dt_pad, 0, go.t_long_loc.rows()));
    } else {
      axpy(go.v_loc, dvloc[b]);
      axpy(go.t_long_loc, dtloc[b]);
    }
  }
  return res;
}

}  // namespace mulalign
