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
#include <string>

#include "mulalign/numerics.hpp"
#include "mulalign/params.hpp"

namespace mulalign {

struct CalibratorConfig {
  std::size_t n_in = 16;
  double ratio = 0.5;
  std::size_t dim = 32;   // token dimension d
  std::size_t d_k = 0;    // 0 selects dim / 2
  double init_std = 0.02;

  std::size_t key_dim() const { return d_k == 0 ? dim / 2 : d_k; }
  std::size_t n_out() const {
    const auto n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n_in)));
    return n == 0 ? 1 : n;
  }
};

/// Local token calibration: N input tokens are pooled into N' learned
/// convex combinations,
///   X' = softmax(W_q * gelu(X * W_k)^T / tau) * X.
/// tau is stored as log tau. Inputs shorter than N are zero-padded and the
/// padded columns are excluded from the softmax.
template <class T>
struct Calibrator {
  using scalar_type = T;

  std::size_t n_in = 0;
  std::size_t n_out = 0;
  Mat<T> w_k;      // d x d_k
  Mat<T> w_q;      // N' x d_k
  Mat<T> log_tau;  // 1 x 1

  static Calibrator init(const CalibratorConfig& cfg, std::mt19937_64& rng) {
    const std::size_t dk = cfg.key_dim();
    if (cfg.n_in == 0) throw Error("Calibrator: n_in must be positive");
    if (dk == 0 || dk >= cfg.dim) throw Error("Calibrator: d_k must satisfy 0 < d_k < d");
    if (!(cfg.ratio > 0.0 && cfg.ratio <= 1.0))
      throw Error("Calibrator: ratio must lie in (0, 1]");
    Calibrator c;
    c.n_in = cfg.n_in;
    c.n_out = cfg.n_out();
    c.w_k = randn<T>(cfg.dim, dk, static_cast<T>(cfg.init_std), rng);
    c.w_q = randn<T>(c.n_out, dk, static_cast<T>(cfg.init_std), rng);
    c.log_tau = Mat<T>(1, 1, T(0));
    return c;
  }

  T tau() const { return std::exp(log_tau[0]); }

  template <class Self, class F>
  static void visit(Self& s, F&& f, const std::string& prefix = "calib.") {
    f(prefix + "w_k", s.w_k, ParamInfo{ParamGroup::refinement, true});
    f(prefix + "w_q", s.w_q, ParamInfo{ParamGroup::refinement, true});
    f(prefix + "log_tau", s.log_tau, ParamInfo{ParamGroup::refinement, false});
  }

  struct Cache {
    Mat<T> x;       // N x d, padded
    Mat<T> h;       // x * w_k
    Mat<T> g;       // gelu(h)
    Mat<T> logits;  // w_q * g^T / tau
    Mat<T> assign;  // softmax(logits), N' x N
    std::size_t valid = 0;
  };

  /// `x` must have exactly n_in rows; rows at or beyond `valid` are padding.
  Mat<T> forward(const Mat<T>& x, std::size_t valid, Cache& c) const {
    if (x.rows() != n_in)
      throw Error("calibrate: expected " + std::to_string(n_in) + " rows, got " +
                  std::to_string(x.rows()));
    if (x.cols() != w_k.rows())
      throw Error("calibrate: expected dim " + std::to_string(w_k.rows()) + ", got " +
                  std::to_string(x.cols()));
    if (valid == 0 || valid > n_in)
      throw Error("calibrate: valid row count must lie in [1, " + std::to_string(n_in) + "]");
    c.x = x;
    c.valid = valid;
    c.h = matmul(x, w_k);
    c.g = gelu(c.h);
    c.logits = scaled(matmul_nt(w_q, c.g), T(1) / tau());
    c.assign = softmax_rows(c.logits, valid);
    return matmul(c.assign, x);
  }

  Mat<T> forward(const Mat<T>& x, Cache& c) const { return forward(x, x.rows(), c); }

  /// Zero-pads `x` (K <= n_in rows) up to n_in before calibrating.
  Mat<T> forward_padded(const Mat<T>& x, Cache& c) const {
    if (x.rows() > n_in)
      throw Error("calibrate: " + std::to_string(x.rows()) + " tokens exceed capacity " +
                  std::to_string(n_in));
    Mat<T> padded(n_in, x.cols());
    std::copy(x.data(), x.data() + x.size(), padded.data());
    return forward(padded, x.rows(), c);
  }

  /// Accumulates into `gr`; returns dL/dx (n_in rows).
  Mat<T> backward(const Cache& c, const Mat<T>& dout, Calibrator& gr) const {
    if (dout.rows() != n_out || dout.cols() != c.x.cols())
      throw Error("calibrator backward: upstream shape mismatch");
    const T inv_tau = T(1) / tau();
    Mat<T> dx = matmul_tn(c.assign, dout);
    const Mat<T> dassign = matmul_nt(dout, c.x);
    const Mat<T> dlogits = softmax_rows_backward(c.assign, dassign);
    gr.log_tau[0] -= dot_all(dlogits, c.logits);
    const Mat<T> draw = scaled(dlogits, inv_tau);  // gradient of w_q * g^T
    axpy(gr.w_q, matmul(draw, c.g));
    const Mat<T> dh = gelu_backward(c.h, matmul_tn(draw, w_q));
    accumulate_matmul_tn(gr.w_k, c.x, dh);
    axpy(dx, matmul_nt(dh, w_k));
    return dx;
  }
};

template <class T>
struct CalibratorGrads {
  Mat<T> w_k, w_q;
  T tau{};      // d/d tau
  T log_tau{};  // d/d log tau (the stored parameter)
  Mat<T> x;
};

/// Gradients of sum(calibrate(c, x) * upstream).
template <class T>
CalibratorGrads<T> calibrator_grads(const Calibrator<T>& c, const Mat<T>& x,
                                    const Mat<T>& upstream) {
  typename Calibrator<T>::Cache cache;
  c.forward(x, cache);
  Calibrator<T> gr = zeros_like(c);
  Mat<T> dx = c.backward(cache, upstream, gr);
  return {gr.w_k, gr.w_q, gr.log_tau[0] / c.tau(), gr.log_tau[0], std::move(dx)};
}

}  // namespace mulalign
