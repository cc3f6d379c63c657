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
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mulalign/data.hpp"
#include "mulalign/model.hpp"

namespace mulalign {

/// Queries by gallery similarities with one ground-truth column per row.
struct SimMatrix {
  Mat<double> values;
  std::vector<std::size_t> truth;

  SimMatrix() = default;
  SimMatrix(Mat<double> v, std::vector<std::size_t> t) : values(std::move(v)), truth(std::move(t)) {
    if (truth.size() != values.rows()) throw Error("SimMatrix: one ground-truth index per row");
    for (auto g : truth)
      if (g >= values.cols()) throw Error("SimMatrix: ground-truth index out of range");
  }

  /// Diagonal ground truth.
  static SimMatrix diagonal(Mat<double> v) {
    std::vector<std::size_t> t(v.rows());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = i;
    return {std::move(v), std::move(t)};
  }
};

/// Rank of the true column: how many columns beat it, where a column beats
/// it with a strictly larger score or an equal score at a lower index.
inline std::size_t truth_rank(const SimMatrix& s, std::size_t row) {
  const auto r = s.values.row(row);
  const std::size_t g = s.truth[row];
  const double target = r[g];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < r.size(); ++j)
    if (r[j] > target || (r[j] == target && j < g)) ++rank;
  return rank;
}

inline double recall_at_k(const SimMatrix& s, std::size_t k) {
  if (s.values.rows() == 0 || s.values.cols() == 0) throw Error("recall_at_k: empty matrix");
  if (k == 0 || k > s.values.cols())
    throw Error("recall_at_k: k must lie in [1, " + std::to_string(s.values.cols()) + "]");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.values.rows(); ++i)
    if (truth_rank(s, i) < k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(s.values.rows());
}

struct RetrievalReport {
  std::size_t n = 0;
  double t2i_r1 = 0, t2i_r5 = 0, i2t_r1 = 0, i2t_r5 = 0;
};

template <class T>
struct CorpusEmbeddings {
  Mat<double> images;  // n x d, v_cls
  Mat<double> texts;   // n x d, long-caption t_eot
};

template <class T>
CorpusEmbeddings<T> embed_corpus(const Model<T>& model, std::span<const SyntheticSample> corpus,
                                 const Vocabulary& vocab) {
  const std::size_t n = corpus.size(), d = model.cfg.vision.d_out;
  CorpusEmbeddings<T> e{Mat<double>(n, d), Mat<double>(n, d)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto img = model.vision.encode(corpus[i].image).cls.template cast<double>();
    const auto txt =
        model.text.encode(tokenize(corpus[i].long_caption, vocab)).eot.template cast<double>();
    std::copy(img.data(), img.data() + d, e.images.row(i).begin());
    std::copy(txt.data(), txt.data() + d, e.texts.row(i).begin());
  }
  return e;
}

/// Cross-modal retrieval over a corpus with unique captions. k is clamped to
/// the gallery size.
template <class T>
RetrievalReport run_retrieval(const Model<T>& model, std::span<const SyntheticSample> corpus,
                              const Vocabulary& vocab = Vocabulary()) {
  if (corpus.empty()) throw Error("run_retrieval: empty corpus");
  std::set<std::string> seen;
  for (const auto& s : corpus)
    if (!seen.insert(s.long_caption).second)
      throw Error("run_retrieval: duplicate caption in corpus: " + s.long_caption);
  const auto e = embed_corpus(model, corpus, vocab);
  const Mat<double> i2t = matmul_nt(e.images, e.texts);
  const SimMatrix s_i2t = SimMatrix::diagonal(i2t);
  const SimMatrix s_t2i = SimMatrix::diagonal(transpose(i2t));
  RetrievalReport r;
  r.n = corpus.size();
  const std::size_t k5 = std::min<std::size_t>(5, r.n);
  r.t2i_r1 = recall_at_k(s_t2i, 1);
  r.t2i_r5 = recall_at_k(s_t2i, k5);
  r.i2t_r1 = recall_at_k(s_i2t, 1);
  r.i2t_r5 = recall_at_k(s_i2t, k5);
  return r;
}

// ---------------------------------------------------------------------------
// Fine-grained probes.

struct ProbeGroup {
  std::size_t sample = 0;  // index into the evaluated corpus
  Difficulty level = Difficulty::hard;
  std::string positive;
  std::vector<std::string> negatives;
};

struct ProbeSet {
  std::size_t k = 0;
  std::vector<ProbeGroup> groups;
};

/// Draws `groups_per_level` groups per difficulty, each pairing a random
/// object subcaption with k attribute-swap negatives. Draws whose negative
/// pool is too small are skipped and redrawn.
inline ProbeSet make_probe_set(std::span<const SyntheticSample> corpus, std::size_t groups_per_level,
                               std::size_t k, std::uint64_t seed) {
  if (corpus.empty()) throw Error("make_probe_set: empty corpus");
  ProbeSet ps;
  ps.k = k;
  std::mt19937_64 rng(seed);
  for (Difficulty level : kDifficulties) {
    std::size_t made = 0, attempts = 0;
    while (made < groups_per_level) {
      if (++attempts > 50 * groups_per_level + 100)
        throw Error(std::string("make_probe_set: cannot build ") + to_string(level) + " groups");
      const std::size_t s = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
      const auto& subs = corpus[s].subcaptions;
      if (subs.size() < 2) continue;
      const std::size_t i = std::uniform_int_distribution<std::size_t>(1, subs.size() - 1)(rng);
      const std::uint64_t neg_seed = rng();
      try {
        auto negs = make_hard_negatives(subs[i], corpus[s].scene, level, k, neg_seed);
        ps.groups.push_back({s, level, subs[i], std::move(negs)});
        ++made;
      } catch (const Error&) {
        continue;
      }
    }
  }
  return ps;
}

enum class ProbeScoring { sap, global };

struct ProbeOptions {
  ProbeScoring scoring = ProbeScoring::sap;
  bool calibrate = true;  // run patches through the image calibrator first
};

struct LevelAccuracy {
  std::size_t groups = 0;
  std::size_t correct = 0;
  double accuracy() const { return groups ? double(correct) / double(groups) : 0.0; }
};

struct ProbeReport {
  std::map<Difficulty, LevelAccuracy> levels;  // empty levels are absent
  double average() const {
    if (levels.empty()) return 0.0;
    double s = 0;
    for (const auto& [lvl, acc] : levels) s += acc.accuracy();
    return s / double(levels.size());
  }
};

/// Positive sits at index 0; it ranks first unless some negative scores
/// strictly higher.
inline bool positive_ranks_first(std::span<const double> scores) {
  for (std::size_t j = 1; j < scores.size(); ++j)
    if (scores[j] > scores[0]) return false;
  return true;
}

/// v̄ = normalize(softmax(q·Vᵀ/√d)·V) for a single query row.
template <class T>
Mat<T> aggregate_patches(const Mat<T>& query, const Mat<T>& patches, Mat<T>* alpha_out = nullptr) {
  const T scale = T(1) / std::sqrt(static_cast<T>(patches.cols()));
  Mat<T> alpha = softmax_rows(scaled(matmul_nt(query, patches), scale));
  Mat<T> bar = l2_normalize_rows(matmul(alpha, patches));
  if (alpha_out) *alpha_out = std::move(alpha);
  return bar;
}

template <class T>
ProbeReport run_fg_probe(const Model<T>& model, std::span<const SyntheticSample> corpus,
                         const ProbeSet& probes, const ProbeOptions& opt = {},
                         const Vocabulary& vocab = Vocabulary()) {
  ProbeReport rep;
  std::size_t cached_sample = static_cast<std::size_t>(-1);
  ImageEmbedding<T> img;
  Mat<T> patches;
  for (const auto& g : probes.groups) {
    if (g.sample >= corpus.size()) throw Error("run_fg_probe: probe sample out of range");
    if (g.sample != cached_sample) {
      img = model.vision.encode(corpus[g.sample].image);
      if (opt.calibrate) {
        typename Calibrator<T>::Cache c;
        patches = model.calib_v.forward(img.loc, c);
      } else {
        patches = img.loc;
      }
      cached_sample = g.sample;
    }
    std::vector<Mat<T>> cands;
    cands.push_back(model.text.encode(tokenize(g.positive, vocab)).eot);
    for (const auto& n : g.negatives) cands.push_back(model.text.encode(tokenize(n, vocab)).eot);
    const Mat<T> target =
        opt.scoring == ProbeScoring::sap ? aggregate_patches(cands[0], patches) : img.cls;
    std::vector<double> scores;
    for (const auto& c : cands) scores.push_back(static_cast<double>(dot_all(c, target)));
    auto& acc = rep.levels[g.level];
    ++acc.groups;
    if (positive_ranks_first(scores)) ++acc.correct;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Attention maps.

struct AttentionMap {
  std::size_t grid = 0;
  Mat<double> weights;     // grid x grid, sums to 1
  Mat<double> normalized;  // weights / max
};

/// SAP attention of `text`'s EOT embedding over calibrated patches, pushed
/// back to the patch grid through the calibrator's assignment rows.
template <class T>
AttentionMap attention_map(const Model<T>& model, const Image& image, const std::string& text,
                           const Vocabulary& vocab = Vocabulary()) {
  const auto img = model.vision.encode(image);
  typename Calibrator<T>::Cache c;
  const Mat<T> calibrated = model.calib_v.forward(img.loc, c);
  const Mat<T> q = model.text.encode(tokenize(text, vocab)).eot;
  Mat<T> alpha;
  aggregate_patches(q, calibrated, &alpha);
  const Mat<double> w = matmul(alpha, c.assign).template cast<double>();  // 1 x P
  AttentionMap m;
  m.grid = model.cfg.vision.grid;
  m.weights = Mat<double>(m.grid, m.grid, std::vector<double>(w.values().begin(), w.values().end()));
  const double mx = *std::max_element(w.values().begin(), w.values().end());
  m.normalized = scaled(m.weights, mx > 0 ? 1.0 / mx : 0.0);
  return m;
}

/// Binary graymap, each grid cell drawn as a `scale` x `scale` block.
inline void write_pgm(const std::string& path, const AttentionMap& m, std::size_t scale = 16) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_pgm: cannot open " + path);
  const std::size_t side = m.grid * scale;
  out << "P5\n" << side << ' ' << side << "\n255\n";
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double v = std::clamp(m.normalized(y / scale, x / scale), 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
  if (!out) throw Error("write_pgm: write failed for " + path);
}

inline nlohmann::json to_json(const AttentionMap& m, const std::string& text) {
  nlohmann::json w = nlohmann::json::array(), n = nlohmann::json::array();
  for (std::size_t r = 0; r < m.grid; ++r) {
    w.push_back(std::vector<double>(m.weights.row(r).begin(), m.weights.row(r).end()));
    n.push_back(std::vector<double>(m.normalized.row(r).begin(), m.normalized.row(r).end()));
  }
  return {{"kind", "attention"}, {"grid", m.grid}, {"text", text}, {"weights", w},
          {"normalized", n}};
}

/// Writes `<prefix>.pgm` and `<prefix>.jsonl`.
template <class T>
AttentionMap export_attention_map(const Model<T>& model, const SyntheticSample& sample,
                                  const std::string& text, const std::string& prefix,
                                  const Vocabulary& vocab = Vocabulary()) {
  const AttentionMap m = attention_map(model, sample.image, text, vocab);
  write_pgm(prefix + ".pgm", m);
  std::ofstream out(prefix + ".jsonl");
  if (!out) throw Error("export_attention_map: cannot open " + prefix + ".jsonl");
  auto j = to_json(m, text);
  j["sample"] = sample.id;
  out << j.dump() << '\n';
  if (!out) throw Error("export_attention_map: write failed for " + prefix + ".jsonl");
  return m;
}

}  // namespace mulalign
