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
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mulalign/encoders.hpp"
#include "mulalign/numerics.hpp"

namespace mulalign {

inline constexpr std::array<std::string_view, 3> kShapes = {"square", "circle", "triangle"};
inline constexpr std::array<std::string_view, 6> kColors = {"red",     "green", "blue",
                                                            "yellow",  "magenta", "cyan"};
inline constexpr std::array<std::string_view, 2> kSizes = {"small", "big"};
inline constexpr std::array<std::array<float, 3>, 6> kColorRgb = {{{1.f, 0.f, 0.f},
                                                                   {0.f, 1.f, 0.f},
                                                                   {0.f, 0.f, 1.f},
                                                                   {1.f, 1.f, 0.f},
                                                                   {1.f, 0.f, 1.f},
                                                                   {0.f, 1.f, 1.f}}};
inline constexpr int kMaxNumberWord = 31;

// ---------------------------------------------------------------------------
// Closed-vocabulary word tokenizer.

class Vocabulary {
 public:
  static constexpr int kEot = 0;

  Vocabulary() {
    add("<eot>");
    for (auto p : {".", "!", "?", ","}) add(p);
    for (auto w : {"An", "A", "image", "with", "objects", "at", "row", "column"}) add(w);
    for (auto w : kShapes) add(std::string(w));
    for (auto w : kColors) add(std::string(w));
    for (auto w : kSizes) add(std::string(w));
    for (int i = 0; i <= kMaxNumberWord; ++i) add(std::to_string(i));
  }

  std::size_t size() const { return words_.size(); }
  int eot_id() const { return kEot; }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw Error("tokenize: out-of-vocabulary word '" + word + "'");
    return it->second;
  }
  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
      throw Error("detokenize: id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }

  static bool is_punct(std::string_view w) {
    return w == "." || w == "!" || w == "?" || w == ",";
  }

 private:
  void add(const std::string& w) {
    ids_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

/// Word ids followed by EOT. Trailing punctuation becomes its own token.
inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string piece;
  while (in >> piece) {
    std::vector<std::string> trailing;
    while (piece.size() > 1 && Vocabulary::is_punct(std::string_view(&piece.back(), 1))) {
      trailing.insert(trailing.begin(), std::string(1, piece.back()));
      piece.pop_back();
    }
    out.push_back(vocab.id(piece));
    for (const auto& p : trailing) out.push_back(vocab.id(p));
  }
  out.push_back(vocab.eot_id());
  return out;
}

inline std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == vocab.eot_id()) continue;
    const std::string& w = vocab.word(id);
    if (!out.empty() && !Vocabulary::is_punct(w)) out += ' ';
    out += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sentence splitting.

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

/// Splits on '.', '!' or '?' followed by whitespace or end of text; pieces
/// are trimmed, empty pieces dropped, and the result capped at max_sentences.
inline std::vector<std::string> split_sentences(const std::string& text,
                                                std::size_t max_sentences = 15) {
  if (trim(text).empty()) throw Error("split_sentences: empty text");
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch != '.' && ch != '!' && ch != '?') continue;
    if (i + 1 < text.size() && !std::isspace(static_cast<unsigned char>(text[i + 1]))) continue;
    std::string piece = trim(std::string_view(text).substr(start, i + 1 - start));
    if (!piece.empty()) out.push_back(std::move(piece));
    start = i + 1;
  }
  std::string rest = trim(std::string_view(text).substr(start));
  if (!rest.empty()) out.push_back(std::move(rest));
  if (out.size() > max_sentences) out.resize(max_sentences);
  return out;
}

// ---------------------------------------------------------------------------
// Scenes.

struct SceneObject {
  int shape = 0;
  int color = 0;
  int size = 0;
  int row = 0;
  int col = 0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneGraph {
  std::size_t grid = 4;
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;  // sorted by cell, row-major

  bool contains(const SceneObject& o) const {
    return std::find(objects.begin(), objects.end(), o) != objects.end();
  }
  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;
};

inline std::string object_sentence(const SceneObject& o) {
  return "A " + std::string(kSizes.at(o.size)) + " " + std::string(kColors.at(o.color)) +
         " " + std::string(kShapes.at(o.shape)) + " at row " + std::to_string(o.row) +
         " column " + std::to_string(o.col) + ".";
}

inline std::string summary_sentence(std::size_t n_objects) {
  return "An image with " + std::to_string(n_objects) + " objects.";
}

inline std::string long_caption(const SceneGraph& s) {
  std::string out = summary_sentence(s.objects.size());
  for (const auto& o : s.objects) out += " " + object_sentence(o);
  return out;
}

/// Inverse of object_sentence; nullopt when the sentence is not an object
/// description.
inline std::optional<SceneObject> parse_object_sentence(const std::string& sentence) {
  std::istringstream in(sentence);
  std::string a, size, color, shape, at, row_w, row, col_w, col;
  if (!(in >> a >> size >> color >> shape >> at >> row_w >> row >> col_w >> col)) return {};
  std::string extra;
  if (in >> extra) return {};
  if (a != "A" || at != "at" || row_w != "row" || col_w != "column") return {};
  if (col.empty() || col.back() != '.') return {};
  col.pop_back();
  auto index_of = [](auto& table, const std::string& w) -> int {
    for (std::size_t i = 0; i < table.size(); ++i)
      if (table[i] == w) return static_cast<int>(i);
    return -1;
  };
  SceneObject o;
  o.size = index_of(kSizes, size);
  o.color = index_of(kColors, color);
  o.shape = index_of(kShapes, shape);
  if (o.size < 0 || o.color < 0 || o.shape < 0) return {};
  try {
    std::size_t used = 0;
    o.row = std::stoi(row, &used);
    if (used != row.size()) return {};
    o.col = std::stoi(col, &used);
    if (used != col.size()) return {};
  } catch (const std::exception&) {
    return {};
  }
  return o;
}

/// Whether pixel (y, x) of a glyph box of side `side` is filled.
inline bool glyph_pixel(int shape, std::size_t side, std::size_t y, std::size_t x) {
  switch (shape) {
    case 0:
      return true;
    case 1: {
      const double c = static_cast<double>(side) / 2.0;
      const double dy = static_cast<double>(y) + 0.5 - c, dx = static_cast<double>(x) + 0.5 - c;
      return dy * dy + dx * dx <= 0.2 * static_cast<double>(side * side);
    }
    default:
      return y >= x;
  }
}

/// Each object fills its grid cell with a colored glyph; small glyphs occupy
/// a 3/4-side box in the cell's top-left corner.
inline Image render_scene(const SceneGraph& s, std::size_t patch_size) {
  Image img{3, s.grid * patch_size, s.grid * patch_size, {}};
  img.pixels.assign(img.channels * img.height * img.width, 0.f);
  for (const auto& o : s.objects) {
    const std::size_t side =
        o.size == 1 ? patch_size : std::max<std::size_t>(1, (patch_size * 3 + 3) / 4);
    const auto& rgb = kColorRgb.at(o.color);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        if (!glyph_pixel(o.shape, side, y, x)) continue;
        for (std::size_t c = 0; c < 3; ++c)
          img.at(c, o.row * patch_size + y, o.col * patch_size + x) = rgb[c];
      }
  }
  return img;
}

struct SyntheticSample {
  std::size_t id = 0;
  SceneGraph scene;
  Image image;
  std::string long_caption;
  std::string short_caption;
  std::vector<std::string> subcaptions;
};

struct CorpusConfig {
  std::size_t n = 512;
  std::size_t grid = 4;
  std::size_t patch_size = 4;
  std::size_t max_objects = 3;
  std::size_t max_sentences = 15;
  std::uint64_t seed = 7;
};

inline SyntheticSample make_sample(std::size_t id, const SceneGraph& scene,
                                   std::size_t patch_size, std::size_t max_sentences) {
  SyntheticSample s;
  s.id = id;
  s.scene = scene;
  s.image = render_scene(scene, patch_size);
  s.long_caption = long_caption(scene);
  s.subcaptions = split_sentences(s.long_caption, max_sentences);
  s.short_caption = s.subcaptions.front();
  return s;
}

/// Number of distinct scenes with 1..max_objects objects, saturating.
inline double scene_capacity(std::size_t grid, std::size_t max_objects) {
  const double cells = static_cast<double>(grid * grid);
  const double attrs = static_cast<double>(kShapes.size() * kColors.size() * kSizes.size());
  double total = 0.0, choose = 1.0;
  for (std::size_t k = 1; k <= max_objects && static_cast<double>(k) <= cells; ++k) {
    choose = choose * (cells - static_cast<double>(k) + 1.0) / static_cast<double>(k);
    total += choose * std::pow(attrs, static_cast<double>(k));
  }
  return total;
}

/// Token budget of a long caption: summary (6 tokens) + 10 per object.
inline std::size_t caption_token_capacity(std::size_t max_objects) {
  return 6 + 10 * max_objects;
}

inline std::vector<SyntheticSample> generate_corpus(const CorpusConfig& cfg) {
  if (cfg.n == 0) throw Error("generate_corpus: n must be at least 1");
  if (cfg.grid == 0 || cfg.grid > static_cast<std::size_t>(kMaxNumberWord) + 1)
    throw Error("generate_corpus: grid must lie in [1, 32]");
  if (cfg.max_objects == 0 || cfg.max_objects > cfg.grid * cfg.grid)
    throw Error("generate_corpus: max_objects must lie in [1, grid^2]");
  if (cfg.max_objects > static_cast<std::size_t>(kMaxNumberWord))
    throw Error("generate_corpus: max_objects exceeds the number vocabulary");
  const double capacity = scene_capacity(cfg.grid, cfg.max_objects);
  if (static_cast<double>(cfg.n) > capacity)
    throw Error("generate_corpus: n=" + std::to_string(cfg.n) +
                " exceeds distinct-scene capacity " + std::to_string(capacity));

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> cells(cfg.grid * cfg.grid);
  std::unordered_set<std::string> seen;
  std::vector<SyntheticSample> out;
  out.reserve(cfg.n);
  const std::size_t max_attempts = 1000 * cfg.n + 100000;
  for (std::size_t attempt = 0; out.size() < cfg.n; ++attempt) {
    if (attempt >= max_attempts)
      throw Error("generate_corpus: could not draw enough distinct scenes");
    SceneGraph scene;
    scene.grid = cfg.grid;
    scene.seed = rng();
    std::mt19937_64 local(scene.seed);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, cfg.max_objects)(local);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, cells.size() - 1)(local);
      std::swap(cells[i], cells[j]);
    }
    std::vector<std::size_t> chosen(cells.begin(), cells.begin() + static_cast<long>(k));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t cell : chosen) {
      SceneObject o;
      o.shape = std::uniform_int_distribution<int>(0, kShapes.size() - 1)(local);
      o.color = std::uniform_int_distribution<int>(0, kColors.size() - 1)(local);
      o.size = std::uniform_int_distribution<int>(0, kSizes.size() - 1)(local);
      o.row = static_cast<int>(cell / cfg.grid);
      o.col = static_cast<int>(cell % cfg.grid);
      scene.objects.push_back(o);
    }
    const std::string caption = long_caption(scene);
    if (!seen.insert(caption).second) continue;
    out.push_back(make_sample(out.size(), scene, cfg.patch_size, cfg.max_sentences));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus files: a header line, then one JSON record per sample.

inline void save_corpus(const std::string& path, std::span<const SyntheticSample> corpus,
                        const CorpusConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_corpus: cannot open " + path);
  nlohmann::json header = {{"format", "mulalign-corpus"},
                           {"version", 1},
                           {"grid", cfg.grid},
                           {"patch_size", cfg.patch_size},
                           {"max_objects", cfg.max_objects},
                           {"max_sentences", cfg.max_sentences},
                           {"seed", cfg.seed},
                           {"count", corpus.size()}};
  out << header.dump() << '\n';
  for (const auto& s : corpus) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.scene.objects)
      objs.push_back({{"shape", kShapes.at(o.shape)},
                      {"color", kColors.at(o.color)},
                      {"size", kSizes.at(o.size)},
                      {"row", o.row},
                      {"col", o.col}});
    nlohmann::json rec = {{"id", s.id},
                          {"seed", s.scene.seed},
                          {"objects", objs},
                          {"long_caption", s.long_caption},
                          {"short_caption", s.short_caption},
                          {"subcaptions", s.subcaptions}};
    out << rec.dump() << '\n';
  }
  if (!out) throw Error("save_corpus: write failed for " + path);
}

struct LoadedCorpus {
  CorpusConfig config;
  std::vector<SyntheticSample> samples;
};

/// Reloads a corpus file, regenerating images from the scene graphs and
/// verifying the stored captions against the regenerated ones.
inline LoadedCorpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_corpus: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("load_corpus: empty file " + path);
  LoadedCorpus res;
  auto lookup = [](auto& table, const std::string& w, const char* what) {
    for (std::size_t i = 0; i < table.size(); ++i)
      if (table[i] == w) return static_cast<int>(i);
    throw Error(std::string("load_corpus: unknown ") + what + " '" + w + "'");
  };
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != "mulalign-corpus")
      throw Error("load_corpus: not a corpus file: " + path);
    res.config.grid = header.at("grid");
    res.config.patch_size = header.at("patch_size");
    res.config.max_objects = header.at("max_objects");
    res.config.max_sentences = header.at("max_sentences");
    res.config.seed = header.at("seed");
    res.config.n = header.at("count");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      SceneGraph scene;
      scene.grid = res.config.grid;
      scene.seed = rec.at("seed");
      for (const auto& o : rec.at("objects")) {
        SceneObject so;
        so.shape = lookup(kShapes, o.at("shape").get<std::string>(), "shape");
        so.color = lookup(kColors, o.at("color").get<std::string>(), "color");
        so.size = lookup(kSizes, o.at("size").get<std::string>(), "size");
        so.row = o.at("row");
        so.col = o.at("col");
        scene.objects.push_back(so);
      }
      SyntheticSample s =
          make_sample(rec.at("id"), scene, res.config.patch_size, res.config.max_sentences);
      if (s.long_caption != rec.at("long_caption").get<std::string>())
        throw Error("load_corpus: caption mismatch on line " + std::to_string(lineno));
      res.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("load_corpus: malformed record in " + path + ": " + e.what());
  }
  if (res.samples.size() != res.config.n)
    throw Error("load_corpus: header count " + std::to_string(res.config.n) +
                " != records " + std::to_string(res.samples.size()));
  return res;
}

// ---------------------------------------------------------------------------
// Attribute-swap negatives.

enum class Difficulty { hard, medium, easy, trivial };

inline constexpr std::array<Difficulty, 4> kDifficulties = {
    Difficulty::hard, Difficulty::medium, Difficulty::easy, Difficulty::trivial};

inline const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::hard: return "hard";
    case Difficulty::medium: return "medium";
    case Difficulty::easy: return "easy";
    default: return "trivial";
  }
}

/// Number of differing attributes among color, size and position.
inline int attribute_changes(const SceneObject& a, const SceneObject& b) {
  return int(a.color != b.color) + int(a.size != b.size) +
         int(a.row != b.row || a.col != b.col);
}

inline bool matches_level(const SceneObject& pos, const SceneObject& cand, Difficulty level) {
  const int changes = attribute_changes(pos, cand);
  switch (level) {
    case Difficulty::hard: return cand.shape == pos.shape && changes == 1;
    case Difficulty::medium: return cand.shape == pos.shape && changes == 2;
    case Difficulty::easy: return cand.shape == pos.shape && changes == 3;
    default: return cand.shape != pos.shape && changes == 3;
  }
}

/// k distinct negatives for an object subcaption. hard/medium/easy keep the
/// shape and change 1/2/all of color, size and position; trivial describes a
/// different object in every respect. Objects present in `scene` are never
/// produced.
inline std::vector<std::string> make_hard_negatives(const std::string& sub,
                                                    const SceneGraph& scene,
                                                    Difficulty level, std::size_t k,
                                                    std::uint64_t seed) {
  const auto parsed = parse_object_sentence(sub);
  if (!parsed) throw Error("make_hard_negatives: not a single-object subcaption: " + sub);
  const SceneObject pos = *parsed;
  std::vector<SceneObject> pool;
  const int g = static_cast<int>(scene.grid);
  for (int sh = 0; sh < int(kShapes.size()); ++sh)
    for (int co = 0; co < int(kColors.size()); ++co)
      for (int sz = 0; sz < int(kSizes.size()); ++sz)
        for (int r = 0; r < g; ++r)
          for (int c = 0; c < g; ++c) {
            const SceneObject cand{sh, co, sz, r, c};
            if (cand == pos || scene.contains(cand)) continue;
            if (matches_level(pos, cand, level)) pool.push_back(cand);
          }
  if (pool.size() < k)
    throw Error("make_hard_negatives: only " + std::to_string(pool.size()) + " " +
                to_string(level) + " negatives available, " + std::to_string(k) +
                " requested");
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(object_sentence(pool[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Batching.

struct TokenizedBatch {
  std::vector<std::size_t> sample_ids;
  std::vector<Image> images;
  std::vector<std::vector<int>> long_tokens;
  std::vector<std::vector<int>> short_tokens;
  std::size_t m_max = 0;
  std::vector<std::vector<std::vector<int>>> sub_tokens;  // [b][i], empty when masked
  std::vector<std::vector<std::uint8_t>> sub_mask;        // [b][i]

  std::size_t size() const { return images.size(); }
};

struct BatchOptions {
  bool include_summary_in_sap = true;
};

inline TokenizedBatch make_batch(std::span<const SyntheticSample> corpus,
                                 std::span<const std::size_t> indices, const Vocabulary& vocab,
                                 const BatchOptions& opts = {}) {
  TokenizedBatch b;
  for (std::size_t idx : indices) b.m_max = std::max(b.m_max, corpus[idx].subcaptions.size());
  for (std::size_t idx : indices) {
    const SyntheticSample& s = corpus[idx];
    b.sample_ids.push_back(s.id);
    b.images.push_back(s.image);
    b.long_tokens.push_back(tokenize(s.long_caption, vocab));
    b.short_tokens.push_back(tokenize(s.short_caption, vocab));
    std::vector<std::vector<int>> subs(b.m_max);
    std::vector<std::uint8_t> mask(b.m_max, 0);
    for (std::size_t i = 0; i < s.subcaptions.size(); ++i) {
      if (i == 0 && !opts.include_summary_in_sap) continue;
      subs[i] = tokenize(s.subcaptions[i], vocab);
      mask[i] = 1;
    }
    b.sub_tokens.push_back(std::move(subs));
    b.sub_mask.push_back(std::move(mask));
  }
  return b;
}

/// Shuffled full batches; a trailing partial batch is dropped.
inline std::vector<TokenizedBatch> make_batches(std::span<const SyntheticSample> corpus,
                                                std::size_t batch_size,
                                                std::uint64_t shuffle_seed,
                                                const Vocabulary& vocab,
                                                const BatchOptions& opts = {}) {
  if (batch_size < 2) throw Error("make_batches: batch_size must be at least 2");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<TokenizedBatch> out;
  for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size)
    out.push_back(make_batch(corpus, std::span(order).subspan(start, batch_size), vocab, opts));
  return out;
}

}  // namespace mulalign
