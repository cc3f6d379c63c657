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

// Run configuration and the commands behind the `mulalign` tool. Everything
// here is callable in-process; the executable only parses flags.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "mulalign/evaluation.hpp"
#include "mulalign/gradcheck_suite.hpp"
#include "mulalign/training.hpp"

namespace mulalign {

/// Bad flags, keys or values. Maps to exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2, kExitDivergence = 3 };

// ---------------------------------------------------------------------------
// RunConfig

struct RunConfig {
  // model
  std::string precision = "float32";  // float32 | float64
  std::uint64_t d_model = 64;
  std::uint64_t layers = 1;
  std::uint64_t heads = 4;
  std::uint64_t mlp_hidden = 128;
  std::uint64_t embed_dim = 32;
  double embed_std = 0.02;
  double calib_init_std = 0.02;
  double calib_ratio = 0.5;
  std::uint64_t text_base_len = 77;
  std::uint64_t pos_keep = 20;
  std::uint64_t pos_ratio = 4;
  // objective
  std::string variant = "full";
  double lambda_w = 1.0;
  double lambda_s = 1.0;
  double tau_tok = 0.07;
  std::string wpr_contrast = "info_nce";  // info_nce | sigmoid
  // optimization
  std::uint64_t epochs = 8;
  std::uint64_t batch_size = 16;
  double lr_backbone = 1e-4;
  double lr_refinement = 2e-3;
  std::uint64_t warmup_steps = 200;
  double weight_decay = 0.05;
  // seeds
  std::uint64_t seed = 1;
  std::uint64_t shuffle_seed = 7;
  std::uint64_t data_seed = 7;
  // corpus
  std::uint64_t n_train = 512;
  std::uint64_t n_test = 128;
  std::uint64_t grid = 4;
  std::uint64_t patch_size = 4;
  std::uint64_t max_objects = 3;
  std::uint64_t max_sentences = 15;
  // evaluation
  std::uint64_t probe_k = 5;
  std::uint64_t probe_groups = 200;
  std::uint64_t probe_seed = 3;
  std::string out_dir = "runs/default";

  using Member = std::variant<std::string RunConfig::*, std::uint64_t RunConfig::*,
                              double RunConfig::*>;
  struct Field {
    const char* key;
    Member member;
  };

  static const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        {"precision", &RunConfig::precision},
        {"d_model", &RunConfig::d_model},
        {"layers", &RunConfig::layers},
        {"heads", &RunConfig::heads},
        {"mlp_hidden", &RunConfig::mlp_hidden},
        {"embed_dim", &RunConfig::embed_dim},
        {"embed_std", &RunConfig::embed_std},
        {"calib_init_std", &RunConfig::calib_init_std},
        {"calib_ratio", &RunConfig::calib_ratio},
        {"text_base_len", &RunConfig::text_base_len},
        {"pos_keep", &RunConfig::pos_keep},
        {"pos_ratio", &RunConfig::pos_ratio},
        {"variant", &RunConfig::variant},
        {"lambda_w", &RunConfig::lambda_w},
        {"lambda_s", &RunConfig::lambda_s},
        {"tau_tok", &RunConfig::tau_tok},
        {"wpr_contrast", &RunConfig::wpr_contrast},
        {"epochs", &RunConfig::epochs},
        {"batch_size", &RunConfig::batch_size},
        {"lr_backbone", &RunConfig::lr_backbone},
        {"lr_refinement", &RunConfig::lr_refinement},
        {"warmup_steps", &RunConfig::warmup_steps},
        {"weight_decay", &RunConfig::weight_decay},
        {"seed", &RunConfig::seed},
        {"shuffle_seed", &RunConfig::shuffle_seed},
        {"data_seed", &RunConfig::data_seed},
        {"n_train", &RunConfig::n_train},
        {"n_test", &RunConfig::n_test},
        {"grid", &RunConfig::grid},
        {"patch_size", &RunConfig::patch_size},
        {"max_objects", &RunConfig::max_objects},
        {"max_sentences", &RunConfig::max_sentences},
        {"probe_k", &RunConfig::probe_k},
        {"probe_groups", &RunConfig::probe_groups},
        {"probe_seed", &RunConfig::probe_seed},
        {"out_dir", &RunConfig::out_dir},
    };
    return f;
  }

  static const Field& field(const std::string& key) {
    for (const auto& f : fields())
      if (key == f.key) return f;
    throw UsageError("unknown config key '" + key + "'");
  }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;
  std::string to_text() const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  CorpusConfig corpus_config() const;
  ProbeOptions probe_options() const {
    return {ProbeScoring::sap, variant_from_name(variant).use_lc};
  }
  bool is_double() const { return precision == "float64"; }
};

namespace detail {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& raw) {
  const Field& f = field(key);
  const std::string value = trim(raw);
  std::visit(
      [&](auto member) {
        using V = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<V, std::string>) {
          this->*member = value;
        } else {
          V parsed{};
          const char* end = value.data() + value.size();
          const auto res = std::from_chars(value.data(), end, parsed);
          if (value.empty() || res.ec != std::errc() || res.ptr != end)
            throw UsageError("bad value '" + value + "' for key '" + key + "'");
          this->*member = parsed;
        }
      },
      f.member);
}

inline std::string RunConfig::get(const std::string& key) const {
  return std::visit(
      [&](auto member) -> std::string {
        const auto& v = this->*member;
        using V = std::remove_cvref_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::string>) return v;
        else if constexpr (std::is_same_v<V, double>) return detail::format_double(v);
        else return std::to_string(v);
      },
      field(key).member);
}

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + get(f.key) + "\n";
  return out;
}

inline void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw UsageError("invalid config: " + what);
  };
  auto finite_nonneg = [](double x) { return std::isfinite(x) && x >= 0.0; };
  need(precision == "float32" || precision == "float64", "precision must be float32 or float64");
  try {
    validate_variant(variant_from_name(variant));
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  need(wpr_contrast == "info_nce" || wpr_contrast == "sigmoid",
       "wpr_contrast must be info_nce or sigmoid");
  need(d_model >= 1 && heads >= 1 && d_model % heads == 0, "d_model must be a multiple of heads");
  need(layers >= 1 && mlp_hidden >= 1, "layers and mlp_hidden must be positive");
  need(embed_dim >= 2, "embed_dim must be at least 2");
  need(std::isfinite(embed_std) && embed_std > 0, "embed_std must be positive");
  need(std::isfinite(calib_init_std) && calib_init_std > 0, "calib_init_std must be positive");
  need(calib_ratio > 0 && calib_ratio <= 1, "calib_ratio must lie in (0, 1]");
  need(pos_ratio >= 1, "pos_ratio must be at least 1");
  need(pos_keep <= text_base_len, "pos_keep must not exceed text_base_len");
  need(finite_nonneg(lambda_w) && finite_nonneg(lambda_s), "lambdas must be finite and >= 0");
  need(std::isfinite(tau_tok) && tau_tok > 0, "tau_tok must be positive");
  need(batch_size >= 2, "batch_size must be at least 2");
  need(finite_nonneg(lr_backbone) && finite_nonneg(lr_refinement),
       "learning rates must be finite and >= 0");
  need(finite_nonneg(weight_decay), "weight_decay must be finite and >= 0");
  need(n_train >= batch_size, "n_train must hold at least one batch");
  need(n_test >= 1, "n_test must be at least 1");
  need(grid >= 1 && grid <= 32, "grid must lie in [1, 32]");
  need(patch_size >= 1, "patch_size must be positive");
  need(max_objects >= 1 && max_objects <= grid * grid && max_objects <= 31,
       "max_objects must lie in [1, min(grid^2, 31)]");
  need(max_sentences >= 1, "max_sentences must be positive");
  need(static_cast<double>(n_train + n_test) <= scene_capacity(grid, max_objects),
       "n_train + n_test exceeds the number of distinct scenes");
  need(model_config().text.max_len() >= caption_token_capacity(max_objects) + 1,
       "text positional table is too short for the longest caption");
  need(probe_k >= 1 && probe_groups >= 1, "probe_k and probe_groups must be positive");
  need(!out_dir.empty(), "out_dir must be set");
}

inline ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.vision.channels = 3;
  mc.vision.patch_size = patch_size;
  mc.vision.grid = grid;
  mc.vision.d_model = d_model;
  mc.vision.n_layers = layers;
  mc.vision.n_heads = heads;
  mc.vision.mlp_hidden = mlp_hidden;
  mc.vision.d_out = embed_dim;
  mc.vision.embed_std = embed_std;
  mc.text.vocab_size = Vocabulary().size();
  mc.text.d_model = d_model;
  mc.text.n_layers = layers;
  mc.text.n_heads = heads;
  mc.text.mlp_hidden = mlp_hidden;
  mc.text.d_out = embed_dim;
  mc.text.base_len = text_base_len;
  mc.text.keep = pos_keep;
  mc.text.ratio = pos_ratio;
  mc.text.eot_id = Vocabulary::kEot;
  mc.text.embed_std = embed_std;
  mc.text_tokens = caption_token_capacity(max_objects);
  mc.calib_ratio = calib_ratio;
  mc.calib_init_std = calib_init_std;
  mc.seed = seed;
  return mc;
}

inline TrainConfig RunConfig::train_config() const {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = batch_size;
  tc.lr_backbone = lr_backbone;
  tc.lr_refine = lr_refinement;
  tc.warmup_steps = warmup_steps;
  tc.adam.weight_decay = weight_decay;
  tc.loss.variant = variant_from_name(variant);
  tc.loss.lambda_w = lambda_w;
  tc.loss.lambda_s = lambda_s;
  tc.loss.tau_tok = tau_tok;
  tc.loss.sample_contrast =
      wpr_contrast == "sigmoid" ? SampleContrast::sigmoid : SampleContrast::info_nce;
  tc.shuffle_seed = shuffle_seed;
  return tc;
}

inline CorpusConfig RunConfig::corpus_config() const {
  CorpusConfig cc;
  cc.n = n_train + n_test;
  cc.grid = grid;
  cc.patch_size = patch_size;
  cc.max_objects = max_objects;
  cc.max_sentences = max_sentences;
  cc.seed = data_seed;
  return cc;
}

/// Applies `key = value` lines on top of `base`. '#' starts a comment.
/// Unknown or repeated keys are errors. Returns the keys that were set.
inline std::set<std::string> apply_config_text(RunConfig& base, const std::string& text,
                                               const std::string& origin = "config") {
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (!seen.insert(key).second) throw UsageError(where + ": duplicate key '" + key + "'");
    try {
      base.set(key, line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(where + ": " + e.what());
    }
  }
  return seen;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Parses `key=value` overrides, e.g. from repeated --set flags.
inline std::set<std::string> apply_overrides(RunConfig& cfg, const std::vector<std::string>& kv) {
  std::set<std::string> keys;
  for (const auto& item : kv) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("override '" + item + "' is not key=value");
    const std::string key = trim(std::string_view(item).substr(0, eq));
    cfg.set(key, item.substr(eq + 1));
    keys.insert(key);
  }
  return keys;
}

/// MULALIGN_SEED fills every seed the user did not set explicitly.
inline void apply_seed_env(RunConfig& cfg, const std::set<std::string>& explicit_keys) {
  const char* env = std::getenv("MULALIGN_SEED");
  if (!env) return;
  for (const char* key : {"seed", "shuffle_seed", "data_seed"})
    if (!explicit_keys.count(key)) {
      try {
        cfg.set(key, env);
      } catch (const UsageError&) {
        throw UsageError(std::string("MULALIGN_SEED is not an unsigned integer: ") + env);
      }
    }
}

// ---------------------------------------------------------------------------
// Data

struct RunData {
  std::vector<SyntheticSample> samples;
  std::size_t n_train = 0;

  std::span<const SyntheticSample> train() const { return std::span(samples).first(n_train); }
  std::span<const SyntheticSample> test() const { return std::span(samples).subspan(n_train); }
};

/// The first n_train samples train, the next n_test are held out. With a
/// corpus file the samples come from it instead of being generated.
inline RunData load_run_data(const RunConfig& cfg, const std::string& corpus_path = {}) {
  RunData d;
  d.n_train = cfg.n_train;
  if (corpus_path.empty()) {
    d.samples = generate_corpus(cfg.corpus_config());
  } else {
    auto loaded = load_corpus(corpus_path);
    if (loaded.config.grid != cfg.grid || loaded.config.patch_size != cfg.patch_size)
      throw Error("corpus " + corpus_path + " has a different image geometry than the config");
    if (loaded.samples.size() < cfg.n_train + cfg.n_test)
      throw Error("corpus " + corpus_path + " holds " + std::to_string(loaded.samples.size()) +
                  " samples, config needs " + std::to_string(cfg.n_train + cfg.n_test));
    loaded.samples.resize(cfg.n_train + cfg.n_test);
    d.samples = std::move(loaded.samples);
  }
  return d;
}

struct GenDataResult {
  std::size_t samples = 0, subcaptions = 0, objects = 0;
};

inline GenDataResult cmd_gen_data(const CorpusConfig& cc, const std::string& out_path,
                                  std::ostream& log) {
  if (cc.n == 0) throw UsageError("gen-data: --n must be at least 1");
  const auto corpus = generate_corpus(cc);
  if (const auto parent = std::filesystem::path(out_path).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  save_corpus(out_path, corpus, cc);
  GenDataResult r;
  r.samples = corpus.size();
  for (const auto& s : corpus) {
    r.subcaptions += s.subcaptions.size();
    r.objects += s.scene.objects.size();
  }
  log << "wrote " << r.samples << " samples (" << r.objects << " objects, " << r.subcaptions
      << " subcaptions) to " << out_path << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  RetrievalReport retrieval;
  ProbeReport probe;         // SAP-pooled scoring, the headline number
  ProbeReport probe_global;  // image CLS scoring
  std::size_t probe_k = 0;
  std::size_t probe_groups = 0;
};

template <class T>
EvalReport evaluate(const Model<T>& model, const RunConfig& cfg,
                    std::span<const SyntheticSample> test) {
  EvalReport r;
  r.retrieval = run_retrieval(model, test);
  const auto probes = make_probe_set(test, cfg.probe_groups, cfg.probe_k, cfg.probe_seed);
  r.probe = run_fg_probe(model, test, probes, cfg.probe_options());
  r.probe_global = run_fg_probe(model, test, probes, {ProbeScoring::global, false});
  r.probe_k = cfg.probe_k;
  r.probe_groups = cfg.probe_groups;
  return r;
}

inline nlohmann::json to_json(const ProbeReport& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [level, acc] : p.levels)
    j[to_string(level)] = {{"groups", acc.groups}, {"correct", acc.correct},
                           {"accuracy", acc.accuracy()}};
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"kind", "eval"},
          {"time", iso8601_now()},
          {"n", r.retrieval.n},
          {"t2i_r1", r.retrieval.t2i_r1},
          {"t2i_r5", r.retrieval.t2i_r5},
          {"i2t_r1", r.retrieval.i2t_r1},
          {"i2t_r5", r.retrieval.i2t_r5},
          {"probe_k", r.probe_k},
          {"probe_groups", r.probe_groups},
          {"probe", to_json(r.probe)},
          {"probe_global", to_json(r.probe_global)}};
}

inline void print_report(std::ostream& out, const EvalReport& r) {
  out << std::fixed << std::setprecision(4);
  out << "retrieval (n=" << r.retrieval.n << ")  T2I R@1 " << r.retrieval.t2i_r1 << "  R@5 "
      << r.retrieval.t2i_r5 << "  I2T R@1 " << r.retrieval.i2t_r1 << "  R@5 "
      << r.retrieval.i2t_r5 << "\n";
  out << "probe (k=" << r.probe_k << ", groups/level=" << r.probe_groups << ")\n";
  for (const auto& [level, acc] : r.probe.levels) {
    out << "  " << std::left << std::setw(8) << to_string(level) << std::right << " "
        << acc.accuracy() << "  (" << acc.correct << "/" << acc.groups << ")";
    if (auto it = r.probe_global.levels.find(level); it != r.probe_global.levels.end())
      out << "  global " << it->second.accuracy();
    out << "\n";
  }
  out.unsetf(std::ios::floatfield);
}

/// Calls f.template operator()<T>() with T chosen by the config precision.
template <class F>
decltype(auto) with_precision(const RunConfig& cfg, F&& f) {
  if (cfg.is_double()) return f.template operator()<double>();
  return f.template operator()<float>();
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::string corpus_path;      // empty: generate from the config
  std::string resume_path;      // empty: fresh start
  std::uint64_t checkpoint_every = 0;  // steps; 0 means once per epoch
  bool evaluate_at_end = true;
  bool quiet = false;
};

struct TrainSummary {
  std::uint64_t steps = 0;
  double first_loss = 0, last_loss = 0;
  double seconds = 0;
  bool diverged = false;
  std::string checkpoint;
  std::optional<EvalReport> report;
};

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

/// Trains one model and writes config.txt, metrics.jsonl and checkpoint.bin
/// into cfg.out_dir. On divergence the last checkpoint written stays in
/// place and the summary is flagged.
template <class T>
TrainSummary run_training(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  const std::string config_text = cfg.to_text();
  {
    std::ofstream out(join_path(cfg.out_dir, "config.txt"));
    if (!out) throw Error("cannot write " + join_path(cfg.out_dir, "config.txt"));
    out << config_text;
  }
  const RunData data = load_run_data(cfg, opt.corpus_path);
  auto model = Model<T>::init(cfg.model_config());
  auto state = OptimState<T>::fresh(model);
  if (!opt.resume_path.empty()) restore_checkpoint(load_checkpoint(opt.resume_path), model, &state);

  const std::string metrics_path = join_path(cfg.out_dir, "metrics.jsonl");
  std::ofstream metrics(metrics_path, opt.resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw Error("cannot write " + metrics_path);

  TrainSummary sum;
  sum.checkpoint = join_path(cfg.out_dir, "checkpoint.bin");
  Trainer<T> trainer(model, data.train(), cfg.train_config(), std::move(state));
  const std::uint64_t every =
      opt.checkpoint_every ? opt.checkpoint_every : trainer.steps_per_epoch();
  const auto t0 = std::chrono::steady_clock::now();
  const auto variant = cfg.train_config().loss.variant;
  if (trainer.state().step == 0) save_checkpoint(sum.checkpoint, model, trainer.state(), config_text);
  try {
    while (!trainer.done()) {
      const StepRecord rec = trainer.step();
      if (sum.steps == 0) sum.first_loss = rec.l_total;
      sum.last_loss = rec.l_total;
      ++sum.steps;
      metrics << to_json(rec, variant).dump() << '\n';
      if (rec.step % every == 0 || trainer.done()) {
        metrics.flush();
        save_checkpoint(sum.checkpoint, model, trainer.state(), config_text);
      }
      if (!opt.quiet && (rec.step % trainer.steps_per_epoch() == 0 || trainer.done()))
        log << "step " << rec.step << "/" << trainer.total_steps() << "  epoch " << rec.epoch + 1
            << "  l_total " << rec.l_total << "\n";
    }
  } catch (const DivergenceError& e) {
    metrics << nlohmann::json{{"kind", "divergence"}, {"step", e.step()}, {"message", e.what()},
                              {"time", iso8601_now()}}
                   .dump()
            << '\n';
    sum.diverged = true;
    log << "diverged: " << e.what() << "; last good checkpoint kept at " << sum.checkpoint
        << "\n";
    return sum;
  }
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (opt.evaluate_at_end) {
    sum.report = evaluate(model, cfg, data.test());
    metrics << to_json(*sum.report).dump() << '\n';
    if (!opt.quiet) print_report(log, *sum.report);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Evaluation from a checkpoint

struct EvalOptions {
  std::string checkpoint;
  std::string corpus_path;
  std::string report_path;          // empty: <checkpoint dir>/report.json
  std::size_t attention_maps = 0;   // number of held-out samples to export
};

/// The config stored inside the checkpoint, with `overrides` applied.
inline RunConfig config_from_checkpoint(const Checkpoint& ck,
                                        const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  apply_config_text(cfg, ck.meta(), "checkpoint config");
  apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

template <class T>
EvalReport run_eval(const RunConfig& cfg, const Checkpoint& ck, const EvalOptions& opt,
                    std::ostream& log) {
  auto model = Model<T>::init(cfg.model_config());
  restore_checkpoint(ck, model, static_cast<OptimState<T>*>(nullptr));
  const RunData data = load_run_data(cfg, opt.corpus_path);
  const EvalReport rep = evaluate(model, cfg, data.test());
  print_report(log, rep);
  const std::string dir = std::filesystem::path(opt.checkpoint).parent_path().string();
  const std::string path = opt.report_path.empty() ? join_path(dir, "report.json") : opt.report_path;
  {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << to_json(rep).dump(2) << '\n';
  }
  log << "report written to " << path << "\n";
  const auto test = data.test();
  for (std::size_t i = 0; i < std::min(opt.attention_maps, test.size()); ++i) {
    const auto& s = test[i];
    if (s.subcaptions.size() < 2) continue;
    const std::string prefix = join_path(dir, "attention_" + std::to_string(s.id));
    export_attention_map(model, s, s.subcaptions[1], prefix);
    log << "attention map: " << prefix << ".pgm\n";
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradcheckRow {
  GradCheckReport report;
  double seconds = 0;
};

/// Runs every finite-difference case whose name equals `block` or starts
/// with `block` + "."; all cases when `block` is empty.
inline std::vector<GradcheckRow> cmd_gradcheck(double tol, double eps, const std::string& block,
                                               std::ostream& out) {
  auto cases = gradcheck_cases();
  std::vector<GradcheckRow> rows;
  out << std::left << std::setw(40) << "block" << std::right << std::setw(10) << "entries"
      << std::setw(14) << "max_rel_err" << "  status\n";
  for (auto& c : cases) {
    if (!block.empty() && c.name != block && c.name.rfind(block + ".", 0) != 0) continue;
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckRow row{run_gradcheck_case(c, eps, tol), 0.0};
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    row.report.block = c.name;
    out << std::left << std::setw(40) << c.name << std::right << std::setw(10)
        << row.report.entries_checked << std::setw(14) << std::scientific << std::setprecision(3)
        << row.report.max_rel_err << std::defaultfloat << "  "
        << (row.report.passed ? "ok" : "FAIL") << "\n";
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw UsageError("gradcheck: no block matches '" + block + "'");
  const auto worst = std::max_element(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.report.max_rel_err < b.report.max_rel_err;
  });
  const bool all = std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.report.passed; });
  out << (all ? "all " + std::to_string(rows.size()) + " blocks pass"
              : std::string("FAILED"))
      << " (tol " << tol << ", eps " << eps << "); worst offender " << std::setprecision(10)
      << worst->report.block
      << " tensor " << worst->report.worst_tensor << "[" << worst->report.worst_index
      << "] analytic " << worst->report.worst_analytic << " numeric "
      << worst->report.worst_numeric << " rel " << worst->report.max_rel_err << "\n"
      << std::setprecision(6);
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  std::uint64_t seed = 0;
  bool diverged = false;
  EvalReport report;
};

struct AblationRow {
  std::string variant;
  double lambda_w = 0, lambda_s = 0;
  std::vector<AblationRun> runs;

  /// Mean over the runs that finished.
  double mean(const std::function<double(const EvalReport&)>& f) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : runs)
      if (!r.diverged) {
        s += f(r.report);
        ++n;
      }
    return n ? s / double(n) : std::nan("");
  }
  double level(Difficulty d) const {
    return mean([d](const EvalReport& r) {
      const auto it = r.probe.levels.find(d);
      return it == r.probe.levels.end() ? 0.0 : it->second.accuracy();
    });
  }
};

struct AblationOptions {
  std::vector<std::string> variants;  // empty: the config's variant
  std::vector<double> tie_lambdas;    // each value sets lambda_w = lambda_s
  std::size_t seeds = 1;
  std::string corpus_path;
};

/// Seed index i uses model seed cfg.seed + i and shuffle seed
/// cfg.shuffle_seed + i for every row, so rows see identical data orders.
template <class T>
std::vector<AblationRow> run_ablation(const RunConfig& base, const AblationOptions& opt,
                                      std::ostream& log) {
  base.validate();
  if (opt.seeds == 0) throw UsageError("ablate: --seeds must be at least 1");
  const RunData data = load_run_data(base, opt.corpus_path);
  std::vector<RunConfig> row_cfgs;
  const auto variants = opt.variants.empty() ? std::vector<std::string>{base.variant} : opt.variants;
  for (const auto& v : variants) {
    if (opt.tie_lambdas.empty()) {
      RunConfig c = base;
      c.variant = v;
      row_cfgs.push_back(c);
    }
    for (double lam : opt.tie_lambdas) {
      RunConfig c = base;
      c.variant = v;
      c.lambda_w = c.lambda_s = lam;
      row_cfgs.push_back(c);
    }
  }
  for (const auto& c : row_cfgs) c.validate();

  std::vector<AblationRow> rows;
  for (const auto& rc : row_cfgs) {
    AblationRow row{rc.variant, rc.lambda_w, rc.lambda_s, {}};
    for (std::size_t i = 0; i < opt.seeds; ++i) {
      RunConfig c = rc;
      c.seed = rc.seed + i;
      c.shuffle_seed = rc.shuffle_seed + i;
      AblationRun run;
      run.seed = c.seed;
      auto model = Model<T>::init(c.model_config());
      const auto t0 = std::chrono::steady_clock::now();
      try {
        fit(model, data.train(), c.train_config());
        run.report = evaluate(model, c, data.test());
      } catch (const DivergenceError& e) {
        run.diverged = true;
        log << "  " << c.variant << " seed " << c.seed << " diverged: " << e.what() << "\n";
      }
      log << "  " << std::left << std::setw(12) << c.variant << std::right << " lambda "
          << c.lambda_w << " seed " << c.seed << "  T2I R@1 " << run.report.retrieval.t2i_r1
          << "  I2T R@1 " << run.report.retrieval.i2t_r1 << "  ("
          << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
          << " s)\n";
      row.runs.push_back(std::move(run));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(13) << "variant" << std::right << std::setw(6) << "lam_w"
      << std::setw(6) << "lam_s" << std::setw(8) << "T2I@1" << std::setw(8) << "T2I@5"
      << std::setw(8) << "I2T@1" << std::setw(8) << "I2T@5" << std::setw(8) << "hard"
      << std::setw(8) << "medium" << std::setw(8) << "easy" << std::setw(8) << "trivial"
      << std::setw(6) << "runs" << "\n";
  out << std::fixed;
  for (const auto& r : rows) {
    std::size_t ok = 0;
    for (const auto& run : r.runs) ok += !run.diverged;
    out << std::left << std::setw(13) << r.variant << std::right << std::setprecision(2)
        << std::setw(6) << r.lambda_w << std::setw(6) << r.lambda_s << std::setprecision(4)
        << std::setw(8) << r.mean([](const EvalReport& e) { return e.retrieval.t2i_r1; })
        << std::setw(8) << r.mean([](const EvalReport& e) { return e.retrieval.t2i_r5; })
        << std::setw(8) << r.mean([](const EvalReport& e) { return e.retrieval.i2t_r1; })
        << std::setw(8) << r.mean([](const EvalReport& e) { return e.retrieval.i2t_r5; });
    for (Difficulty d : kDifficulties) out << std::setw(8) << r.level(d);
    out << std::setw(4) << ok << "/" << r.runs.size() << "\n";
  }
  return out.str();
}

inline nlohmann::json to_json(const AblationRow& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    nlohmann::json j = run.diverged ? nlohmann::json{{"diverged", true}} : to_json(run.report);
    j["seed"] = run.seed;
    runs.push_back(std::move(j));
  }
  return {{"kind", "ablation"}, {"variant", r.variant}, {"lambda_w", r.lambda_w},
          {"lambda_s", r.lambda_s}, {"runs", runs}};
}

}  // namespace mulalign
