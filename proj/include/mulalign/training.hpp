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

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mulalign/data.hpp"
#include "mulalign/model.hpp"
#include "mulalign/params.hpp"

namespace mulalign {

/// Raised when training produces a non-finite or exploding loss/gradient.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::uint64_t step)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

/// Linear warm-up to base_lr over warmup_steps, constant afterwards.
inline double lr_at(std::uint64_t step, std::uint64_t warmup_steps, double base_lr) {
  if (warmup_steps == 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <class T>
struct OptimState {
  Model<T> m;  // first moments, mirrors parameter shapes
  Model<T> v;  // second moments
  std::uint64_t step = 0;

  static OptimState fresh(const Model<T>& model) {
    return {zeros_like(model), zeros_like(model), 0};
  }
};

/// Decoupled-weight-decay Adam update of one tensor. `step` is 1-based.
template <class T>
void adamw_update(Mat<T>& p, const Mat<T>& g, Mat<T>& m, Mat<T>& v, std::uint64_t step,
                  double lr, double weight_decay, const AdamWConfig& hp) {
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  const T decay = static_cast<T>(1.0 - lr * weight_decay);
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(hp.eps);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] *= decay;
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
  }
}

/// One grouped AdamW step over every model parameter. Decay applies only
/// to parameters flagged for it.
template <class T>
void adamw_step(Model<T>& model, const Model<T>& grads, OptimState<T>& state,
                double lr_backbone, double lr_refine, const AdamWConfig& hp) {
  auto ps = collect_params(model);
  auto gs = collect_params(const_cast<Model<T>&>(grads));
  auto ms = collect_params(state.m);
  auto vs = collect_params(state.v);
  for (std::size_t i = 0; i < gs.size(); ++i)
    if (!all_finite(*gs[i].value))
      throw DivergenceError("non-finite gradient for " + gs[i].name, state.step + 1);
  ++state.step;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double lr = ps[i].info.group == ParamGroup::backbone ? lr_backbone : lr_refine;
    const double wd = ps[i].info.decay ? hp.weight_decay : 0.0;
    adamw_update(*ps[i].value, *gs[i].value, *ms[i].value, *vs[i].value, state.step, lr, wd, hp);
  }
}

struct TrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  double lr_backbone = 1e-4;
  double lr_refine = 2e-3;
  std::uint64_t warmup_steps = 200;
  AdamWConfig adam;
  LossOptions loss;
  BatchOptions batching;
  std::uint64_t shuffle_seed = 7;
  double divergence_threshold = 1e6;
};

struct StepRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double l_global = 0, l_word = 0, l_sub = 0, l_total = 0;
  double lr_backbone = 0, lr_refine = 0;
  double wall_seconds = 0;
  std::string timestamp;
};

inline std::string iso8601_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Line-delimited metrics record. Terms a variant does not use are omitted.
inline nlohmann::json to_json(const StepRecord& r, const VariantSpec& v) {
  nlohmann::json j = {{"kind", "step"},
                      {"step", r.step},
                      {"epoch", r.epoch},
                      {"l_total", r.l_total},
                      {"lr_backbone", r.lr_backbone},
                      {"lr_refinement", r.lr_refine},
                      {"wall_seconds", r.wall_seconds},
                      {"time", r.timestamp}};
  if (v.use_global) j["l_global"] = r.l_global;
  if (v.use_wpr) j["l_word"] = r.l_word;
  if (v.use_sap) j["l_sub"] = r.l_sub;
  return j;
}

/// Resumable training loop. The batch order is a pure function of the
/// shuffle seed and epoch index, so a run can stop after any step and
/// continue from a checkpoint with identical results.
template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, std::span<const SyntheticSample> corpus, TrainConfig cfg)
      : Trainer(model, corpus, std::move(cfg), OptimState<T>::fresh(model)) {}

  Trainer(Model<T>& model, std::span<const SyntheticSample> corpus, TrainConfig cfg,
          OptimState<T> state)
      : model_(model), corpus_(corpus), cfg_(std::move(cfg)), state_(std::move(state)) {
    if (corpus_.empty()) throw Error("fit: empty corpus");
    if (cfg_.batch_size < 2) throw Error("fit: batch_size must be at least 2");
    if (corpus_.size() < cfg_.batch_size)
      throw Error("fit: corpus smaller than one batch");
    validate_variant(cfg_.loss.variant);
    check_partition();
    steps_per_epoch_ = corpus_.size() / cfg_.batch_size;
  }

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::uint64_t total_steps() const { return cfg_.epochs * steps_per_epoch_; }
  bool done() const { return state_.step >= total_steps(); }
  const OptimState<T>& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }

  StepRecord step() {
    if (done()) throw Error("fit: no steps remaining");
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t epoch = state_.step / steps_per_epoch_;
    const std::size_t within = state_.step % steps_per_epoch_;
    if (epoch != cached_epoch_) {
      batches_ = make_batches(corpus_, cfg_.batch_size, epoch_seed(epoch), vocab_, cfg_.batching);
      cached_epoch_ = epoch;
    }
    const std::uint64_t next = state_.step + 1;
    auto loss = [&] {
      try {
        return total_loss(model_, batches_[within], cfg_.loss, true);
      } catch (const NumericError& e) {
        throw DivergenceError(e.what(), next);
      }
    }();
    if (!std::isfinite(static_cast<double>(loss.l_total)) ||
        std::abs(static_cast<double>(loss.l_total)) > cfg_.divergence_threshold)
      throw DivergenceError("loss diverged (" + std::to_string(loss.l_total) + ")", next);
    StepRecord rec;
    rec.step = next;
    rec.epoch = epoch;
    rec.l_global = loss.l_global;
    rec.l_word = loss.l_word;
    rec.l_sub = loss.l_sub;
    rec.l_total = loss.l_total;
    rec.lr_backbone = lr_at(next, cfg_.warmup_steps, cfg_.lr_backbone);
    rec.lr_refine = lr_at(next, cfg_.warmup_steps, cfg_.lr_refine);
    adamw_step(model_, loss.grads, state_, rec.lr_backbone, rec.lr_refine, cfg_.adam);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.timestamp = iso8601_now();
    return rec;
  }

  /// Runs until `max_steps` total steps have been taken (or training ends).
  std::vector<StepRecord> run(std::uint64_t max_steps = std::numeric_limits<std::uint64_t>::max(),
                              const std::function<void(const StepRecord&)>& on_step = {}) {
    std::vector<StepRecord> log;
    while (!done() && state_.step < max_steps) {
      log.push_back(step());
      if (on_step) on_step(log.back());
    }
    return log;
  }

  std::uint64_t epoch_seed(std::size_t epoch) const {
    return cfg_.shuffle_seed * 1000003ULL + epoch;
  }

 private:
  void check_partition() {
    std::size_t backbone = 0, refinement = 0, total = 0;
    Model<T>::visit(model_, [&](const std::string&, const Mat<T>& m, ParamInfo info) {
      (info.group == ParamGroup::backbone ? backbone : refinement) += m.size();
      total += m.size();
    });
    if (backbone + refinement != total || backbone == 0 || refinement == 0)
      throw Error("fit: parameter groups do not partition the model");
  }

  Model<T>& model_;
  std::span<const SyntheticSample> corpus_;
  TrainConfig cfg_;
  OptimState<T> state_;
  Vocabulary vocab_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t cached_epoch_ = std::numeric_limits<std::size_t>::max();
  std::vector<TokenizedBatch> batches_;
};

template <class T>
struct FitResult {
  std::vector<StepRecord> log;
  OptimState<T> state;
};

template <class T>
FitResult<T> fit(Model<T>& model, std::span<const SyntheticSample> corpus, const TrainConfig& cfg,
                 const std::function<void(const StepRecord&)>& on_step = {}) {
  Trainer<T> trainer(model, corpus, cfg);
  auto log = trainer.run(std::numeric_limits<std::uint64_t>::max(), on_step);
  return {std::move(log), trainer.state()};
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   "MULA" | u32 version | u64 config hash | u64 step | u32 record count
//   record: u32 name length | name | u32 dtype | u32 rank | u32 dims[rank] | data
//   u32 CRC32 of every preceding byte
//
// All integers and floats are little-endian. dtype is the element width:
// 1 (bytes), 4 (float32) or 8 (float64).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::uint32_t dtype = 4;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::vector<TensorRecord> records;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
  std::string meta() const {
    const TensorRecord* r = find("meta/config");
    return r ? std::string(r->bytes.begin(), r->bytes.end()) : std::string();
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
TensorRecord tensor_record(const std::string& name, const Mat<T>& m) {
  TensorRecord r;
  r.name = name;
  r.dtype = sizeof(T);
  r.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  for (T v : m.values()) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(r.bytes, bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64(r.bytes, bits);
    }
  }
  return r;
}

template <class T>
void read_tensor(const TensorRecord& r, Mat<T>& dst) {
  if (r.dims.size() != 2 || r.dims[0] != dst.rows() || r.dims[1] != dst.cols())
    throw Error("checkpoint: shape mismatch for " + r.name);
  if (r.dtype != 4 && r.dtype != 8) throw Error("checkpoint: " + r.name + " is not a float tensor");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::uint64_t bits = 0;
    for (std::uint32_t b = 0; b < r.dtype; ++b)
      bits |= static_cast<std::uint64_t>(r.bytes[i * r.dtype + b]) << (8 * b);
    if (r.dtype == 4) {
      const auto b32 = static_cast<std::uint32_t>(bits);
      float f;
      std::memcpy(&f, &b32, 4);
      dst[i] = static_cast<T>(f);
    } else {
      double f;
      std::memcpy(&f, &bits, 8);
      dst[i] = static_cast<T>(f);
    }
  }
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
  std::size_t offset() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n)
      throw Error(std::string("checkpoint: truncated while reading ") + what + " at offset " +
                  std::to_string(pos_));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::vector<std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> out(buf_.begin() + static_cast<long>(pos_),
                                  buf_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return out;
  }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

}  // namespace detail

/// Builds a checkpoint from model parameters, optimizer moments and an
/// opaque configuration text stored as the "meta/config" byte record.
template <class T>
Checkpoint make_checkpoint(const Model<T>& model, const OptimState<T>& state,
                           const std::string& meta = {}) {
  Checkpoint ck;
  ck.config_hash = model.cfg.hash();
  ck.step = state.step;
  TensorRecord meta_rec;
  meta_rec.name = "meta/config";
  meta_rec.dtype = 1;
  meta_rec.dims = {static_cast<std::uint32_t>(meta.size())};
  meta_rec.bytes.assign(meta.begin(), meta.end());
  ck.records.push_back(std::move(meta_rec));
  auto& mm = const_cast<Model<T>&>(model);
  for (auto& p : collect_params(mm)) ck.records.push_back(detail::tensor_record("param/" + p.name, *p.value));
  for (auto& p : collect_params(const_cast<Model<T>&>(state.m)))
    ck.records.push_back(detail::tensor_record("adam.m/" + p.name, *p.value));
  for (auto& p : collect_params(const_cast<Model<T>&>(state.v)))
    ck.records.push_back(detail::tensor_record("adam.v/" + p.name, *p.value));
  return ck;
}

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out = {'M', 'U', 'L', 'A'};
  detail::put_u32(out, ck.version);
  detail::put_u64(out, ck.config_hash);
  detail::put_u64(out, ck.step);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.records.size()));
  for (const auto& r : ck.records) {
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    detail::put_u32(out, r.dtype);
    detail::put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) detail::put_u32(out, d);
    out.insert(out.end(), r.bytes.begin(), r.bytes.end());
  }
  detail::put_u32(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& buf) {
  detail::ByteReader in(buf);
  const auto magic = in.bytes(4, "magic");
  if (std::string(magic.begin(), magic.end()) != "MULA")
    throw Error("checkpoint: bad magic bytes at offset 0");
  if (buf.size() < 8) throw Error("checkpoint: truncated at offset 4");
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) stored_crc |= static_cast<std::uint32_t>(buf[body + i]) << (8 * i);
  Checkpoint ck;
  ck.version = in.u32("version");
  ck.config_hash = in.u64("config hash");
  ck.step = in.u64("step");
  const std::uint32_t n = in.u32("record count");
  for (std::uint32_t k = 0; k < n; ++k) {
    TensorRecord r;
    const std::uint32_t len = in.u32("name length");
    const auto name = in.bytes(len, "record name");
    r.name.assign(name.begin(), name.end());
    r.dtype = in.u32("dtype");
    if (r.dtype != 1 && r.dtype != 4 && r.dtype != 8)
      throw Error("checkpoint: unknown dtype " + std::to_string(r.dtype) + " at offset " +
                  std::to_string(in.offset() - 4));
    const std::uint32_t rank = in.u32("rank");
    if (rank > 8) throw Error("checkpoint: implausible rank at offset " + std::to_string(in.offset() - 4));
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.dims.push_back(in.u32("dims"));
      count *= r.dims.back();
    }
    if (count * r.dtype > buf.size())
      throw Error("checkpoint: record '" + r.name + "' overruns file at offset " +
                  std::to_string(in.offset()));
    r.bytes = in.bytes(static_cast<std::size_t>(count * r.dtype), "tensor data");
    ck.records.push_back(std::move(r));
  }
  if (in.offset() != body)
    throw Error("checkpoint: " + std::to_string(body > in.offset() ? body - in.offset() : 0) +
                " unexpected bytes before checksum at offset " + std::to_string(in.offset()));
  if (detail::crc32_of(buf.data(), body) != stored_crc)
    throw Error("checkpoint: CRC mismatch at offset " + std::to_string(body));
  return ck;
}

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model, const OptimState<T>& state,
                     const std::string& meta = {}) {
  const auto bytes = serialize_checkpoint(make_checkpoint(model, state, meta));
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("save_checkpoint: cannot open " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("save_checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw Error("save_checkpoint: cannot move " + tmp + " to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_checkpoint: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(buf);
}

/// Copies checkpoint tensors into `model` (and `state` when given). Refuses
/// a mismatched format version or config hash unless `force` is set.
template <class T>
void restore_checkpoint(const Checkpoint& ck, Model<T>& model, OptimState<T>* state,
                        bool force = false) {
  if (ck.version != kCheckpointVersion && !force)
    throw Error("checkpoint: format version " + std::to_string(ck.version) + " != " +
                std::to_string(kCheckpointVersion));
  if (ck.config_hash != model.cfg.hash() && !force)
    throw Error("checkpoint: config hash mismatch");
  auto load_into = [&](const std::string& prefix, Model<T>& dst) {
    for (auto& p : collect_params(dst)) {
      const TensorRecord* r = ck.find(prefix + p.name);
      if (!r) throw Error("checkpoint: missing tensor " + prefix + p.name);
      detail::read_tensor(*r, *p.value);
    }
  };
  load_into("param/", model);
  if (state) {
    *state = OptimState<T>::fresh(model);
    load_into("adam.m/", state->m);
    load_into("adam.v/", state->v);
    state->step = ck.step;
  }
}

}  // namespace mulalign
