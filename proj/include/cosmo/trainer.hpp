// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-source training: one accumulation cycle takes a batch from each
// scheduled source, guards every sub-loss against spikes, accumulates
// gradients, clips the global norm and applies AdamW to learnable
// parameters only.
//
// Checkpoint file layout (little-endian):
//   "COSMOCK1" | u64 manifest byte length | JSON manifest | f64 buffers
// Buffers follow the manifest's "tensors" list: every model parameter, then
// the Adam first and second moments of each learnable parameter.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cosmo/document.hpp"
#include "cosmo/guard.hpp"
#include "cosmo/loader.hpp"
#include "cosmo/model.hpp"
#include "cosmo/parallel.hpp"
#include "cosmo/schedule.hpp"
#include "cosmo/shard.hpp"
#include "cosmo/vocab.hpp"

namespace cosmo {

struct SourceSpec {
  std::string name;
  DataType data_type = DataType::image_text;
  double weight = 1.0;
  std::vector<std::string> shards;
  std::optional<std::size_t> batch_size;  // falls back to TrainConfig::batch_size
};

inline void to_json(json& j, const SourceSpec& s) {
  j = {{"name", s.name}, {"data_type", s.data_type}, {"weight", s.weight}, {"shards", s.shards}};
  if (s.batch_size) j["batch_size"] = *s.batch_size;
}

inline void from_json(const json& j, SourceSpec& s) {
  s.name = j.at("name").get<std::string>();
  s.data_type = j.at("data_type").get<DataType>();
  s.weight = j.value("weight", 1.0);
  s.shards = j.value("shards", std::vector<std::string>{});
  if (j.contains("batch_size")) s.batch_size = j.at("batch_size").get<std::size_t>();
  if (!(s.weight > 0)) throw ConfigError("source '" + s.name + "': weight must be positive");
}

struct TrainConfig {
  ScheduleConfig schedule;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::size_t batch_size = 4;
  LoaderStrategy loader_strategy = LoaderStrategy::min;
  double lambda_lm = 1.0;
  double lambda_contrastive = 1.0;
  GuardConfig guard;
  std::size_t window_length = kDefaultWindowLength;

  void validate() const {
    try {
      schedule.validate();
      guard.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must be in [0, 1)");
    if (!(grad_clip > 0)) throw ConfigError("train: grad_clip must be positive");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be non-negative");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (window_length < kMinWindowLength) throw ConfigError("train: window_length below " + std::to_string(kMinWindowLength));
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"lr_max", c.schedule.lr_max},
       {"schedule", c.schedule.schedule},
       {"max_steps", c.schedule.max_steps},
       {"n_restarts", c.schedule.n_restarts},
       {"betas", {c.beta1, c.beta2}},
       {"adam_eps", c.adam_eps},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"batch_size", c.batch_size},
       {"loader_strategy", c.loader_strategy},
       {"lambda_lm", c.lambda_lm},
       {"lambda_contrastive", c.lambda_contrastive},
       {"guard", c.guard},
       {"window_length", c.window_length}};
  if (c.schedule.warmup_steps) j["warmup_steps"] = *c.schedule.warmup_steps;
  if (c.schedule.warmup_ratio) j["warmup_ratio"] = *c.schedule.warmup_ratio;
}

inline void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.schedule.lr_max = j.value("lr_max", c.schedule.lr_max);
  c.schedule.schedule = j.value("schedule", c.schedule.schedule);
  c.schedule.max_steps = j.value("max_steps", c.schedule.max_steps);
  c.schedule.n_restarts = j.value("n_restarts", c.schedule.n_restarts);
  if (j.contains("warmup_steps")) c.schedule.warmup_steps = j.at("warmup_steps").get<long>();
  if (j.contains("warmup_ratio")) c.schedule.warmup_ratio = j.at("warmup_ratio").get<double>();
  if (j.contains("betas")) {
    const auto b = j.at("betas").get<std::vector<double>>();
    if (b.size() != 2) throw ConfigError("train: betas must have two entries");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.loader_strategy = j.value("loader_strategy", c.loader_strategy);
  c.lambda_lm = j.value("lambda_lm", c.lambda_lm);
  c.lambda_contrastive = j.value("lambda_contrastive", c.lambda_contrastive);
  if (j.contains("guard")) c.guard = j.at("guard").get<GuardConfig>();
  c.window_length = j.value("window_length", c.window_length);
}

/// Everything a `train` run is configured with.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::vector<SourceSpec> sources;
  std::uint64_t seed = 0;
  std::size_t vocab_max = 300;

  void validate() const {
    model.validate();
    train.validate();
    if (sources.empty()) throw ConfigError("run: no sources");
    if (vocab_max < Vocab::kMinSize) throw ConfigError("run: vocab_max must be at least 300");
    if (static_cast<std::size_t>(model.vocab_size) < vocab_max) {
      throw ConfigError("run: model.vocab_size " + std::to_string(model.vocab_size) + " is smaller than vocab_max " +
                        std::to_string(vocab_max));
    }
  }
};

inline void to_json(json& j, const RunConfig& c) {
  j = {{"model", c.model}, {"train", c.train}, {"sources", c.sources}, {"seed", c.seed}, {"vocab_max", c.vocab_max}};
}

inline void from_json(const json& j, RunConfig& c) {
  c.model = j.value("model", json::object()).get<ModelConfig>();
  c.train = j.value("train", json::object()).get<TrainConfig>();
  c.sources = j.value("sources", json::array()).get<std::vector<SourceSpec>>();
  c.seed = j.value("seed", std::uint64_t{0});
  c.vocab_max = j.value("vocab_max", std::size_t{300});
}

struct TrainSource {
  SourceSpec spec;
  std::vector<Document> docs;
};

/// Loads each source's shards; relative shard paths resolve against `base`.
inline std::vector<TrainSource> load_sources(const std::vector<SourceSpec>& specs, const std::filesystem::path& base) {
  std::vector<TrainSource> out;
  for (const auto& spec : specs) {
    TrainSource src{spec, {}};
    for (const auto& shard : spec.shards) {
      std::filesystem::path p = shard;
      if (p.is_relative()) p = base / p;
      for (auto& d : read_documents(p)) src.docs.push_back(std::move(d));
    }
    out.push_back(std::move(src));
  }
  return out;
}

/// Vocabulary over every text segment of every source.
inline Vocab build_source_vocab(const std::vector<TrainSource>& sources, std::size_t max_size) {
  std::vector<std::string> texts;
  for (const auto& s : sources)
    for (const auto& d : s.docs)
      for (const auto& seg : d.segments)
        if (const auto* t = std::get_if<TextSegment>(&seg)) texts.push_back(t->text);
  return build_vocab(texts, max_size);
}

enum class LossKind { lm, contrastive };

inline const char* to_string(LossKind k) { return k == LossKind::lm ? "lm" : "contrastive"; }

struct GuardEvent {
  long step = 0;
  DataType type = DataType::image_text;
  LossKind kind = LossKind::lm;
  GuardAction action = GuardAction::accept;
  double loss = 0;
};

struct BatchMetrics {
  std::string source;
  DataType type = DataType::image_text;
  double lm_loss = 0;
  std::optional<double> c_loss;
  GuardAction event = GuardAction::accept;  // most severe over the batch's sub-losses
};

struct StepMetrics {
  long step = 0;
  double lr = 0;
  double combined = 0;  // sum of weight * (lambda_lm * lm + lambda_c * c) over the cycle, before guarding
  double grad_norm = 0;
  bool updated = false;
  std::vector<BatchMetrics> batches;
};

/// Test hook: sees every raw sub-loss value and returns the value the guard
/// and the backward pass should use instead.
using LossHook = std::function<double(long step, DataType type, LossKind kind, double value)>;

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping; non-finite norms leave gradients as is.
inline double clip_grad_norm(const std::vector<NamedParam>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.value.has_grad())
      for (real g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm) || norm <= max_norm) return norm;
  const auto factor = static_cast<real>(max_norm / norm);
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    Tensor t = p.value;
    for (real& g : t.mutable_grad()) g *= factor;
  }
  return norm;
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'S', 'M', 'O', 'C', 'K', '1'};

struct CheckpointFile {
  json manifest;
  std::map<std::string, std::vector<double>> tensors;
};

inline void write_checkpoint_file(const std::filesystem::path& path, const json& manifest,
                                  const std::vector<std::span<const real>>& buffers) {
  const std::string text = manifest.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : buffers)
      for (real v : b) io::write_f64(out, static_cast<double>(v));
    if (!out) throw std::runtime_error("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kCheckpointMagic)) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  CheckpointFile f;
  try {
    const auto len = io::read_u64(in);
    if (len > (std::uint64_t{1} << 32)) throw CheckpointError("implausible manifest length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError("truncated manifest");
    f.manifest = json::parse(text);
    for (const auto& t : f.manifest.at("tensors")) {
      std::size_t n = 1;
      for (auto d : t.at("shape")) n *= d.get<std::size_t>();
      std::vector<double> data(n);
      for (auto& v : data) v = io::read_f64(in);
      f.tensors.emplace(t.at("name").get<std::string>(), std::move(data));
    }
  } catch (const FormatError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad manifest: " + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
  return f;
}

/// Rebuilds the model stored in a checkpoint, for evaluation.
struct LoadedModel {
  Model model;
  Vocab vocab;
  json manifest;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  auto f = read_checkpoint_file(path);
  const auto config = f.manifest.at("model_config").get<ModelConfig>();
  Model model = Model::build(config, f.manifest.at("seed").get<std::uint64_t>());
  for (auto& p : model.all_params()) {
    auto it = f.tensors.find(p.name);
    if (it == f.tensors.end() || it->second.size() != p.value.numel()) {
      throw CheckpointError("checkpoint lacks a matching tensor for " + p.name);
    }
    auto dst = p.value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<real>(it->second[i]);
  }
  const auto tokens = f.manifest.at("vocab").get<std::vector<std::string>>();
  std::vector<std::string> words(tokens.begin() + token::first_word, tokens.end());
  return {std::move(model), Vocab::from_words(words), std::move(f.manifest)};
}

class Trainer {
 public:
  Trainer(Model model, Vocab vocab, std::vector<TrainSource> sources, TrainConfig config, std::uint64_t seed)
      : model_(std::move(model)),
        vocab_(std::move(vocab)),
        sources_(std::move(sources)),
        config_(std::move(config)),
        seed_(seed),
        loader_(make_loader()) {
    config_.validate();
    if (vocab_.size() > static_cast<std::size_t>(model_.config().vocab_size)) {
      throw ConfigError("vocab of " + std::to_string(vocab_.size()) + " tokens exceeds model vocab_size " +
                        std::to_string(model_.config().vocab_size));
    }
    prepare();
    for (const auto& p : model_.learnable()) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const Vocab& vocab() const { return vocab_; }
  const TrainConfig& config() const { return config_; }
  long step_count() const { return step_; }
  const std::vector<GuardEvent>& guard_events() const { return events_; }
  const std::map<std::string, double>& emas() const { return ema_; }
  const LoaderState& loader_state() const { return loader_.state(); }
  void set_loss_hook(LossHook hook) { hook_ = std::move(hook); }

  /// One accumulation cycle and, unless every sub-loss was skipped, one
  /// optimizer update. Epoch boundaries are crossed transparently.
  StepMetrics step() {
    Cycle cycle = loader_.next();
    if (cycle.epoch_end) cycle = loader_.next();
    if (cycle.epoch_end) throw std::logic_error("loader produced two consecutive epoch ends");

    StepMetrics sm;
    sm.step = step_;
    sm.lr = lr_at(step_, config_.schedule);
    zero_grads();

    bool any_backward = false;
    for (std::size_t b = 0; b < cycle.batches.size(); ++b) {
      const auto& ref = cycle.batches[b];
      const auto& src = sources_[ref.source];
      const DataType type = src.spec.data_type;
      BatchLosses losses = batch_losses(ref, b);

      BatchMetrics bm;
      bm.source = src.spec.name;
      bm.type = type;
      bm.lm_loss = losses.lm.item();
      if (losses.contrastive) bm.c_loss = losses.contrastive->item();
      sm.combined += src.spec.weight * (config_.lambda_lm * bm.lm_loss +
                                        (bm.c_loss ? config_.lambda_contrastive * *bm.c_loss : 0.0));

      std::optional<Tensor> total;
      auto guarded = [&](const Tensor& loss, LossKind kind, double lambda) {
        double value = loss.item();
        double multiplier = 1.0;
        if (hook_) {
          const double hooked = hook_(step_, type, kind, value);
          if (std::isfinite(hooked) && value != 0) multiplier = hooked / value;
          value = hooked;
        }
        const std::string key = std::string(to_string(type)) + "/" + to_string(kind);
        auto ema_it = ema_.find(key);
        std::optional<double> ema = ema_it == ema_.end() ? std::nullopt : std::optional<double>(ema_it->second);
        const GuardDecision d = guard(value, ema, config_.guard);
        update_ema(ema, d, value, config_.guard);
        if (ema) ema_[key] = *ema;
        if (d.action != GuardAction::accept) events_.push_back({step_, type, kind, d.action, value});
        if (static_cast<int>(d.action) > static_cast<int>(bm.event)) bm.event = d.action;
        if (d.action == GuardAction::skip || lambda == 0) return;
        Tensor term = scale(loss, static_cast<real>(lambda * multiplier * d.factor * src.spec.weight));
        total = total ? add(*total, term) : term;
      };
      guarded(losses.lm, LossKind::lm, config_.lambda_lm);
      if (losses.contrastive) guarded(*losses.contrastive, LossKind::contrastive, config_.lambda_contrastive);
      if (total && total->requires_grad()) {
        backward(*total);
        any_backward = true;
      }
      sm.batches.push_back(std::move(bm));
    }

    if (any_backward) sm.updated = apply_update(sm.lr, sm.grad_norm);
    zero_grads();
    ++step_;
    return sm;
  }

  /// NDJSON metric lines for one step, one per batch.
  static void write_metrics(const StepMetrics& sm, std::ostream& os) {
    for (const auto& b : sm.batches) {
      json j = {{"step", sm.step},
                {"type", to_string(b.type)},
                {"source", b.source},
                {"lm_loss", b.lm_loss},
                {"c_loss", b.c_loss ? json(*b.c_loss) : json(nullptr)},
                {"lr", sm.lr},
                {"guard_event", to_string(b.event)}};
      os << j.dump() << '\n';
    }
  }

  void save(const std::filesystem::path& path) const {
    json tensors = json::array();
    std::vector<std::span<const real>> buffers;
    for (const auto& p : model_.all_params()) {
      tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}});
      buffers.push_back(p.value.data());
    }
    const auto& learn = model_.learnable();
    for (std::size_t i = 0; i < learn.size(); ++i) {
      tensors.push_back({{"name", "adam.m/" + learn[i].name}, {"shape", learn[i].value.shape()}});
      buffers.push_back(m_[i]);
    }
    for (std::size_t i = 0; i < learn.size(); ++i) {
      tensors.push_back({{"name", "adam.v/" + learn[i].name}, {"shape", learn[i].value.shape()}});
      buffers.push_back(v_[i]);
    }
    json events = json::array();
    for (const auto& e : events_)
      events.push_back({{"step", e.step}, {"type", e.type}, {"kind", to_string(e.kind)}, {"action", e.action},
                        {"loss", e.loss}});
    write_checkpoint_file(path, json{{"format", 1},
                                     {"model_config", model_.config()},
                                     {"train_config", config_},
                                     {"sources", source_manifest()},
                                     {"seed", seed_},
                                     {"step", step_},
                                     {"adam_t", adam_t_},
                                     {"vocab", vocab_.tokens()},
                                     {"loader", loader_.state()},
                                     {"ema", ema_},
                                     {"guard_events", events},
                                     {"tensors", tensors}},
                          buffers);
  }

  /// Restores state saved by an identically configured trainer; refuses on
  /// any mismatch in configuration, data, vocabulary or tensor layout.
  void restore(const std::filesystem::path& path) {
    auto f = read_checkpoint_file(path);
    const json& m = f.manifest;
    auto require = [&](bool ok, const std::string& what) {
      if (!ok) throw CheckpointError("checkpoint " + path.string() + " does not match this run: " + what);
    };
    require(m.value("format", 0) == 1, "format version");
    require(m.at("model_config") == json(model_.config()), "model config");
    require(m.at("train_config") == json(config_), "train config");
    require(m.at("sources") == source_manifest(), "sources");
    require(m.at("seed").get<std::uint64_t>() == seed_, "seed");
    require(m.at("vocab") == json(vocab_.tokens()), "vocabulary");
    std::map<std::string, Shape> expected;
    for (const auto& p : model_.all_params()) expected[p.name] = p.value.shape();
    for (const auto& p : model_.learnable()) {
      expected["adam.m/" + p.name] = p.value.shape();
      expected["adam.v/" + p.name] = p.value.shape();
    }
    require(m.at("tensors").size() == expected.size(), "tensor count");
    for (const auto& t : m.at("tensors")) {
      auto it = expected.find(t.at("name").get<std::string>());
      require(it != expected.end(), "unknown tensor " + t.at("name").get<std::string>());
      require(t.at("shape").get<Shape>() == it->second, "shape of " + it->first);
    }
    for (auto& p : model_.all_params()) {
      const auto& src = f.tensors.at(p.name);
      auto dst = p.value.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<real>(src[i]);
    }
    const auto& learn = model_.learnable();
    for (std::size_t i = 0; i < learn.size(); ++i) {
      m_[i] = f.tensors.at("adam.m/" + learn[i].name);
      v_[i] = f.tensors.at("adam.v/" + learn[i].name);
    }
    step_ = m.at("step").get<long>();
    adam_t_ = m.at("adam_t").get<long>();
    loader_.set_state(m.at("loader").get<LoaderState>());
    ema_ = m.at("ema").get<std::map<std::string, double>>();
    events_.clear();
    for (const auto& e : m.at("guard_events")) {
      events_.push_back({e.at("step").get<long>(), e.at("type").get<DataType>(),
                         e.at("kind") == "lm" ? LossKind::lm : LossKind::contrastive, e.at("action").get<GuardAction>(),
                         e.at("loss").is_number() ? e.at("loss").get<double>() : std::nan("")});
    }
  }

 private:
  struct Prepared {
    Serialized serialized;
    std::optional<TextSpan> caption;  // paired sources: caption tokens after the media token
  };

  struct BatchLosses {
    Tensor lm;
    std::optional<Tensor> contrastive;
  };

  Loader make_loader() const {
    std::vector<std::size_t> sizes, batch;
    for (const auto& s : sources_) {
      sizes.push_back(s.docs.size());
      batch.push_back(s.spec.batch_size.value_or(config_.batch_size));
    }
    try {
      return Loader(sizes, batch, config_.loader_strategy, seed_);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

  json source_manifest() const {
    json out = json::array();
    for (const auto& s : sources_) {
      json j = s.spec;
      j.erase("shards");
      j["documents"] = s.docs.size();
      out.push_back(j);
    }
    return out;
  }

  void prepare() {
    prepared_.resize(sources_.size());
    for (std::size_t s = 0; s < sources_.size(); ++s) {
      const auto& src = sources_[s];
      for (const auto& doc : src.docs) {
        doc.validate();
        for (const auto& m : doc.media) m.validate(static_cast<std::size_t>(model_.config().max_frames));
        Prepared p{serialize(doc, vocab_), std::nullopt};
        if (p.serialized.media_slice.empty()) {
          throw ConfigError("source '" + src.spec.name + "': document '" + doc.id + "' has no media");
        }
        if (is_paired(src.spec.data_type)) {
          if (doc.media.size() != 1 || p.serialized.media_slice.size() != 1) {
            throw ConfigError("source '" + src.spec.name + "': paired document '" + doc.id +
                              "' must hold exactly one media item");
          }
          const std::size_t begin = p.serialized.media_slice[0].position + 1;
          std::size_t end = begin;
          while (end < p.serialized.tokens.size() && p.serialized.tokens[end] != token::eoc &&
                 p.serialized.tokens[end] != token::visual)
            ++end;
          if (end == begin) throw ConfigError("paired document '" + doc.id + "' has no caption after its media");
          p.caption = TextSpan{begin, end};
        }
        prepared_[s].push_back(std::move(p));
      }
    }
  }

  BatchLosses batch_losses(const BatchRef& ref, std::size_t slot) const {
    const auto& src = sources_[ref.source];
    const bool paired = is_paired(src.spec.data_type);
    std::vector<Tensor> logits;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
    std::vector<Tensor> hidden, visual_rows;
    std::vector<TextSpan> spans;
    for (std::size_t k = 0; k < ref.docs.size(); ++k) {
      const auto& doc = src.docs[ref.docs[k]];
      const auto& prep = prepared_[ref.source][ref.docs[k]];
      auto rng = derived_rng(seed_, {static_cast<std::uint64_t>(step_), slot, k});
      Window w = sample_window(prep.serialized.tokens, prep.serialized.media_slice, config_.window_length, rng);

      // Encode each referenced media item once; reuse the tokens for the contrastive head.
      std::vector<MediaItem> used;
      std::vector<MediaSlot> slots;
      std::map<std::size_t, std::size_t> remap;
      for (const auto& s : w.media_slice) {
        auto [it, inserted] = remap.emplace(s.media, used.size());
        if (inserted) used.push_back(doc.media[s.media]);
        slots.push_back({s.position, it->second});
      }
      Tensor h = model_.encode_text_unimodal(w.tokens);
      VisualTokens visual = model_.encode_media(used);
      Tensor out = model_.fuse_and_decode(h, visual, slots);
      if (w.tokens.size() > 1) {
        logits.push_back(slice(out, 0, 0, w.tokens.size() - 1));
        auto next = next_token_targets(w.tokens, w.loss_mask);
        targets.insert(targets.end(), next.targets.begin(), next.targets.end());
        mask.insert(mask.end(), next.mask.begin(), next.mask.end());
      }
      if (paired) {
        const TextSpan cap{prep.caption->begin - w.start, std::min(prep.caption->end - w.start, w.tokens.size())};
        hidden.push_back(h);
        spans.push_back(cap);
        visual_rows.push_back(visual.tokens);
      }
    }
    BatchLosses out;
    out.lm = lm_loss(logits.size() == 1 ? logits[0] : concat(logits, 0), targets, mask);
    if (paired) {
      VisualTokens vis{visual_rows.size() == 1 ? visual_rows[0] : concat(visual_rows, 0)};
      auto pair = model_.contrastive_embed(hidden, spans, vis);
      out.contrastive = contrastive_loss(pair, model_.logit_scale(), model_.config().contrastive_scope,
                                         model_.config().virtual_workers);
    }
    return out;
  }

  void zero_grads() {
    for (const auto& p : model_.learnable()) {
      Tensor t = p.value;
      t.zero_grad();
    }
  }

  // Global-norm clip and AdamW. Returns false when the gradient is not finite.
  bool apply_update(double lr, double& norm_out) {
    const auto& learn = model_.learnable();
    norm_out = clip_grad_norm(learn, config_.grad_clip);
    if (!std::isfinite(norm_out)) return false;
    ++adam_t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1 - std::pow(b1, static_cast<double>(adam_t_));
    const double c2 = 1 - std::pow(b2, static_cast<double>(adam_t_));
    for (std::size_t i = 0; i < learn.size(); ++i) {
      Tensor t = learn[i].value;
      auto data = t.mutable_data();
      const bool has = t.has_grad();
      auto grad = t.grad();
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double g = has ? static_cast<double>(grad[k]) : 0.0;
        m_[i][k] = b1 * m_[i][k] + (1 - b1) * g;
        v_[i][k] = b2 * v_[i][k] + (1 - b2) * g * g;
        const double update = (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + config_.adam_eps);
        double value = static_cast<double>(data[k]);
        if (learn[i].decay) value -= lr * config_.weight_decay * value;
        data[k] = static_cast<real>(value - lr * update);
      }
    }
    model_.clamp_logit_scale();
    return true;
  }

  Model model_;
  Vocab vocab_;
  std::vector<TrainSource> sources_;
  TrainConfig config_;
  std::uint64_t seed_;
  Loader loader_;
  std::vector<std::vector<Prepared>> prepared_;
  std::vector<std::vector<double>> m_, v_;
  long step_ = 0;
  long adam_t_ = 0;
  std::map<std::string, double> ema_;
  std::vector<GuardEvent> events_;
  LossHook hook_;
};

}  // namespace cosmo
