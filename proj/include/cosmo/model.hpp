// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Split language model with gated bottlenecked cross-attention fusion.
//
// Layout of one forward pass:
//
//   media  -> vision encoder (frozen) -> resampler (learnable) -> n_latents tokens
//   tokens -> embeddings -> blocks [0, split)             (frozen, unimodal half)
//          -> { fusion layer if (b - split) % cross_interval == 0; block b }
//             for b in [split, n_layers)                   (blocks frozen)
//          -> final norm -> tied output projection -> logits
//
// A fusion layer down-projects d_model to d_model / compress_ratio, lets
// each text position attend to the visual tokens of every media item whose
// <Visual> token sits at or before it, projects back up and adds the result
// scaled by tanh(gate). Gates start at zero, so an untrained model computes
// exactly the frozen base LM.
//
// The contrastive head pools the unimodal-half output of a caption with one
// learnable query and the visual tokens of its media with another, projects
// both to d_embed_contrastive and L2-normalizes them.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cosmo/document.hpp"
#include "cosmo/media.hpp"
#include "cosmo/tensor.hpp"

namespace cosmo {

using json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ContrastiveScope { per_worker, aggregated };

NLOHMANN_JSON_SERIALIZE_ENUM(ContrastiveScope, {{ContrastiveScope::per_worker, "per_worker"},
                                                {ContrastiveScope::aggregated, "aggregated"}})

struct ModelConfig {
  int vocab_size = 300;
  int d_model = 32;
  int n_heads = 2;
  int n_layers_total = 4;
  int split_index = 2;          // blocks [0, split_index) form the unimodal text half
  int cross_interval = 2;       // a fusion layer before every cross_interval-th decoder block
  int compress_ratio = 2;       // fusion bottleneck divisor
  int n_latents = 4;
  int d_vision = 16;
  int n_patches = 2;
  int d_embed_contrastive = 16;
  int max_seq = 256;
  int max_frames = 3;
  double temperature = 0.07;    // initial contrastive temperature
  double lambda_lm = 1.0;
  double lambda_contrastive = 1.0;
  ContrastiveScope contrastive_scope = ContrastiveScope::per_worker;
  int virtual_workers = 2;      // shards simulated under per_worker scope
  double embedding_std = 1.0;   // frozen token/position embedding scale

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("model config: " + what);
    };
    require(vocab_size > token::unk, "vocab_size must exceed the reserved tokens");
    require(d_model > 0 && n_heads > 0, "d_model and n_heads must be positive");
    require(n_layers_total >= 2, "n_layers_total must be at least 2");
    require(split_index > 0 && split_index < n_layers_total, "0 < split_index < n_layers_total");
    require(cross_interval >= 1, "cross_interval >= 1");
    require(compress_ratio >= 1, "compress_ratio >= 1");
    require(d_model % n_heads == 0, "d_model divisible by n_heads");
    require(d_model % compress_ratio == 0, "d_model divisible by compress_ratio");
    require(n_latents >= 1 && d_vision >= 1 && n_patches >= 1, "n_latents, d_vision, n_patches >= 1");
    require(d_embed_contrastive >= 1, "d_embed_contrastive >= 1");
    require(max_seq >= 8 && max_frames >= 1, "max_seq >= 8 and max_frames >= 1");
    require(temperature > 0, "temperature > 0");
    require(virtual_workers >= 1, "virtual_workers >= 1");
  }

  int bottleneck() const { return d_model / compress_ratio; }

  /// Decoder blocks preceded by a fusion layer.
  std::vector<int> fusion_blocks() const {
    std::vector<int> out;
    for (int b = split_index; b < n_layers_total; b += cross_interval) out.push_back(b);
    return out;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, vocab_size, d_model, n_heads, n_layers_total,
                                                split_index, cross_interval, compress_ratio, n_latents, d_vision,
                                                n_patches, d_embed_contrastive, max_seq, max_frames, temperature,
                                                lambda_lm, lambda_contrastive, contrastive_scope, virtual_workers,
                                                embedding_std)

/// Fixed-size visual token set, [n_media, n_latents, d_model].
struct VisualTokens {
  Tensor tokens;

  std::size_t count() const { return tokens.defined() ? tokens.dim(0) : 0; }
  /// Tokens of media `i` as [n_latents, d_model].
  Tensor item(std::size_t i) const {
    return reshape(slice(tokens, 0, i, i + 1), {tokens.dim(1), tokens.dim(2)});
  }
};

struct ContrastivePair {
  Tensor text;   // [batch, d_embed]
  Tensor image;  // [batch, d_embed]
};

struct NamedParam {
  std::string name;
  Tensor value;
  bool decay = false;  // decoupled weight decay applies
};

struct ParamCounts {
  std::size_t learnable = 0;
  std::size_t total = 0;
};

/// A caption's token range inside a sequence, [begin, end).
struct TextSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    std::mt19937_64 rng(seed);
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto dv = static_cast<std::size_t>(config.d_vision);
    const auto b = static_cast<std::size_t>(config.bottleneck());
    const auto e = static_cast<std::size_t>(config.d_embed_contrastive);
    const auto nl = static_cast<std::size_t>(config.n_latents);
    auto mat = [&](std::size_t rows, std::size_t cols, bool learnable) {
      return Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)), learnable);
    };
    auto ones = [&](std::size_t n, bool learnable) { return Tensor::full({n}, 1, learnable); };
    auto zeros = [&](std::size_t n, bool learnable) { return Tensor::zeros({n}, learnable); };

    // Frozen language model.
    m.tok_emb_ = m.add_frozen("lm.tok_emb",
                              Tensor::randn({static_cast<std::size_t>(config.vocab_size), d}, rng, config.embedding_std));
    m.pos_emb_ = m.add_frozen("lm.pos_emb",
                              Tensor::randn({static_cast<std::size_t>(config.max_seq), d}, rng, config.embedding_std));
    for (int i = 0; i < config.n_layers_total; ++i) {
      const std::string p = "lm.block" + std::to_string(i) + ".";
      Block blk;
      blk.ln1_g = m.add_frozen(p + "ln1.g", ones(d, false));
      blk.ln1_b = m.add_frozen(p + "ln1.b", zeros(d, false));
      blk.wq = m.add_frozen(p + "attn.wq", mat(d, d, false));
      blk.wk = m.add_frozen(p + "attn.wk", mat(d, d, false));
      blk.wv = m.add_frozen(p + "attn.wv", mat(d, d, false));
      blk.wo = m.add_frozen(p + "attn.wo", mat(d, d, false));
      blk.ln2_g = m.add_frozen(p + "ln2.g", ones(d, false));
      blk.ln2_b = m.add_frozen(p + "ln2.b", zeros(d, false));
      blk.w1 = m.add_frozen(p + "mlp.w1", mat(d, 4 * d, false));
      blk.b1 = m.add_frozen(p + "mlp.b1", zeros(4 * d, false));
      blk.w2 = m.add_frozen(p + "mlp.w2", mat(4 * d, d, false));
      blk.b2 = m.add_frozen(p + "mlp.b2", zeros(d, false));
      m.blocks_.push_back(blk);
    }
    m.lnf_g_ = m.add_frozen("lm.ln_f.g", ones(d, false));
    m.lnf_b_ = m.add_frozen("lm.ln_f.b", zeros(d, false));

    // Frozen vision encoder: per-row two-layer MLP.
    m.vision_.w1 = m.add_frozen("vision.w1", mat(dv, dv, false));
    m.vision_.b1 = m.add_frozen("vision.b1", Tensor::randn({dv}, rng, 0.1));
    m.vision_.w2 = m.add_frozen("vision.w2", mat(dv, dv, false));
    m.vision_.b2 = m.add_frozen("vision.b2", Tensor::randn({dv}, rng, 0.1));

    // Resampler. A zero query projection starts it at uniform attention.
    m.resampler_.proj = m.add_learnable("resampler.proj", mat(dv, d, true), true);
    m.resampler_.latents = m.add_learnable("resampler.latents", Tensor::randn({nl, d}, rng, 1.0, true), true);
    m.resampler_.wq = m.add_learnable("resampler.wq", Tensor::zeros({d, d}, true), true);
    m.resampler_.wk = m.add_learnable("resampler.wk", mat(d, d, true), true);
    m.resampler_.wv = m.add_learnable("resampler.wv", mat(d, d, true), true);
    m.resampler_.wo = m.add_learnable("resampler.wo", mat(d, d, true), true);
    m.resampler_.ln_g = m.add_learnable("resampler.ln.g", ones(d, true), false);
    m.resampler_.ln_b = m.add_learnable("resampler.ln.b", zeros(d, true), false);

    for (int blk : config.fusion_blocks()) {
      const std::string p = "fusion" + std::to_string(blk) + ".";
      Fusion f;
      f.before_block = blk;
      f.ln_g = m.add_learnable(p + "ln.g", ones(d, true), false);
      f.ln_b = m.add_learnable(p + "ln.b", zeros(d, true), false);
      f.wq = m.add_learnable(p + "wq", mat(d, b, true), true);
      f.wk = m.add_learnable(p + "wk", mat(d, b, true), true);
      f.wv = m.add_learnable(p + "wv", mat(d, b, true), true);
      f.wo = m.add_learnable(p + "wo", mat(b, d, true), true);
      f.gate = m.add_learnable(p + "gate", Tensor::zeros({1}, true), false);
      m.fusions_.push_back(f);
    }

    m.heads_.text_query = m.add_learnable("contrastive.text_query", Tensor::randn({d, 1}, rng, 1.0, true), false);
    m.heads_.visual_query = m.add_learnable("contrastive.visual_query", Tensor::randn({d, 1}, rng, 1.0, true), false);
    m.heads_.text_proj = m.add_learnable("contrastive.text_proj", mat(d, e, true), true);
    m.heads_.visual_proj = m.add_learnable("contrastive.visual_proj", mat(d, e, true), true);
    m.heads_.logit_scale =
        m.add_learnable("contrastive.logit_scale", Tensor::from({1}, {std::log(1.0 / config.temperature)}, true), false);
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParam>& frozen() const { return frozen_; }
  const std::vector<NamedParam>& learnable() const { return learnable_; }
  std::size_t fusion_layer_count() const { return fusions_.size(); }

  Tensor param(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("model has no parameter '" + name + "'");
    return it->second;
  }

  /// Every parameter, frozen first, in construction order.
  std::vector<NamedParam> all_params() const {
    std::vector<NamedParam> out = frozen_;
    out.insert(out.end(), learnable_.begin(), learnable_.end());
    return out;
  }

  Tensor logit_scale() const { return heads_.logit_scale; }

  /// Keeps the temperature exp(-logit_scale) inside [0.01, 1].
  void clamp_logit_scale() {
    auto v = heads_.logit_scale.mutable_data();
    v[0] = std::clamp(v[0], real{0}, static_cast<real>(std::log(100.0)));
  }

  void set_gates(real value) {
    for (auto& f : fusions_) f.gate.mutable_data()[0] = value;
  }

  // ---- vision ------------------------------------------------------------

  /// Frozen per-row encoding of a media grid, [frames * patches, d_vision].
  Tensor vision_encode(const MediaItem& media) const {
    if (media.dim != static_cast<std::size_t>(config_.d_vision)) {
      throw std::invalid_argument("vision_encode: media '" + media.source_id + "' has feature dim " +
                                  std::to_string(media.dim) + ", model expects " + std::to_string(config_.d_vision));
    }
    media.validate(static_cast<std::size_t>(config_.max_frames));
    Tensor x = media.as_rows();
    Tensor h = gelu(add(matmul(x, vision_.w1), vision_.b1));
    return add(matmul(h, vision_.w2), vision_.b2);
  }

  /// Latent queries cross-attend to all feature rows; returns [1, n_latents, d_model].
  VisualTokens resample(const Tensor& features) const {
    const auto& r = resampler_;
    Tensor f = matmul(features, r.proj);
    Tensor q = matmul(r.latents, r.wq);
    Tensor k = matmul(f, r.wk);
    Tensor v = matmul(f, r.wv);
    const real inv = real{1} / std::sqrt(static_cast<real>(config_.d_model));
    Tensor attn = softmax(scale(matmul(q, transpose(k)), inv), 1);
    Tensor out = add(r.latents, matmul(matmul(attn, v), r.wo));
    out = add(mul(layer_norm(out, 1), r.ln_g), r.ln_b);
    return VisualTokens{reshape(out, {1, out.dim(0), out.dim(1)})};
  }

  VisualTokens encode_media(std::span<const MediaItem> media) const {
    if (media.empty()) return {};
    std::vector<Tensor> parts;
    parts.reserve(media.size());
    for (const auto& m : media) parts.push_back(resample(vision_encode(m)).tokens);
    return VisualTokens{parts.size() == 1 ? parts.front() : concat(parts, 0)};
  }

  // ---- text --------------------------------------------------------------

  /// Output of the unimodal half (after block split_index - 1), [seq, d_model].
  Tensor encode_text_unimodal(std::span<const int> tokens) const {
    if (tokens.empty()) throw std::invalid_argument("encode_text_unimodal: empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(config_.max_seq)) {
      throw std::invalid_argument("encode_text_unimodal: sequence of " + std::to_string(tokens.size()) +
                                  " exceeds max_seq " + std::to_string(config_.max_seq));
    }
    for (int id : tokens) {
      if (id < 0 || id >= config_.vocab_size) {
        throw std::invalid_argument("encode_text_unimodal: token id " + std::to_string(id) + " outside vocab of " +
                                    std::to_string(config_.vocab_size));
      }
    }
    std::vector<int> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    Tensor x = add(embedding_lookup(tok_emb_, tokens), embedding_lookup(pos_emb_, positions));
    const auto mask = causal_mask(tokens.size());
    for (int b = 0; b < config_.split_index; ++b) x = run_block(blocks_[static_cast<std::size_t>(b)], x, mask);
    return x;
  }

  /// Second half with fusion layers; media_positions pairs a token index with
  /// an index into `visual`.
  Tensor fuse_and_decode(const Tensor& text_hidden, const VisualTokens& visual,
                         std::span<const MediaSlot> media_positions) const {
    const std::size_t seq = text_hidden.dim(0);
    for (const auto& slot : media_positions) {
      if (slot.position >= seq) {
        throw std::invalid_argument("fuse_and_decode: media position " + std::to_string(slot.position) +
                                    " outside sequence of " + std::to_string(seq));
      }
      if (slot.media >= visual.count()) {
        throw std::invalid_argument("fuse_and_decode: media index " + std::to_string(slot.media) +
                                    " has no visual tokens (" + std::to_string(visual.count()) + " provided)");
      }
    }
    Tensor keys;
    std::vector<std::uint8_t> hidden_mask;
    if (!media_positions.empty()) {
      const std::size_t nl = static_cast<std::size_t>(config_.n_latents);
      std::vector<Tensor> parts;
      for (const auto& slot : media_positions) parts.push_back(visual.item(slot.media));
      keys = parts.size() == 1 ? parts.front() : concat(parts, 0);
      hidden_mask.assign(seq * keys.dim(0), 0);
      for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t j = 0; j < media_positions.size(); ++j)
          if (media_positions[j].position > t)
            std::fill_n(hidden_mask.begin() + static_cast<std::ptrdiff_t>(t * keys.dim(0) + j * nl), nl, 1);
    }
    const auto mask = causal_mask(seq);
    Tensor x = text_hidden;
    std::size_t next_fusion = 0;
    for (int b = config_.split_index; b < config_.n_layers_total; ++b) {
      if (next_fusion < fusions_.size() && fusions_[next_fusion].before_block == b) {
        if (keys.defined()) x = run_fusion(fusions_[next_fusion], x, keys, hidden_mask);
        ++next_fusion;
      }
      x = run_block(blocks_[static_cast<std::size_t>(b)], x, mask);
    }
    Tensor h = add(mul(layer_norm(x, 1), lnf_g_), lnf_b_);
    return matmul(h, transpose(tok_emb_));
  }

  struct Output {
    Tensor logits;       // [seq, vocab]
    Tensor text_hidden;  // unimodal-half output, [seq, d_model]
  };

  /// Full pass over one token sequence. `media_slice` indexes into `media`.
  Output forward(std::span<const int> tokens, std::span<const MediaSlot> media_slice,
                 std::span<const MediaItem> media) const {
    Tensor hidden = encode_text_unimodal(tokens);
    // Encode only the media the sequence references, in slot order.
    std::vector<MediaItem> used;
    std::vector<MediaSlot> slots;
    std::map<std::size_t, std::size_t> remap;
    for (const auto& s : media_slice) {
      if (s.media >= media.size()) {
        throw std::invalid_argument("forward: media slot refers to item " + std::to_string(s.media) + " of " +
                                    std::to_string(media.size()));
      }
      auto [it, inserted] = remap.emplace(s.media, used.size());
      if (inserted) used.push_back(media[s.media]);
      slots.push_back({s.position, it->second});
    }
    VisualTokens visual = encode_media(used);
    return {fuse_and_decode(hidden, visual, slots), hidden};
  }

  /// Frozen base LM logits, no media.
  Tensor base_logits(std::span<const int> tokens) const {
    return fuse_and_decode(encode_text_unimodal(tokens), {}, {});
  }

  // ---- contrastive head ---------------------------------------------------

  Tensor pool_text(const Tensor& text_hidden, TextSpan span) const {
    if (span.end <= span.begin || span.end > text_hidden.dim(0)) {
      throw std::invalid_argument("contrastive_embed: empty or out-of-range text segment");
    }
    return project(attend_pool(slice(text_hidden, 0, span.begin, span.end), heads_.text_query), heads_.text_proj);
  }

  Tensor pool_visual(const Tensor& tokens) const {
    return project(attend_pool(tokens, heads_.visual_query), heads_.visual_proj);
  }

  /// One (text segment, media item) per row; rows come back L2-normalized.
  ContrastivePair contrastive_embed(std::span<const Tensor> text_hidden, std::span<const TextSpan> spans,
                                    const VisualTokens& visual) const {
    if (text_hidden.size() != spans.size() || spans.size() != visual.count() || spans.empty()) {
      throw std::invalid_argument("contrastive_embed: need one text segment and one media item per row");
    }
    std::vector<Tensor> text_rows, image_rows;
    for (std::size_t i = 0; i < spans.size(); ++i) {
      text_rows.push_back(pool_text(text_hidden[i], spans[i]));
      image_rows.push_back(pool_visual(visual.item(i)));
    }
    return {l2_normalize(text_rows.size() == 1 ? text_rows[0] : concat(text_rows, 0)),
            l2_normalize(image_rows.size() == 1 ? image_rows[0] : concat(image_rows, 0))};
  }

  /// Independent copy of every parameter.
  Model clone() const {
    Model m = *this;
    std::unordered_map<const detail::Node*, Tensor> fresh;
    for (const auto& p : all_params()) {
      fresh.emplace(p.value.id(), Tensor::from(p.value.shape(), {p.value.data().begin(), p.value.data().end()},
                                               p.value.requires_grad()));
    }
    m.rebind(fresh);
    return m;
  }

 private:
  struct Block {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Vision {
    Tensor w1, b1, w2, b2;
  };
  struct Resampler {
    Tensor proj, latents, wq, wk, wv, wo, ln_g, ln_b;
  };
  struct Fusion {
    int before_block = 0;
    Tensor ln_g, ln_b, wq, wk, wv, wo, gate;
  };
  struct Heads {
    Tensor text_query, visual_query, text_proj, visual_proj, logit_scale;
  };

  Tensor add_frozen(const std::string& name, Tensor t) {
    t.set_requires_grad(false);
    frozen_.push_back({name, t, false});
    by_name_.emplace(name, t);
    return t;
  }

  Tensor add_learnable(const std::string& name, Tensor t, bool decay) {
    t.set_requires_grad(true);
    learnable_.push_back({name, t, decay});
    by_name_.emplace(name, t);
    return t;
  }

  static std::vector<std::uint8_t> causal_mask(std::size_t n) {
    std::vector<std::uint8_t> mask(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) mask[i * n + j] = 1;
    return mask;
  }

  Tensor run_block(const Block& blk, const Tensor& x, const std::vector<std::uint8_t>& mask) const {
    const std::size_t d = static_cast<std::size_t>(config_.d_model);
    const std::size_t heads = static_cast<std::size_t>(config_.n_heads);
    const std::size_t dh = d / heads;
    const real inv = real{1} / std::sqrt(static_cast<real>(dh));
    const real neg_inf = -std::numeric_limits<real>::infinity();
    Tensor h = add(mul(layer_norm(x, 1), blk.ln1_g), blk.ln1_b);
    Tensor q = matmul(h, blk.wq), k = matmul(h, blk.wk), v = matmul(h, blk.wv);
    std::vector<Tensor> outs;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Tensor qh = heads == 1 ? q : slice(q, 1, hd * dh, (hd + 1) * dh);
      Tensor kh = heads == 1 ? k : slice(k, 1, hd * dh, (hd + 1) * dh);
      Tensor vh = heads == 1 ? v : slice(v, 1, hd * dh, (hd + 1) * dh);
      Tensor scores = masked_fill(scale(matmul(qh, transpose(kh)), inv), mask, neg_inf);
      outs.push_back(matmul(softmax(scores, 1), vh));
    }
    Tensor attn = heads == 1 ? outs.front() : concat(outs, 1);
    Tensor y = add(x, matmul(attn, blk.wo));
    Tensor h2 = add(mul(layer_norm(y, 1), blk.ln2_g), blk.ln2_b);
    Tensor mlp = add(matmul(gelu(add(matmul(h2, blk.w1), blk.b1)), blk.w2), blk.b2);
    return add(y, mlp);
  }

  Tensor run_fusion(const Fusion& f, const Tensor& x, const Tensor& keys,
                    const std::vector<std::uint8_t>& hidden) const {
    const real inv = real{1} / std::sqrt(static_cast<real>(config_.bottleneck()));
    Tensor h = add(mul(layer_norm(x, 1), f.ln_g), f.ln_b);
    Tensor q = matmul(h, f.wq);
    Tensor k = matmul(keys, f.wk);
    Tensor v = matmul(keys, f.wv);
    Tensor scores = masked_fill(scale(matmul(q, transpose(k)), inv), hidden, -std::numeric_limits<real>::infinity());
    Tensor update = matmul(matmul(softmax(scores, 1), v), f.wo);
    return add(x, mul(update, tanh(f.gate)));
  }

  Tensor attend_pool(const Tensor& rows, const Tensor& query) const {
    const real inv = real{1} / std::sqrt(static_cast<real>(config_.d_model));
    Tensor weights = softmax(transpose(scale(matmul(rows, query), inv)), 1);  // [1, n]
    return matmul(weights, rows);                                            // [1, d]
  }

  static Tensor project(const Tensor& pooled, const Tensor& proj) { return matmul(pooled, proj); }

  void rebind(const std::unordered_map<const detail::Node*, Tensor>& fresh) {
    auto swap_in = [&](Tensor& t) { t = fresh.at(t.id()); };
    for (auto& p : frozen_) swap_in(p.value);
    for (auto& p : learnable_) swap_in(p.value);
    for (auto& [name, t] : by_name_) swap_in(t);
    swap_in(tok_emb_);
    swap_in(pos_emb_);
    swap_in(lnf_g_);
    swap_in(lnf_b_);
    for (auto& b : blocks_)
      for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
        swap_in(*t);
    for (Tensor* t : {&vision_.w1, &vision_.b1, &vision_.w2, &vision_.b2}) swap_in(*t);
    for (Tensor* t : {&resampler_.proj, &resampler_.latents, &resampler_.wq, &resampler_.wk, &resampler_.wv,
                      &resampler_.wo, &resampler_.ln_g, &resampler_.ln_b})
      swap_in(*t);
    for (auto& f : fusions_)
      for (Tensor* t : {&f.ln_g, &f.ln_b, &f.wq, &f.wk, &f.wv, &f.wo, &f.gate}) swap_in(*t);
    for (Tensor* t : {&heads_.text_query, &heads_.visual_query, &heads_.text_proj, &heads_.visual_proj,
                      &heads_.logit_scale})
      swap_in(*t);
  }

  ModelConfig config_;
  std::vector<NamedParam> frozen_;
  std::vector<NamedParam> learnable_;
  std::map<std::string, Tensor> by_name_;
  Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_;
  std::vector<Block> blocks_;
  Vision vision_;
  Resampler resampler_;
  std::vector<Fusion> fusions_;
  Heads heads_;
};

inline ParamCounts count_params(const Model& model) {
  ParamCounts c;
  for (const auto& p : model.learnable()) c.learnable += p.value.numel();
  c.total = c.learnable;
  for (const auto& p : model.frozen()) c.total += p.value.numel();
  return c;
}

// ---- losses ----------------------------------------------------------------

/// Mean next-token NLL: logits row i predicts targets[i]; rows with a zero
/// mask entry are ignored.
inline Tensor lm_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> loss_mask) {
  if (targets.size() != logits.dim(0) || loss_mask.size() != targets.size()) {
    throw ShapeError("lm_loss: " + std::to_string(logits.dim(0)) + " logit rows, " + std::to_string(targets.size()) +
                     " targets, " + std::to_string(loss_mask.size()) + " mask entries");
  }
  std::vector<real> weights(loss_mask.begin(), loss_mask.end());
  if (std::all_of(weights.begin(), weights.end(), [](real w) { return w == real{0}; })) {
    throw std::invalid_argument("lm_loss: every position is masked");
  }
  return cross_entropy(logits, targets, weights);
}

/// Shifted targets for a token run: row i of the result predicts tokens[i+1].
struct NextTokenTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

inline NextTokenTargets next_token_targets(std::span<const int> tokens, std::span<const std::uint8_t> loss_mask) {
  NextTokenTargets t;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    t.targets.push_back(tokens[i]);
    t.mask.push_back(loss_mask[i]);
  }
  return t;
}

/// Symmetric InfoNCE over one batch: mean of image->text and text->image
/// cross-entropy over similarity * exp(logit_scale).
inline Tensor info_nce(const Tensor& text, const Tensor& image, const Tensor& logit_scale) {
  if (text.rank() != 2 || text.shape() != image.shape()) {
    throw ShapeError("contrastive_loss: text " + to_string(text.shape()) + " vs image " + to_string(image.shape()));
  }
  const std::size_t batch = text.dim(0);
  std::vector<int> diag(batch);
  std::iota(diag.begin(), diag.end(), 0);
  Tensor logits = mul(matmul(text, transpose(image)), exp(logit_scale));
  return scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), real(0.5));
}

/// Contrastive loss under the configured scope. per_worker splits the batch
/// into `workers` contiguous shards and averages their losses; aggregated
/// scores the whole batch together.
inline Tensor contrastive_loss(const ContrastivePair& pair, const Tensor& logit_scale,
                               ContrastiveScope scope = ContrastiveScope::aggregated, int workers = 1) {
  const std::size_t batch = pair.text.dim(0);
  if (scope == ContrastiveScope::aggregated || workers <= 1 || batch <= 1) {
    return info_nce(pair.text, pair.image, logit_scale);
  }
  const std::size_t k = std::min(batch, static_cast<std::size_t>(workers));
  std::vector<Tensor> losses;
  std::size_t begin = 0;
  for (std::size_t w = 0; w < k; ++w) {
    const std::size_t len = batch / k + (w < batch % k ? 1 : 0);
    losses.push_back(info_nce(slice(pair.text, 0, begin, begin + len), slice(pair.image, 0, begin, begin + len),
                              logit_scale));
    begin += len;
  }
  Tensor total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, real{1} / static_cast<real>(losses.size()));
}

inline Tensor contrastive_loss(const ContrastivePair& pair, double temperature) {
  return contrastive_loss(pair, Tensor::from({1}, {static_cast<real>(std::log(1.0 / temperature))}));
}

/// One data type's contribution to the combined objective.
struct LossTerm {
  double weight = 1.0;
  Tensor lm;
  std::optional<Tensor> contrastive;  // present only for paired data
};

/// sum_i w_i * (lambda_lm * L_lm,i + lambda_c * L_c,i)
inline Tensor combined_loss(std::span<const LossTerm> terms, double lambda_lm, double lambda_c) {
  if (terms.empty()) throw std::invalid_argument("combined_loss: no data types");
  std::optional<Tensor> total;
  for (const auto& term : terms) {
    Tensor t = scale(term.lm, static_cast<real>(lambda_lm));
    if (term.contrastive) t = add(t, scale(*term.contrastive, static_cast<real>(lambda_c)));
    t = scale(t, static_cast<real>(term.weight));
    total = total ? add(*total, t) : t;
  }
  return *total;
}

}  // namespace cosmo
