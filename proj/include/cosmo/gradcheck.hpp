// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference check of the combined objective. The objective covers
// all four data types: two image-text pairs and two video-text pairs (LM
// plus contrastive), one interleaved image document and one interleaved
// video document (LM only, weight 2).
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cosmo/document.hpp"
#include "cosmo/model.hpp"
#include "cosmo/parallel.hpp"

namespace cosmo {

struct GradCheckCase {
  struct Doc {
    std::vector<int> tokens;
    std::vector<MediaSlot> slots;
    std::vector<MediaItem> media;
  };
  std::vector<Doc> image_pairs, video_pairs;
  Doc interleaved_image, interleaved_video;
};

/// Random inputs for `config`; word ids are drawn above the reserved tokens
/// so any vocab_size the model accepts works.
inline GradCheckCase make_grad_check_case(const ModelConfig& config, std::uint64_t seed) {
  auto rng = derived_rng(seed, {0x9c});
  std::uniform_int_distribution<int> word(token::unk + 1, config.vocab_size - 1);
  std::normal_distribution<double> normal(0, 1);
  auto media = [&](std::size_t frames) {
    MediaItem m;
    m.kind = frames > 1 ? MediaKind::video : MediaKind::image;
    m.frames = frames;
    m.patches = static_cast<std::size_t>(config.n_patches);
    m.dim = static_cast<std::size_t>(config.d_vision);
    m.features.resize(m.rows() * m.dim);
    for (auto& v : m.features) v = static_cast<real>(normal(rng));
    return m;
  };
  const std::size_t video_frames = std::min<std::size_t>(2, static_cast<std::size_t>(config.max_frames));
  auto pair = [&](std::size_t frames, std::size_t words) {
    GradCheckCase::Doc d;
    d.tokens = {token::bos, token::visual};
    for (std::size_t i = 0; i < words; ++i) d.tokens.push_back(word(rng));
    d.tokens.push_back(token::eoc);
    d.slots = {{1, 0}};
    d.media = {media(frames)};
    return d;
  };
  auto interleaved = [&](std::size_t frames) {
    GradCheckCase::Doc d;
    d.tokens = {token::bos, token::visual, word(rng), word(rng), token::eoc, word(rng), token::visual, word(rng),
                token::eoc};
    d.slots = {{1, 0}, {6, 1}};
    d.media = {media(frames), media(frames)};
    return d;
  };
  GradCheckCase c;
  c.image_pairs = {pair(1, 2), pair(1, 3)};
  c.video_pairs = {pair(video_frames, 3), pair(video_frames, 2)};
  c.interleaved_image = interleaved(1);
  c.interleaved_video = interleaved(video_frames);
  return c;
}

inline Tensor grad_check_objective(const Model& model, const GradCheckCase& c) {
  auto lm = [&](const GradCheckCase::Doc& d, Tensor* hidden) {
    auto out = model.forward(d.tokens, d.slots, d.media);
    if (hidden) *hidden = out.text_hidden;
    const auto mask = build_loss_mask(d.tokens, d.slots);
    const auto next = next_token_targets(d.tokens, mask);
    return lm_loss(slice(out.logits, 0, 0, d.tokens.size() - 1), next.targets, next.mask);
  };
  auto paired = [&](const std::vector<GradCheckCase::Doc>& docs) {
    std::vector<Tensor> losses, hidden(docs.size());
    std::vector<TextSpan> spans;
    std::vector<MediaItem> media;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      losses.push_back(lm(docs[i], &hidden[i]));
      spans.push_back({2, docs[i].tokens.size() - 1});
      media.push_back(docs[i].media[0]);
    }
    Tensor total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    const auto pair = model.contrastive_embed(hidden, spans, model.encode_media(media));
    return LossTerm{1.0, scale(total, real{1} / static_cast<real>(losses.size())),
                    contrastive_loss(pair, model.logit_scale())};
  };
  std::vector<LossTerm> terms = {paired(c.image_pairs), paired(c.video_pairs),
                                 {2.0, lm(c.interleaved_image, nullptr), std::nullopt},
                                 {2.0, lm(c.interleaved_video, nullptr), std::nullopt}};
  return combined_loss(terms, model.config().lambda_lm, model.config().lambda_contrastive);
}

struct GradCheckReport {
  std::vector<std::pair<std::string, double>> groups;  // learnable parameter name, max relative error
  double max_error = 0;
};

/// Builds a model from `config`, jitters every learnable entry so that
/// zero-initialized groups (query weights, gates) sit at a generic point
/// where every group receives gradient, and checks each group.
inline GradCheckReport check_model_gradients(const ModelConfig& config, std::uint64_t seed, double eps = 1e-6) {
  Model model = Model::build(config, seed);
  model.set_gates(real{0.5});
  auto rng = derived_rng(seed, {0x9d});
  std::normal_distribution<double> jitter(0, 0.1);
  for (const auto& p : model.learnable()) {
    Tensor t = p.value;
    for (auto& v : t.mutable_data()) v += static_cast<real>(jitter(rng));
  }
  const GradCheckCase c = make_grad_check_case(config, seed);
  GradCheckReport report;
  for (const auto& p : model.learnable()) {
    const double err = grad_check([&] { return grad_check_objective(model, c); }, {p.value}, eps);
    report.groups.emplace_back(p.name, err);
    report.max_error = std::max(report.max_error, err);
  }
  return report;
}

}  // namespace cosmo
