// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Small fixtures shared by the training-level tests.
#pragma once

#include <array>
#include <vector>

#include "cosmo/synthetic.hpp"
#include "cosmo/trainer.hpp"

namespace cosmo::testing {

inline ModelConfig tiny_model_config(const SyntheticConfig& world) {
  ModelConfig c;
  c.vocab_size = 300;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers_total = 4;
  c.split_index = 2;
  c.cross_interval = 2;
  c.compress_ratio = 2;
  c.n_latents = 2;
  c.d_vision = static_cast<int>(world.d_vision);
  c.n_patches = static_cast<int>(world.n_patches);
  c.d_embed_contrastive = 8;
  c.max_seq = 64;
  return c;
}

inline SyntheticConfig tiny_world(std::size_t docs_per_type = 8) {
  SyntheticConfig w;
  w.d_vision = 8;
  w.docs_per_type = {docs_per_type, docs_per_type, docs_per_type, docs_per_type};
  w.max_pairs = 3;
  w.seed = 5;
  return w;
}

inline std::vector<TrainSource> synthetic_sources(const SyntheticWorld& world, double interleaved_weight = 2.0) {
  auto corpus = world.corpus();
  std::vector<TrainSource> sources;
  for (std::size_t t = 0; t < 4; ++t) {
    const auto type = static_cast<DataType>(t);
    SourceSpec spec;
    spec.name = to_string(type);
    spec.data_type = type;
    spec.weight = is_paired(type) ? 1.0 : interleaved_weight;
    sources.push_back({spec, corpus[t]});
  }
  return sources;
}

inline Trainer tiny_trainer(std::uint64_t seed = 1, std::size_t docs_per_type = 8, long max_steps = 100) {
  SyntheticWorld world(tiny_world(docs_per_type));
  auto sources = synthetic_sources(world);
  TrainConfig tc;
  tc.schedule.lr_max = 1e-2;
  tc.schedule.max_steps = max_steps;
  tc.schedule.warmup_steps = 5;
  tc.batch_size = 4;
  tc.window_length = 32;
  Vocab vocab = build_source_vocab(sources, 300);
  Model model = Model::build(tiny_model_config(world.config()), seed);
  return Trainer(std::move(model), std::move(vocab), std::move(sources), tc, seed);
}

}  // namespace cosmo::testing
