// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Compositional toy world for end-to-end runs. A class is a (color, object)
// pairing captioned "a <color> <object>". Media patches carry noisy copies
// of an object prototype (even patches) and a color prototype (odd
// patches); videos repeat one noisy grid over several identical frames.
// Some pairings can be held out of training to test recombination.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cosmo/document.hpp"
#include "cosmo/loader.hpp"
#include "cosmo/parallel.hpp"
#include "cosmo/shard.hpp"

namespace cosmo {

inline const std::vector<std::string>& synthetic_color_words() {
  static const std::vector<std::string> words = {"red", "green", "blue", "yellow", "purple", "orange", "black", "white"};
  return words;
}

inline const std::vector<std::string>& synthetic_object_words() {
  static const std::vector<std::string> words = {"cat", "dog", "car", "tree", "boat", "bird", "house", "fish"};
  return words;
}

struct SyntheticConfig {
  std::size_t n_colors = 4;
  std::size_t n_objects = 4;
  std::size_t d_vision = 16;
  std::size_t n_patches = 2;
  std::size_t video_frames = 3;
  double noise = 0.3;                                // per-entry feature noise std
  std::array<std::size_t, 4> docs_per_type = {16, 16, 16, 16};  // in DataType order
  std::size_t min_pairs = 2;                         // media per interleaved document
  std::size_t max_pairs = 5;
  bool hold_out_diagonal = false;                    // keep (i, i) pairings out of the corpus
  std::uint64_t seed = 0;

  void validate() const {
    if (n_colors < 1 || n_colors > synthetic_color_words().size()) throw std::invalid_argument("synthetic: n_colors out of range");
    if (n_objects < 1 || n_objects > synthetic_object_words().size()) throw std::invalid_argument("synthetic: n_objects out of range");
    if (d_vision < 2 || n_patches < 2) throw std::invalid_argument("synthetic: need d_vision >= 2 and n_patches >= 2");
    if (video_frames < 1) throw std::invalid_argument("synthetic: video_frames >= 1");
    if (noise < 0) throw std::invalid_argument("synthetic: noise must be non-negative");
    if (min_pairs < 1 || max_pairs < min_pairs) throw std::invalid_argument("synthetic: 1 <= min_pairs <= max_pairs");
    if (hold_out_diagonal && n_colors * n_objects <= std::min(n_colors, n_objects)) {
      throw std::invalid_argument("synthetic: holding out the diagonal leaves no training pairings");
    }
  }
};

inline void to_json(json& j, const SyntheticConfig& c) {
  j = {{"n_colors", c.n_colors},   {"n_objects", c.n_objects},         {"d_vision", c.d_vision},
       {"n_patches", c.n_patches}, {"video_frames", c.video_frames},   {"noise", c.noise},
       {"docs_per_type", c.docs_per_type}, {"min_pairs", c.min_pairs}, {"max_pairs", c.max_pairs},
       {"hold_out_diagonal", c.hold_out_diagonal}, {"seed", c.seed}};
}

inline void from_json(const json& j, SyntheticConfig& c) {
  c = SyntheticConfig{};
  c.n_colors = j.value("n_colors", c.n_colors);
  c.n_objects = j.value("n_objects", c.n_objects);
  c.d_vision = j.value("d_vision", c.d_vision);
  c.n_patches = j.value("n_patches", c.n_patches);
  c.video_frames = j.value("video_frames", c.video_frames);
  c.noise = j.value("noise", c.noise);
  c.docs_per_type = j.value("docs_per_type", c.docs_per_type);
  c.min_pairs = j.value("min_pairs", c.min_pairs);
  c.max_pairs = j.value("max_pairs", c.max_pairs);
  c.hold_out_diagonal = j.value("hold_out_diagonal", c.hold_out_diagonal);
  c.seed = j.value("seed", c.seed);
}

struct SyntheticClass {
  std::size_t color = 0;
  std::size_t object = 0;
  bool operator==(const SyntheticClass&) const = default;
};

class SyntheticWorld {
 public:
  explicit SyntheticWorld(SyntheticConfig config) : config_(std::move(config)) {
    config_.validate();
    auto rng = derived_rng(config_.seed, {0x3071d});
    // Prototypes are unit vectors with pairwise |cosine| < 0.5 inside each family.
    color_proto_ = draw_prototypes(config_.n_colors, rng);
    object_proto_ = draw_prototypes(config_.n_objects, rng);
  }

  const SyntheticConfig& config() const { return config_; }

  std::string caption(SyntheticClass c) const {
    return "a " + synthetic_color_words()[c.color] + " " + synthetic_object_words()[c.object];
  }

  bool held_out(SyntheticClass c) const { return config_.hold_out_diagonal && c.color == c.object; }

  std::vector<SyntheticClass> classes(bool seen) const {
    std::vector<SyntheticClass> out;
    for (std::size_t c = 0; c < config_.n_colors; ++c)
      for (std::size_t o = 0; o < config_.n_objects; ++o)
        if (held_out({c, o}) != seen) out.push_back({c, o});
    return out;
  }

  template <class Rng>
  MediaItem media(SyntheticClass c, MediaKind kind, Rng& rng) const {
    MediaItem m;
    m.kind = kind;
    m.frames = kind == MediaKind::video ? config_.video_frames : 1;
    m.patches = config_.n_patches;
    m.dim = config_.d_vision;
    m.source_id = caption(c);
    m.width = 224;
    m.height = 224;
    std::normal_distribution<double> noise(0.0, config_.noise);
    for (std::size_t p = 0; p < m.patches; ++p) {
      const auto& proto = p % 2 == 0 ? object_proto_[c.object] : color_proto_[c.color];
      for (std::size_t j = 0; j < m.dim; ++j) m.features.push_back(static_cast<real>(proto[j] + noise(rng)));
    }
    const std::vector<real> frame = m.features;
    for (std::size_t f = 1; f < m.frames; ++f) m.features.insert(m.features.end(), frame.begin(), frame.end());
    return m;
  }

  /// One document of the given data type, all media drawn from class `c`.
  template <class Rng>
  Document document(DataType type, SyntheticClass c, const std::string& id, Rng& rng) const {
    const MediaKind kind =
        type == DataType::video_text || type == DataType::interleaved_video ? MediaKind::video : MediaKind::image;
    Document d;
    d.id = id;
    std::size_t pairs = 1;
    if (!is_paired(type)) {
      pairs = std::uniform_int_distribution<std::size_t>(config_.min_pairs, config_.max_pairs)(rng);
    }
    for (std::size_t k = 0; k < pairs; ++k) {
      d.segments.emplace_back(MediaSegment{d.media.size()});
      d.media.push_back(media(c, kind, rng));
      d.segments.emplace_back(TextSegment{caption(c)});
    }
    return d;
  }

  /// Documents per data type. Classes cycle through the seen pairings so
  /// every type covers them evenly.
  std::array<std::vector<Document>, 4> corpus() const {
    std::array<std::vector<Document>, 4> out;
    const auto seen = classes(true);
    for (std::size_t t = 0; t < 4; ++t) {
      const auto type = static_cast<DataType>(t);
      auto rng = derived_rng(config_.seed, {0xc0de, t});
      for (std::size_t i = 0; i < config_.docs_per_type[t]; ++i) {
        out[t].push_back(document(type, seen[i % seen.size()], std::string(to_string(type)) + "-" + std::to_string(i), rng));
      }
    }
    return out;
  }

 private:
  template <class Rng>
  std::vector<std::vector<double>> draw_prototypes(std::size_t n, Rng& rng) const {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::vector<double>> out;
    while (out.size() < n) {
      std::vector<double> v(config_.d_vision);
      double norm = 0;
      for (auto& x : v) x = g(rng), norm += x * x;
      norm = std::sqrt(norm);
      for (auto& x : v) x = x / norm * std::sqrt(static_cast<double>(config_.d_vision));
      bool ok = true;
      for (const auto& u : out) {
        double dot = 0;
        for (std::size_t j = 0; j < v.size(); ++j) dot += u[j] * v[j];
        ok = ok && std::abs(dot) / static_cast<double>(config_.d_vision) < 0.5;
      }
      if (ok) out.push_back(std::move(v));
    }
    return out;
  }

  SyntheticConfig config_;
  std::vector<std::vector<double>> color_proto_;
  std::vector<std::vector<double>> object_proto_;
};

/// Writes one shard per data type under `dir` plus synthetic.json.
inline void write_synthetic_corpus(const SyntheticWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto corpus = world.corpus();
  for (std::size_t t = 0; t < 4; ++t) {
    ShardWriter w(dir / to_string(static_cast<DataType>(t)));
    for (const auto& d : corpus[t]) w.write(d);
  }
  io::write_json_file(dir / "synthetic.json", json(world.config()));
}

}  // namespace cosmo
