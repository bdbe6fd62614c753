// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-source batch scheduling. Each source is reshuffled at the start of
// each of its epochs from (seed, source, epoch), so the whole loader state
// is a handful of counters.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosmo/parallel.hpp"

namespace cosmo {

using json = nlohmann::json;

enum class DataType { image_text, video_text, interleaved_image, interleaved_video };

NLOHMANN_JSON_SERIALIZE_ENUM(DataType, {{DataType::image_text, "image_text"},
                                        {DataType::video_text, "video_text"},
                                        {DataType::interleaved_image, "interleaved_image"},
                                        {DataType::interleaved_video, "interleaved_video"}})

inline const char* to_string(DataType t) {
  switch (t) {
    case DataType::image_text:
      return "image_text";
    case DataType::video_text:
      return "video_text";
    case DataType::interleaved_image:
      return "interleaved_image";
    case DataType::interleaved_video:
      return "interleaved_video";
  }
  return "?";
}

/// Caption pairs carry contrastive supervision; interleaved documents do not.
inline bool is_paired(DataType t) { return t == DataType::image_text || t == DataType::video_text; }

enum class LoaderStrategy { round_robin, min, max };

NLOHMANN_JSON_SERIALIZE_ENUM(LoaderStrategy, {{LoaderStrategy::round_robin, "round_robin"},
                                              {LoaderStrategy::min, "min"},
                                              {LoaderStrategy::max, "max"}})

struct SourceCursor {
  long epoch = 0;
  std::size_t cursor = 0;  // next batch within the epoch
};

struct LoaderState {
  long epoch = 0;          // completed loader epochs
  std::size_t cycle = 0;   // cycles taken in the current epoch
  std::size_t rr_next = 0; // round_robin rotation pointer
  std::vector<SourceCursor> sources;
};

inline void to_json(json& j, const LoaderState& s) {
  json src = json::array();
  for (const auto& c : s.sources) src.push_back({{"epoch", c.epoch}, {"cursor", c.cursor}});
  j = {{"epoch", s.epoch}, {"cycle", s.cycle}, {"rr_next", s.rr_next}, {"sources", src}};
}

inline void from_json(const json& j, LoaderState& s) {
  s.epoch = j.at("epoch").get<long>();
  s.cycle = j.at("cycle").get<std::size_t>();
  s.rr_next = j.at("rr_next").get<std::size_t>();
  s.sources.clear();
  for (const auto& c : j.at("sources")) s.sources.push_back({c.at("epoch").get<long>(), c.at("cursor").get<std::size_t>()});
}

struct BatchRef {
  std::size_t source = 0;
  std::vector<std::size_t> docs;  // indices into the source
};

struct Cycle {
  bool epoch_end = false;
  std::vector<BatchRef> batches;
};

class Loader {
 public:
  /// Incomplete trailing batches are dropped; a source too small for one
  /// batch is a configuration error.
  Loader(std::vector<std::size_t> source_sizes, std::vector<std::size_t> batch_sizes, LoaderStrategy strategy,
         std::uint64_t seed)
      : sizes_(std::move(source_sizes)), batch_(std::move(batch_sizes)), strategy_(strategy), seed_(seed) {
    if (sizes_.empty()) throw std::invalid_argument("loader: no sources");
    if (sizes_.size() != batch_.size()) throw std::invalid_argument("loader: one batch size per source");
    for (std::size_t s = 0; s < sizes_.size(); ++s) {
      if (batch_[s] == 0) throw std::invalid_argument("loader: batch size must be positive");
      if (sizes_[s] < batch_[s]) {
        throw std::invalid_argument("loader: source " + std::to_string(s) + " has " + std::to_string(sizes_[s]) +
                                    " documents, fewer than one batch of " + std::to_string(batch_[s]));
      }
    }
    state_.sources.assign(sizes_.size(), {});
  }

  std::size_t batches_per_epoch(std::size_t s) const { return sizes_[s] / batch_[s]; }
  std::size_t source_count() const { return sizes_.size(); }
  const LoaderState& state() const { return state_; }

  void set_state(const LoaderState& s) {
    if (s.sources.size() != sizes_.size()) throw std::invalid_argument("loader: state covers a different source count");
    state_ = s;
  }

  Cycle next() {
    Cycle c;
    const std::size_t n = sizes_.size();
    auto exhausted = [&](std::size_t s) { return state_.sources[s].cursor >= batches_per_epoch(s); };
    switch (strategy_) {
      case LoaderStrategy::min: {
        for (std::size_t s = 0; s < n; ++s)
          if (exhausted(s)) return end_epoch();
        for (std::size_t s = 0; s < n; ++s) c.batches.push_back(take(s));
        break;
      }
      case LoaderStrategy::max: {
        std::size_t longest = 0;
        for (std::size_t s = 0; s < n; ++s) longest = std::max(longest, batches_per_epoch(s));
        if (state_.cycle >= longest) return end_epoch();
        for (std::size_t s = 0; s < n; ++s) {
          if (exhausted(s)) restart(s);
          c.batches.push_back(take(s));
        }
        break;
      }
      case LoaderStrategy::round_robin: {
        std::size_t s = state_.rr_next;
        std::size_t tried = 0;
        while (tried < n && exhausted(s)) s = (s + 1) % n, ++tried;
        if (tried == n) return end_epoch();
        c.batches.push_back(take(s));
        state_.rr_next = (s + 1) % n;
        break;
      }
    }
    ++state_.cycle;
    return c;
  }

 private:
  std::vector<std::size_t> order(std::size_t s, long epoch) const {
    std::vector<std::size_t> idx(sizes_[s]);
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = derived_rng(seed_, {0x10ade5, s, static_cast<std::uint64_t>(epoch)});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
  }

  BatchRef take(std::size_t s) {
    auto& cur = state_.sources[s];
    const auto idx = order(s, cur.epoch);
    BatchRef b{s, {}};
    const std::size_t begin = cur.cursor * batch_[s];
    b.docs.assign(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                  idx.begin() + static_cast<std::ptrdiff_t>(begin + batch_[s]));
    ++cur.cursor;
    return b;
  }

  void restart(std::size_t s) {
    ++state_.sources[s].epoch;
    state_.sources[s].cursor = 0;
  }

  Cycle end_epoch() {
    for (std::size_t s = 0; s < sizes_.size(); ++s) restart(s);
    ++state_.epoch;
    state_.cycle = 0;
    state_.rr_next = 0;
    return Cycle{true, {}};
  }

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> batch_;
  LoaderStrategy strategy_;
  std::uint64_t seed_;
  LoaderState state_;
};

}  // namespace cosmo
