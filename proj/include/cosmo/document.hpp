// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Interleaved documents, their token serialization, and fixed-length
// window sampling around a randomly chosen anchor media item.
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "cosmo/media.hpp"
#include "cosmo/vocab.hpp"

namespace cosmo {

struct TextSegment {
  std::string text;
  bool operator==(const TextSegment&) const = default;
};

struct MediaSegment {
  std::size_t index = 0;
  bool operator==(const MediaSegment&) const = default;
};

using Segment = std::variant<TextSegment, MediaSegment>;

struct Document {
  std::string id;
  std::vector<Segment> segments;
  std::vector<MediaItem> media;

  void validate() const {
    if (segments.empty()) throw std::invalid_argument("document '" + id + "': no segments");
    for (const auto& seg : segments) {
      if (const auto* m = std::get_if<MediaSegment>(&seg); m && m->index >= media.size()) {
        throw std::invalid_argument("document '" + id + "': media segment " + std::to_string(m->index) +
                                    " refers past " + std::to_string(media.size()) + " media items");
      }
    }
  }

  std::size_t media_segment_count() const {
    return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(), [](const Segment& s) {
      return std::holds_alternative<MediaSegment>(s);
    }));
  }
};

/// A <Visual> token at `position` standing for document media `media`.
struct MediaSlot {
  std::size_t position = 0;
  std::size_t media = 0;
  bool operator==(const MediaSlot&) const = default;
};

struct Serialized {
  std::vector<int> tokens;
  std::vector<MediaSlot> media_slice;
};

/// <s>, then per segment either one <Visual> or the text's tokens and <EOC>.
inline Serialized serialize(const Document& doc, const Vocab& vocab) {
  Serialized out;
  out.tokens.push_back(token::bos);
  for (const auto& seg : doc.segments) {
    if (const auto* m = std::get_if<MediaSegment>(&seg)) {
      out.media_slice.push_back({out.tokens.size(), m->index});
      out.tokens.push_back(token::visual);
    } else {
      for (int id : vocab.tokenize(std::get<TextSegment>(seg).text)) out.tokens.push_back(id);
      out.tokens.push_back(token::eoc);
    }
  }
  return out;
}

inline constexpr std::size_t kDefaultWindowLength = 128;
inline constexpr std::size_t kMinWindowLength = 8;
inline constexpr std::size_t kMaxAnchorShift = 8;

struct Window {
  std::vector<int> tokens;
  std::vector<MediaSlot> media_slice;  // positions are window-relative
  // loss_mask[i] != 0 when tokens[i] is a prediction target.
  std::vector<std::uint8_t> loss_mask;
  std::optional<std::size_t> anchor_media;
  std::size_t start = 0;
};

/// Loss mask for a token run: no target at position 0, at <Visual> or
/// <pad>, or before the first <Visual> of a run that has media.
inline std::vector<std::uint8_t> build_loss_mask(const std::vector<int>& tokens,
                                                 const std::vector<MediaSlot>& media_slice) {
  std::vector<std::uint8_t> mask(tokens.size(), 1);
  const std::size_t first_media = media_slice.empty() ? 0 : media_slice.front().position;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i == 0 || i < first_media || tokens[i] == token::visual || tokens[i] == token::pad) mask[i] = 0;
  }
  return mask;
}

template <class Rng>
Window sample_window(const std::vector<int>& tokens, const std::vector<MediaSlot>& media_slice, std::size_t length,
                     Rng& rng) {
  if (length < kMinWindowLength) {
    throw std::invalid_argument("sample_window: length " + std::to_string(length) + " is below the minimum of " +
                                std::to_string(kMinWindowLength));
  }
  Window w;
  if (!media_slice.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, media_slice.size() - 1);
    const MediaSlot anchor = media_slice[pick(rng)];
    // Shift left by up to 8 tokens, never past the document start or far
    // enough to push the anchor out of a short window.
    std::uniform_int_distribution<std::size_t> shift(0, std::min({kMaxAnchorShift, anchor.position, length - 1}));
    const std::size_t shifted = anchor.position - shift(rng);
    // A document that already fits is taken whole.
    w.start = tokens.size() <= length ? 0 : shifted;
    w.anchor_media = anchor.media;
  }
  const std::size_t end = std::min(tokens.size(), w.start + length);
  w.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(w.start), tokens.begin() + static_cast<std::ptrdiff_t>(end));
  for (const auto& slot : media_slice) {
    if (slot.position >= w.start && slot.position < end) w.media_slice.push_back({slot.position - w.start, slot.media});
  }
  w.loss_mask = build_loss_mask(w.tokens, w.media_slice);
  return w;
}

}  // namespace cosmo
