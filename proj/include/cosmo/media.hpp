// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "cosmo/tensor.hpp"

namespace cosmo {

enum class MediaKind { image, video };

inline const char* to_string(MediaKind kind) { return kind == MediaKind::image ? "image" : "video"; }

inline MediaKind media_kind_from_string(const std::string& s) {
  if (s == "image") return MediaKind::image;
  if (s == "video") return MediaKind::video;
  throw std::invalid_argument("unknown media kind '" + s + "'");
}

inline constexpr std::size_t kDefaultMaxFrames = 3;

/// An image (one frame) or a short clip, stored as a [frames, patches, dim]
/// grid of precomputed patch features.
struct MediaItem {
  MediaKind kind = MediaKind::image;
  std::size_t frames = 1;
  std::size_t patches = 1;
  std::size_t dim = 0;
  std::vector<real> features;
  std::string source_id;
  // Pixel size of the original asset when known; 0 means unknown.
  int width = 0;
  int height = 0;

  std::size_t rows() const { return frames * patches; }

  void validate(std::size_t max_frames = kDefaultMaxFrames) const {
    if (frames < 1) throw std::invalid_argument("media '" + source_id + "': needs at least one frame");
    if (kind == MediaKind::image && frames != 1)
      throw std::invalid_argument("media '" + source_id + "': an image has exactly one frame");
    if (frames > max_frames)
      throw std::invalid_argument("media '" + source_id + "': " + std::to_string(frames) +
                                  " frames exceeds the limit of " + std::to_string(max_frames));
    if (features.size() != frames * patches * dim)
      throw std::invalid_argument("media '" + source_id + "': feature grid size does not match shape");
  }

  Tensor as_rows() const { return Tensor::from({rows(), dim}, features); }
};

}  // namespace cosmo
