// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Interleaved-document cleanup: jitter the image-text similarity matrix,
// solve the one-to-one image/text assignment exactly, then replace weakly
// matched text spans with generated captions (or, in the MMC4-style
// baseline, drop the weakly matched images).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cosmo/document.hpp"
#include "cosmo/parallel.hpp"
#include "cosmo/shard.hpp"

namespace cosmo {

/// Dense [n_images, n_texts] score matrix.
struct SimilarityMatrix {
  std::size_t n_images = 0;
  std::size_t n_texts = 0;
  std::vector<double> scores;

  static SimilarityMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    SimilarityMatrix m;
    m.n_images = rows.size();
    m.n_texts = rows.empty() ? 0 : rows.front().size();
    for (const auto& r : rows) {
      if (r.size() != m.n_texts) throw std::invalid_argument("similarity matrix rows differ in length");
      m.scores.insert(m.scores.end(), r.begin(), r.end());
    }
    return m;
  }

  double at(std::size_t image, std::size_t text) const { return scores[image * n_texts + text]; }
  double& at(std::size_t image, std::size_t text) { return scores[image * n_texts + text]; }

  std::vector<std::vector<double>> rows() const {
    std::vector<std::vector<double>> out(n_images);
    for (std::size_t i = 0; i < n_images; ++i)
      out[i].assign(scores.begin() + static_cast<std::ptrdiff_t>(i * n_texts),
                    scores.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_texts));
    return out;
  }
};

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (image, text), sorted by image

  double total(const SimilarityMatrix& sim) const {
    double s = 0;
    for (auto [i, t] : pairs) s += sim.at(i, t);
    return s;
  }

  std::optional<std::size_t> text_for(std::size_t image) const {
    for (auto [i, t] : pairs)
      if (i == image) return t;
    return std::nullopt;
  }
};

// ---- perturbation -----------------------------------------------------------

struct NoiseDraw {
  double raw;      // Normal(0, sigma) sample
  double clamped;  // raw limited to [-clamp, clamp]
};

template <class Rng>
NoiseDraw draw_noise(Rng& rng, double sigma, double clamp) {
  std::normal_distribution<double> normal(0.0, sigma);
  const double raw = normal(rng);
  return {raw, std::clamp(raw, -clamp, clamp)};
}

/// scores + clamp(Normal(0, sigma)) entrywise; `sim` is left untouched.
template <class Rng>
SimilarityMatrix perturb(const SimilarityMatrix& sim, Rng& rng, double sigma = 0.04, double clamp = 0.08) {
  if (!(sigma > 0) || !(clamp > 0)) throw std::invalid_argument("perturb: sigma and clamp must be positive");
  SimilarityMatrix out = sim;
  for (auto& v : out.scores) v += draw_noise(rng, sigma, clamp).clamped;
  return out;
}

// ---- assignment --------------------------------------------------------------

namespace detail {

// Minimum-cost assignment of every row to a distinct column, rows <= cols.
// Shortest augmenting paths with potentials, O(rows^2 * cols).
inline std::vector<std::size_t> hungarian_min(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0), v(cols + 1, 0);
  std::vector<std::size_t> owner(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of(rows);
  for (std::size_t j = 1; j <= cols; ++j)
    if (owner[j] != 0) col_of[owner[j] - 1] = j - 1;
  return col_of;
}

}  // namespace detail

/// One-to-one assignment maximizing total similarity. With more images than
/// texts every text gets an image and the surplus images stay unmatched.
inline Assignment match(const SimilarityMatrix& sim) {
  for (double v : sim.scores)
    if (!std::isfinite(v)) throw std::invalid_argument("match: similarity matrix has a non-finite entry");
  Assignment a;
  if (sim.n_images == 0 || sim.n_texts == 0) return a;
  if (sim.n_images <= sim.n_texts) {
    std::vector<double> cost(sim.scores.size());
    for (std::size_t k = 0; k < cost.size(); ++k) cost[k] = -sim.scores[k];
    auto col = detail::hungarian_min(cost, sim.n_images, sim.n_texts);
    for (std::size_t i = 0; i < sim.n_images; ++i) a.pairs.emplace_back(i, col[i]);
  } else {
    std::vector<double> cost(sim.scores.size());
    for (std::size_t t = 0; t < sim.n_texts; ++t)
      for (std::size_t i = 0; i < sim.n_images; ++i) cost[t * sim.n_images + i] = -sim.at(i, t);
    auto img = detail::hungarian_min(cost, sim.n_texts, sim.n_images);
    for (std::size_t t = 0; t < sim.n_texts; ++t) a.pairs.emplace_back(img[t], t);
    std::sort(a.pairs.begin(), a.pairs.end());
  }
  return a;
}

// ---- caption replacement ---------------------------------------------------

class Captioner {
 public:
  virtual ~Captioner() = default;
  virtual std::string generate(const MediaItem& media) = 0;
};

/// Deterministic stand-in: names the media by a hash of its features.
class MockCaptioner : public Captioner {
 public:
  std::string generate(const MediaItem& media) override {
    std::uint64_t h = 1469598103934665603ull;
    for (real v : media.features) {
      const auto q = static_cast<std::int64_t>(std::llround(static_cast<double>(v) * 1e4));
      h = (h ^ static_cast<std::uint64_t>(q)) * 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return "a picture of item " + std::string(buf, 8);
  }
};

struct PrepOptions {
  double sigma = 0.04;
  double clamp = 0.08;
  double replace_below = 0.20;
  int min_image_px = 0;        // media with a known side below this are removed first
  bool mmc4_baseline = false;  // drop images below `baseline_threshold` instead of captioning
  double baseline_threshold = 0.24;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PrepOptions, sigma, clamp, replace_below, min_image_px, mmc4_baseline,
                                                baseline_threshold)

/// What happened to one document; serialized into the shard sidecar.
struct PrepRecord {
  Assignment assignment;
  std::vector<std::size_t> replaced;  // image indices whose matched text was replaced
  std::vector<std::size_t> dropped_media;
  std::map<std::size_t, std::string> original_texts;  // text index -> replaced text
  bool dropped = false;
  std::string reason;
};

struct PrepResult {
  std::optional<Document> doc;  // empty when the document was dropped
  std::optional<SimilarityMatrix> similarity;
  PrepRecord record;
};

namespace detail {

inline std::vector<std::size_t> text_segment_indices(const Document& doc) {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < doc.segments.size(); ++s)
    if (std::holds_alternative<TextSegment>(doc.segments[s])) out.push_back(s);
  return out;
}

// Removes media (and their segments and similarity rows), reindexing the rest.
inline void remove_media(Document& doc, SimilarityMatrix& sim, const std::set<std::size_t>& gone) {
  if (gone.empty()) return;
  std::vector<std::size_t> remap(doc.media.size(), 0);
  std::vector<MediaItem> kept;
  SimilarityMatrix kept_sim{0, sim.n_texts, {}};
  for (std::size_t i = 0; i < doc.media.size(); ++i) {
    if (gone.count(i)) continue;
    remap[i] = kept.size();
    kept.push_back(std::move(doc.media[i]));
    if (i < sim.n_images) {
      ++kept_sim.n_images;
      for (std::size_t t = 0; t < sim.n_texts; ++t) kept_sim.scores.push_back(sim.at(i, t));
    }
  }
  std::vector<Segment> segments;
  for (auto& seg : doc.segments) {
    if (auto* m = std::get_if<MediaSegment>(&seg)) {
      if (gone.count(m->index)) continue;
      m->index = remap[m->index];
    }
    segments.push_back(std::move(seg));
  }
  doc.media = std::move(kept);
  doc.segments = std::move(segments);
  sim = std::move(kept_sim);
}

}  // namespace detail

/// Applies the assignment to a document whose similarity matrix covers all
/// of its media (rows) and text segments (columns). Media without a media
/// segment are placed just before their matched text, or at the end when
/// unmatched. Media count and order are preserved outside baseline mode.
inline PrepResult filter_and_replace(Document doc, SimilarityMatrix sim, const Assignment& assignment,
                                     Captioner& captioner, const PrepOptions& options) {
  PrepResult result;
  result.record.assignment = assignment;
  auto drop = [&](std::string reason) {
    result.record.dropped = true;
    result.record.reason = std::move(reason);
    result.doc.reset();
    return result;
  };
  const auto texts = detail::text_segment_indices(doc);
  if (sim.n_images != doc.media.size() || sim.n_texts != texts.size()) {
    return drop("similarity matrix is " + std::to_string(sim.n_images) + "x" + std::to_string(sim.n_texts) +
                " but document has " + std::to_string(doc.media.size()) + " media and " +
                std::to_string(texts.size()) + " text spans");
  }
  for (auto [i, t] : assignment.pairs) {
    if (i >= sim.n_images || t >= sim.n_texts) return drop("assignment refers outside the similarity matrix");
  }

  // Place media that the document lists but never positions.
  std::set<std::size_t> placed;
  for (const auto& seg : doc.segments)
    if (const auto* m = std::get_if<MediaSegment>(&seg)) placed.insert(m->index);
  if (placed.size() < doc.media.size()) {
    std::map<std::size_t, std::vector<std::size_t>> before_text;  // segment index -> media
    std::vector<std::size_t> trailing;
    for (std::size_t i = 0; i < doc.media.size(); ++i) {
      if (placed.count(i)) continue;
      if (auto t = assignment.text_for(i))
        before_text[texts[*t]].push_back(i);
      else
        trailing.push_back(i);
    }
    std::vector<Segment> segments;
    for (std::size_t s = 0; s < doc.segments.size(); ++s) {
      if (auto it = before_text.find(s); it != before_text.end())
        for (auto i : it->second) segments.emplace_back(MediaSegment{i});
      segments.push_back(doc.segments[s]);
    }
    for (auto i : trailing) segments.emplace_back(MediaSegment{i});
    doc.segments = std::move(segments);
  }

  if (options.mmc4_baseline) {
    std::set<std::size_t> gone;
    for (auto [i, t] : assignment.pairs)
      if (sim.at(i, t) < options.baseline_threshold) gone.insert(i);
    result.record.dropped_media.assign(gone.begin(), gone.end());
    detail::remove_media(doc, sim, gone);
  } else {
    for (auto [i, t] : assignment.pairs) {
      if (sim.at(i, t) >= options.replace_below) continue;
      auto& text = std::get<TextSegment>(doc.segments[texts[t]]).text;
      std::string caption;
      try {
        caption = captioner.generate(doc.media[i]);
      } catch (const std::exception& e) {
        return drop(std::string("captioner failed: ") + e.what());
      }
      result.record.original_texts[t] = text;
      result.record.replaced.push_back(i);
      text = std::move(caption);
    }
  }
  if (doc.media.empty()) return drop("no media left");
  result.doc = std::move(doc);
  result.similarity = std::move(sim);
  return result;
}

/// Size filter, perturbation, matching and replacement for one document.
template <class Rng>
PrepResult prep_document(Document doc, const std::optional<SimilarityMatrix>& sim_in, Captioner& captioner,
                         const PrepOptions& options, Rng& rng) {
  if (!sim_in) {
    PrepResult r;
    r.record.dropped = true;
    r.record.reason = "missing similarity matrix";
    return r;
  }
  SimilarityMatrix sim = *sim_in;
  std::set<std::size_t> small;
  if (options.min_image_px > 0) {
    for (std::size_t i = 0; i < doc.media.size(); ++i) {
      const auto& m = doc.media[i];
      if ((m.width > 0 && m.width < options.min_image_px) || (m.height > 0 && m.height < options.min_image_px))
        small.insert(i);
    }
  }
  if (sim.n_images != doc.media.size()) {
    PrepResult r;
    r.record.dropped = true;
    r.record.reason = "similarity matrix has " + std::to_string(sim.n_images) + " rows for " +
                      std::to_string(doc.media.size()) + " media";
    return r;
  }
  detail::remove_media(doc, sim, small);
  if (doc.media.empty()) {
    PrepResult r;
    r.record.dropped = true;
    r.record.reason = small.empty() ? "no media" : "no media after size filter";
    return r;
  }
  Assignment a;
  try {
    a = match(perturb(sim, rng, options.sigma, options.clamp));
  } catch (const std::invalid_argument& e) {
    PrepResult r;
    r.record.dropped = true;
    r.record.reason = e.what();
    return r;
  }
  return filter_and_replace(std::move(doc), std::move(sim), a, captioner, options);
}

inline json to_json(const PrepRecord& r) {
  json pairs = json::array();
  for (auto [i, t] : r.assignment.pairs) pairs.push_back({i, t});
  json originals = json::object();
  for (const auto& [t, text] : r.original_texts) originals[std::to_string(t)] = text;
  json j = {{"assignment", pairs}, {"replaced", r.replaced}, {"dropped", r.dropped}, {"reason", r.reason}};
  if (!r.original_texts.empty()) j["original_texts"] = originals;
  if (!r.dropped_media.empty()) j["dropped_media"] = r.dropped_media;
  return j;
}

// ---- statistics --------------------------------------------------------------

struct MatchedDoc {
  const Document* doc;
  const SimilarityMatrix* sim;
  const Assignment* assignment;
};

struct DocStats {
  double avg_tokens_per_clip = 0;  // words in matched text spans
  double avg_similarity = 0;       // over matched pairs
  std::size_t documents = 0;
  std::size_t pairs = 0;
  std::size_t media = 0;
};

inline DocStats doc_stats(const std::vector<MatchedDoc>& docs) {
  if (docs.empty()) throw std::invalid_argument("doc_stats: no documents");
  DocStats s;
  double tokens = 0, sim = 0;
  for (const auto& d : docs) {
    ++s.documents;
    s.media += d.doc->media.size();
    const auto texts = detail::text_segment_indices(*d.doc);
    for (auto [i, t] : d.assignment->pairs) {
      ++s.pairs;
      sim += d.sim->at(i, t);
      tokens += static_cast<double>(split_words(std::get<TextSegment>(d.doc->segments.at(texts.at(t))).text).size());
    }
  }
  if (s.pairs > 0) {
    s.avg_tokens_per_clip = tokens / static_cast<double>(s.pairs);
    s.avg_similarity = sim / static_cast<double>(s.pairs);
  }
  return s;
}

inline json to_json(const DocStats& s) {
  return {{"avg_tokens_per_clip", s.avg_tokens_per_clip},
          {"avg_similarity", s.avg_similarity},
          {"documents", s.documents},
          {"pairs", s.pairs},
          {"media", s.media}};
}

// ---- shard driver -----------------------------------------------------------

struct PrepSummary {
  std::size_t read = 0;
  std::size_t written = 0;
  std::size_t dropped = 0;
  std::size_t replaced_spans = 0;
  std::optional<DocStats> stats;
};

/// Processes one input shard into `out_prefix` (+ .prep.json sidecar).
/// Per-document randomness is keyed by (seed, document index), so output
/// does not depend on the worker count.
inline PrepSummary prep_shard(const std::filesystem::path& in, const std::filesystem::path& out_prefix,
                              const PrepOptions& options, Captioner& captioner, std::uint64_t seed) {
  auto records = read_shard(in);
  std::vector<PrepResult> results(records.size());
  std::mutex captioner_mu;
  struct LockedCaptioner : Captioner {
    Captioner& inner;
    std::mutex& mu;
    LockedCaptioner(Captioner& c, std::mutex& m) : inner(c), mu(m) {}
    std::string generate(const MediaItem& media) override {
      std::lock_guard lock(mu);
      return inner.generate(media);
    }
  } locked(captioner, captioner_mu);
  parallel_for(records.size(), [&](std::size_t k) {
    auto rng = derived_rng(seed, {k});
    std::optional<SimilarityMatrix> sim;
    if (records[k].similarity) sim = SimilarityMatrix::from_rows(*records[k].similarity);
    results[k] = prep_document(records[k].doc, sim, locked, options, rng);
  });

  PrepSummary summary;
  summary.read = records.size();
  json sidecar = json::object();
  std::vector<MatchedDoc> matched;
  {
    ShardWriter writer(out_prefix);
    for (std::size_t k = 0; k < records.size(); ++k) {
      auto& r = results[k];
      sidecar[records[k].doc.id] = to_json(r.record);
      if (!r.doc) {
        ++summary.dropped;
        continue;
      }
      ++summary.written;
      summary.replaced_spans += r.record.replaced.size();
      ShardRecord out{*r.doc, r.similarity->rows(), records[k].extra};
      writer.write(out);
      if (!options.mmc4_baseline) matched.push_back({&*r.doc, &*r.similarity, &r.record.assignment});
    }
  }
  io::write_json_file(out_prefix.string() + ".prep.json", sidecar);
  if (!matched.empty()) summary.stats = doc_stats(matched);
  return summary;
}

}  // namespace cosmo
