// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Video-to-interleaved-document generation: kernel temporal segmentation
// of frame features into shots, then a history-conditioned summary per shot
// from a pluggable annotator, assembled into one interleaved document.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cosmo/document.hpp"
#include "cosmo/media.hpp"
#include "cosmo/parallel.hpp"
#include "cosmo/shard.hpp"
#include "cosmo/vocab.hpp"

namespace cosmo {

struct FrameFeatureSeq {
  std::size_t n_frames = 0;
  std::size_t dim = 0;
  std::vector<double> features;  // [n_frames, dim] row-major
  std::vector<double> timestamps;

  void validate() const {
    if (n_frames < 2) throw std::invalid_argument("frame sequence needs at least 2 frames");
    if (dim == 0) throw std::invalid_argument("frame sequence has zero-width features");
    if (features.size() != n_frames * dim) throw std::invalid_argument("frame features do not match [n_frames, dim]");
    if (timestamps.size() != n_frames) throw std::invalid_argument("one timestamp per frame required");
    for (std::size_t i = 1; i < n_frames; ++i)
      if (!(timestamps[i] > timestamps[i - 1])) throw std::invalid_argument("timestamps must increase strictly");
  }

  const double* frame(std::size_t i) const { return features.data() + i * dim; }
};

inline void from_json(const json& j, FrameFeatureSeq& s) {
  const auto rows = j.at("features").get<std::vector<std::vector<double>>>();
  s.n_frames = rows.size();
  s.dim = rows.empty() ? 0 : rows[0].size();
  s.features.clear();
  for (const auto& r : rows) {
    if (r.size() != s.dim) throw std::invalid_argument("frame features have ragged rows");
    s.features.insert(s.features.end(), r.begin(), r.end());
  }
  if (j.contains("timestamps")) {
    s.timestamps = j.at("timestamps").get<std::vector<double>>();
  } else {
    s.timestamps.resize(s.n_frames);
    for (std::size_t i = 0; i < s.n_frames; ++i) s.timestamps[i] = static_cast<double>(i);
  }
  s.validate();
}

/// Segment i spans frames [cuts[i-1], cuts[i]), with cuts[-1] = 0 and a
/// final segment ending at n_frames.
struct ShotBoundaries {
  std::vector<std::size_t> cuts;
  double scatter = 0;  // total within-segment scatter of this segmentation
};

/// Prefix sums over the Gram matrix of L2-normalized frames, so the scatter
/// of any segment costs O(1).
class SegmentScatter {
 public:
  explicit SegmentScatter(const FrameFeatureSeq& seq) : n_(seq.n_frames), diag_(n_ + 1, 0.0), block_((n_ + 1) * (n_ + 1), 0.0) {
    std::vector<double> unit(seq.features.size());
    for (std::size_t i = 0; i < n_; ++i) {
      double norm = 0;
      for (std::size_t k = 0; k < seq.dim; ++k) norm += seq.frame(i)[k] * seq.frame(i)[k];
      norm = std::sqrt(norm);
      for (std::size_t k = 0; k < seq.dim; ++k) unit[i * seq.dim + k] = norm > 0 ? seq.frame(i)[k] / norm : 0.0;
    }
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j) {
        double dot = 0;
        for (std::size_t k = 0; k < seq.dim; ++k) dot += unit[i * seq.dim + k] * unit[j * seq.dim + k];
        at(i + 1, j + 1) = dot + at(i, j + 1) + at(i + 1, j) - at(i, j);
        if (i == j) diag_[i + 1] = diag_[i] + dot;
      }
  }

  /// Sum over t in [a, b) of |f_t - mean|^2.
  double operator()(std::size_t a, std::size_t b) const {
    const double inner = at(b, b) - at(a, b) - at(b, a) + at(a, a);
    return std::max(0.0, diag_[b] - diag_[a] - inner / static_cast<double>(b - a));
  }

  std::size_t size() const { return n_; }

 private:
  double& at(std::size_t i, std::size_t j) { return block_[i * (n_ + 1) + j]; }
  double at(std::size_t i, std::size_t j) const { return block_[i * (n_ + 1) + j]; }

  std::size_t n_;
  std::vector<double> diag_;
  std::vector<double> block_;
};

namespace detail {

// best[m][t]: least scatter of frames [0, t) split into m + 1 segments.
struct KtsTable {
  std::vector<std::vector<double>> best;
  std::vector<std::vector<std::size_t>> from;
};

inline KtsTable kts_table(const SegmentScatter& scatter, std::size_t max_cuts) {
  const std::size_t n = scatter.size();
  const double inf = std::numeric_limits<double>::infinity();
  KtsTable t;
  t.best.assign(max_cuts + 1, std::vector<double>(n + 1, inf));
  t.from.assign(max_cuts + 1, std::vector<std::size_t>(n + 1, 0));
  for (std::size_t e = 1; e <= n; ++e) t.best[0][e] = scatter(0, e);
  for (std::size_t m = 1; m <= max_cuts; ++m)
    for (std::size_t e = m + 1; e <= n; ++e)
      for (std::size_t s = m; s < e; ++s) {
        const double v = t.best[m - 1][s] + scatter(s, e);
        if (v < t.best[m][e]) t.best[m][e] = v, t.from[m][e] = s;  // ties keep the earliest cut
      }
  return t;
}

inline ShotBoundaries kts_backtrack(const KtsTable& t, std::size_t m, std::size_t n) {
  ShotBoundaries b;
  b.scatter = t.best[m][n];
  std::size_t e = n;
  for (std::size_t k = m; k > 0; --k) {
    e = t.from[k][e];
    b.cuts.push_back(e);
  }
  std::reverse(b.cuts.begin(), b.cuts.end());
  return b;
}

}  // namespace detail

struct KtsMode {
  static KtsMode fixed(std::size_t cuts) { return {cuts, false, 0.0}; }
  static KtsMode automatic(std::size_t max_cuts, double penalty_c = 1.0) { return {max_cuts, true, penalty_c}; }

  std::size_t cuts = 0;  // exact count when fixed, upper bound when automatic
  bool automatic_select = false;
  double penalty_c = 1.0;
};

/// Penalty added per candidate cut count in automatic mode.
inline double kts_penalty(std::size_t m, std::size_t n, double c) {
  if (m == 0) return 0.0;
  return c * static_cast<double>(m) * (std::log(static_cast<double>(n) / static_cast<double>(m)) + 1.0);
}

inline ShotBoundaries kts_segment(const FrameFeatureSeq& seq, KtsMode mode) {
  seq.validate();
  const std::size_t n = seq.n_frames;
  if (mode.cuts >= n) {
    throw std::invalid_argument("kts_segment: " + std::to_string(mode.cuts) + " cuts need more than " +
                                std::to_string(n) + " frames");
  }
  if (mode.automatic_select && mode.penalty_c < 0) throw std::invalid_argument("kts_segment: negative penalty");
  const SegmentScatter scatter(seq);
  const auto table = detail::kts_table(scatter, mode.cuts);
  if (!mode.automatic_select) return detail::kts_backtrack(table, mode.cuts, n);
  std::size_t best_m = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m <= mode.cuts; ++m) {
    const double v = table.best[m][n] + kts_penalty(m, n, mode.penalty_c);
    if (v < best) best = v, best_m = m;
  }
  return detail::kts_backtrack(table, best_m, n);
}

// ---- annotations and prompts ----------------------------------------------

struct DenseCaption {
  std::array<double, 4> box{};  // x1, y1, x2, y2, normalized
  std::string text;
};

struct ClipAnnotation {
  std::string asr;
  std::string caption;
  std::vector<DenseCaption> dense_captions;
  std::size_t frame_begin = 0;
  std::size_t frame_end = 0;  // exclusive

  void validate() const {
    for (const auto& d : dense_captions) {
      const auto& b = d.box;
      for (double v : b)
        if (!(v >= 0 && v <= 1)) throw std::invalid_argument("dense caption box outside the unit square");
      if (!(b[0] < b[2] && b[1] < b[3])) throw std::invalid_argument("dense caption box needs x1 < x2 and y1 < y2");
    }
    if (frame_end <= frame_begin) throw std::invalid_argument("clip range is empty");
  }
};

inline void from_json(const json& j, DenseCaption& d) {
  d.box = j.at("box").get<std::array<double, 4>>();
  d.text = j.at("text").get<std::string>();
}

inline void to_json(json& j, const DenseCaption& d) { j = {{"box", d.box}, {"text", d.text}}; }

inline void from_json(const json& j, ClipAnnotation& a) {
  a.asr = j.value("asr", "");
  a.caption = j.value("caption", "");
  a.dense_captions = j.value("dense_captions", std::vector<DenseCaption>{});
  a.frame_begin = j.value("frame_begin", std::size_t{0});
  a.frame_end = j.value("frame_end", std::size_t{0});
}

inline void to_json(json& j, const ClipAnnotation& a) {
  j = {{"asr", a.asr},
       {"caption", a.caption},
       {"dense_captions", a.dense_captions},
       {"frame_begin", a.frame_begin},
       {"frame_end", a.frame_end}};
}

inline constexpr std::size_t kDefaultHistory = 3;

inline constexpr const char* kPromptInstruction =
    "You write one coherent paragraph describing a video clip for a reader who cannot see it.\n"
    "Keep every noun and action mentioned in the speech transcript (ASR); do not invent objects.\n"
    "Use the caption and region descriptions for visual detail.\n";

inline std::string format_box(const std::array<double, 4>& b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "[%.3f, %.3f, %.3f, %.3f]", b[0], b[1], b[2], b[3]);
  return buf;
}

/// Instruction block, the clip's annotation, then (after the first clip) the
/// last `h` summaries under "### History".
inline std::string build_prompt(const std::vector<std::string>& history, const ClipAnnotation& ann, bool is_first,
                                std::size_t h = kDefaultHistory) {
  if (is_first != history.empty()) throw std::invalid_argument("build_prompt: only the first clip has no history");
  std::ostringstream os;
  os << "### Instruction\n" << kPromptInstruction << "\n### Annotation\n";
  os << "asr: " << normalize_whitespace(ann.asr) << "\n";
  os << "caption: " << normalize_whitespace(ann.caption) << "\n";
  for (const auto& d : ann.dense_captions) os << "region " << format_box(d.box) << ": " << normalize_whitespace(d.text) << "\n";
  if (!is_first) {
    os << "\n### History\n";
    const std::size_t from = history.size() > h ? history.size() - h : 0;
    for (std::size_t i = from; i < history.size(); ++i) os << "- " << history[i] << "\n";
  }
  os << "\n### Summary\n";
  return os.str();
}

// ---- annotator clients ------------------------------------------------------

class AnnotatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AnnotatorClient {
 public:
  virtual ~AnnotatorClient() = default;
  virtual std::string summarize(const std::string& prompt) = 0;
};

/// Offline stand-in: restates the caption and transcript lines of the
/// prompt's annotation block. A pure function of the prompt.
class MockAnnotator : public AnnotatorClient {
 public:
  std::string summarize(const std::string& prompt) override {
    std::istringstream in(prompt);
    std::string line, caption, asr;
    bool in_annotation = false;
    while (std::getline(in, line)) {
      if (line.rfind("### ", 0) == 0) in_annotation = line == "### Annotation";
      if (!in_annotation) continue;
      if (line.rfind("caption: ", 0) == 0) caption = line.substr(9);
      if (line.rfind("asr: ", 0) == 0) asr = line.substr(5);
    }
    std::string out = caption.empty() ? "a video clip" : caption;
    if (!asr.empty()) out += " while the speaker says " + asr;
    return out;
  }
};

/// POSTs {"prompt": ...} as JSON to `endpoint` and reads {"text": ...}.
class HttpAnnotator : public AnnotatorClient {
 public:
  explicit HttpAnnotator(const std::string& endpoint, double timeout_s = 30.0) : timeout_s_(timeout_s) {
    const auto scheme = endpoint.find("://");
    if (scheme == std::string::npos || endpoint.substr(0, scheme) != "http") {
      throw std::invalid_argument("annotator endpoint must be an http:// URL, got '" + endpoint + "'");
    }
    const auto slash = endpoint.find('/', scheme + 3);
    host_ = endpoint.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : endpoint.substr(slash);
  }

  std::string summarize(const std::string& prompt) override {
    httplib::Client client(host_);
    const auto secs = static_cast<time_t>(timeout_s_);
    const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto res = client.Post(path_, json{{"prompt", prompt}}.dump(), "application/json");
    if (!res) throw AnnotatorError("annotator request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw AnnotatorError("annotator returned HTTP " + std::to_string(res->status));
    try {
      return json::parse(res->body).at("text").get<std::string>();
    } catch (const json::exception& e) {
      throw AnnotatorError(std::string("annotator reply is not {\"text\": ...}: ") + e.what());
    }
  }

 private:
  std::string host_;
  std::string path_;
  double timeout_s_;
};

// ---- document assembly ------------------------------------------------------

struct ClipQuarantine {
  std::size_t clip = 0;
  std::string reason;
};

struct InterlinkResult {
  std::optional<Document> doc;  // absent when every clip was quarantined
  std::vector<std::string> prompts;  // per clip, empty when no prompt was built
  std::vector<std::string> summaries;
  std::vector<ClipQuarantine> quarantine;
};

inline constexpr std::size_t kClipMediaFrames = 3;

/// Up to three evenly spaced frames of a clip, one patch per frame.
inline MediaItem clip_media(const FrameFeatureSeq& seq, std::size_t begin, std::size_t end, const std::string& id) {
  MediaItem m;
  m.kind = MediaKind::video;
  m.frames = std::min(kClipMediaFrames, end - begin);
  m.patches = 1;
  m.dim = seq.dim;
  m.source_id = id;
  for (std::size_t f = 0; f < m.frames; ++f) {
    const std::size_t t = begin + f * (end - begin) / m.frames;
    for (std::size_t k = 0; k < seq.dim; ++k) m.features.push_back(static_cast<real>(seq.frame(t)[k]));
  }
  return m;
}

/// Frame range of each segment of a segmentation.
inline std::vector<std::pair<std::size_t, std::size_t>> segment_ranges(const ShotBoundaries& b, std::size_t n_frames) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t begin = 0;
  for (std::size_t c : b.cuts) out.push_back({begin, c}), begin = c;
  out.push_back({begin, n_frames});
  return out;
}

/// Summarizes clips in order. A clip without an annotation, or whose
/// annotator call fails, is quarantined and left out of both the document
/// and the history seen by later clips.
inline InterlinkResult annotate_video(const std::string& video_id, const FrameFeatureSeq& seq,
                                      const std::vector<std::optional<ClipAnnotation>>& clips, AnnotatorClient& client,
                                      std::size_t h = kDefaultHistory) {
  seq.validate();
  InterlinkResult r;
  r.prompts.resize(clips.size());
  r.summaries.resize(clips.size());
  std::vector<std::string> history;
  Document doc;
  doc.id = video_id;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (!clips[i]) {
      r.quarantine.push_back({i, "missing annotation"});
      continue;
    }
    const auto& ann = *clips[i];
    try {
      ann.validate();
      if (ann.frame_end > seq.n_frames) throw std::invalid_argument("clip range past the last frame");
    } catch (const std::invalid_argument& e) {
      r.quarantine.push_back({i, e.what()});
      continue;
    }
    r.prompts[i] = build_prompt(history, ann, history.empty(), h);
    std::string summary;
    try {
      summary = normalize_whitespace(client.summarize(r.prompts[i]));
    } catch (const std::exception& e) {
      r.quarantine.push_back({i, e.what()});
      continue;
    }
    if (summary.empty()) {
      r.quarantine.push_back({i, "empty summary"});
      continue;
    }
    r.summaries[i] = summary;
    history.push_back(summary);
    doc.segments.emplace_back(MediaSegment{doc.media.size()});
    doc.media.push_back(clip_media(seq, ann.frame_begin, ann.frame_end, video_id + "#" + std::to_string(i)));
    doc.segments.emplace_back(TextSegment{summary});
  }
  if (!doc.media.empty()) r.doc = std::move(doc);
  return r;
}

inline json to_json(const std::vector<ClipQuarantine>& q) {
  json out = json::array();
  for (const auto& c : q) out.push_back({{"clip", c.clip}, {"reason", c.reason}});
  return out;
}

struct InterlinkStats {
  std::size_t videos = 0;
  std::size_t clips = 0;
  std::size_t quarantined = 0;
  double avg_words_per_clip = 0;  // over summarized clips
};

inline InterlinkStats interlink_stats(const std::vector<InterlinkResult>& results) {
  InterlinkStats s;
  std::size_t words = 0, summarized = 0;
  for (const auto& r : results) {
    ++s.videos;
    s.clips += r.summaries.size();
    s.quarantined += r.quarantine.size();
    for (const auto& text : r.summaries)
      if (!text.empty()) words += split_words(text).size(), ++summarized;
  }
  s.avg_words_per_clip = summarized ? static_cast<double>(words) / static_cast<double>(summarized) : 0.0;
  return s;
}

/// One video's inputs as read from a clip directory.
struct VideoJob {
  std::string id;
  FrameFeatureSeq seq;
  std::vector<std::optional<ClipAnnotation>> clips;
};

/// Reads `<id>.json` files: {"features": [[...]...], "timestamps"?: [...],
/// "clips": [annotation | null, ...], "cuts"?: [...]}. Clips without an
/// explicit frame range take theirs from "cuts" or, failing that, from a
/// fixed-count segmentation.
inline std::vector<VideoJob> read_clip_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<VideoJob> jobs;
  for (const auto& f : files) {
    const json j = io::read_json_file(f);
    VideoJob job;
    job.id = j.value("id", f.stem().string());
    try {
      job.seq = j.get<FrameFeatureSeq>();
      for (const auto& c : j.at("clips")) {
        if (c.is_null()) job.clips.emplace_back(std::nullopt);
        else job.clips.emplace_back(c.get<ClipAnnotation>());
      }
    } catch (const std::exception& e) {
      throw FormatError(f.string() + ": " + e.what());
    }
    if (job.clips.empty()) throw FormatError(f.string() + ": no clips");
    ShotBoundaries b;
    try {
      if (j.contains("cuts")) {
        b.cuts = j.at("cuts").get<std::vector<std::size_t>>();
      } else {
        b = kts_segment(job.seq, KtsMode::fixed(job.clips.size() - 1));
      }
    } catch (const std::exception& e) {
      throw FormatError(f.string() + ": " + e.what());
    }
    const auto ranges = segment_ranges(b, job.seq.n_frames);
    if (ranges.size() != job.clips.size()) {
      throw FormatError(f.string() + ": " + std::to_string(job.clips.size()) + " clips for " +
                        std::to_string(ranges.size()) + " segments");
    }
    for (std::size_t i = 0; i < job.clips.size(); ++i) {
      auto& c = job.clips[i];
      if (c && c->frame_end == 0) c->frame_begin = ranges[i].first, c->frame_end = ranges[i].second;
    }
    jobs.push_back(std::move(job));
  }
  return jobs;
}

/// Videos run concurrently, at most `limit` at a time; each video's clips
/// stay sequential. The client must tolerate concurrent calls.
inline std::vector<InterlinkResult> annotate_videos(const std::vector<VideoJob>& jobs, AnnotatorClient& client,
                                                    std::size_t limit, std::size_t h = kDefaultHistory) {
  std::vector<InterlinkResult> out(jobs.size());
  parallel_for(
      jobs.size(), [&](std::size_t i) { out[i] = annotate_video(jobs[i].id, jobs[i].seq, jobs[i].clips, client, h); },
      std::max<std::size_t>(1, std::min(limit, worker_count())));
  return out;
}

}  // namespace cosmo
