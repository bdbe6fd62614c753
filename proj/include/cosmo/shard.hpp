// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Document shard files.
//
//   <prefix>.jsonl     one record per line:
//       {"id": "...", "segments": [{"t": "..."} | {"m": k}, ...],
//        "media": [{"kind": "image", "features_ref": "<prefix>.bin#<byte offset>",
//                   "source_id": "...", "width": W, "height": H}, ...],
//        "similarity": [[...], ...]}          (optional, images x texts)
//   <prefix>.bin       little-endian float32 feature grids, back to back
//   <prefix>.bin.json  {"entries": [{"offset": B, "frames": F, "patches": P, "dim": D}, ...]}
//
// features_ref paths are relative to the directory holding the .jsonl file.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosmo/document.hpp"

namespace cosmo {

using json = nlohmann::json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
  return out;
}

inline void write_f32(std::ostream& os, float value) {
  const auto bits = to_little(std::bit_cast<std::uint32_t>(value));
  os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

inline void write_f64(std::ostream& os, double value) {
  const auto bits = to_little(std::bit_cast<std::uint64_t>(value));
  os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

inline void write_u64(std::ostream& os, std::uint64_t value) {
  const auto bits = to_little(value);
  os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

inline float read_f32(std::istream& is) {
  std::uint32_t bits = 0;
  if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw FormatError("unexpected end of float32 data");
  return std::bit_cast<float>(to_little(bits));
}

inline double read_f64(std::istream& is) {
  std::uint64_t bits = 0;
  if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw FormatError("unexpected end of float64 data");
  return std::bit_cast<double>(to_little(bits));
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t bits = 0;
  if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw FormatError("unexpected end of data");
  return to_little(bits);
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const json& value) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << value.dump(2) << '\n';
}

}  // namespace io

/// A document record plus the optional fields the preprocessing stages use.
struct ShardRecord {
  Document doc;
  std::optional<std::vector<std::vector<double>>> similarity;
  json extra = json::object();
};

class ShardWriter {
 public:
  explicit ShardWriter(const std::filesystem::path& prefix)
      : prefix_(prefix),
        jsonl_(prefix.string() + ".jsonl"),
        bin_(prefix.string() + ".bin", std::ios::binary),
        bin_name_(prefix.filename().string() + ".bin") {
    if (!jsonl_ || !bin_) throw std::runtime_error("cannot create shard at " + prefix.string());
  }

  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;

  ~ShardWriter() {
    try {
      close();
    } catch (...) {
    }
  }

  void write(const ShardRecord& record) {
    const Document& doc = record.doc;
    json j = record.extra;
    j["id"] = doc.id;
    json segs = json::array();
    for (const auto& seg : doc.segments) {
      if (const auto* m = std::get_if<MediaSegment>(&seg))
        segs.push_back({{"m", m->index}});
      else
        segs.push_back({{"t", std::get<TextSegment>(seg).text}});
    }
    j["segments"] = std::move(segs);
    json media = json::array();
    for (const auto& item : doc.media) {
      json m = {{"kind", to_string(item.kind)},
                {"features_ref", bin_name_ + "#" + std::to_string(offset_)},
                {"source_id", item.source_id}};
      if (item.width > 0) m["width"] = item.width;
      if (item.height > 0) m["height"] = item.height;
      media.push_back(std::move(m));
      index_.push_back({{"offset", offset_}, {"frames", item.frames}, {"patches", item.patches}, {"dim", item.dim}});
      for (real v : item.features) io::write_f32(bin_, static_cast<float>(v));
      offset_ += item.features.size() * sizeof(float);
    }
    j["media"] = std::move(media);
    if (record.similarity) j["similarity"] = *record.similarity;
    jsonl_ << j.dump() << '\n';
  }

  void write(const Document& doc) { write(ShardRecord{doc, std::nullopt, json::object()}); }

  void close() {
    if (closed_) return;
    closed_ = true;
    jsonl_.close();
    bin_.close();
    io::write_json_file(prefix_.string() + ".bin.json", json{{"entries", index_}});
  }

 private:
  std::filesystem::path prefix_;
  std::ofstream jsonl_;
  std::ofstream bin_;
  std::string bin_name_;
  std::uint64_t offset_ = 0;
  json index_ = json::array();
  bool closed_ = false;
};

namespace detail {

struct FeatureFile {
  std::vector<char> bytes;
  std::map<std::uint64_t, json> entries;
};

inline const FeatureFile& load_feature_file(std::map<std::string, FeatureFile>& cache,
                                            const std::filesystem::path& bin_path) {
  const auto key = bin_path.string();
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  FeatureFile file;
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw FormatError("missing media sidecar " + key);
  file.bytes.assign(std::istreambuf_iterator<char>(in), {});
  const json index = io::read_json_file(key + ".json");
  for (const auto& e : index.at("entries")) file.entries[e.at("offset").get<std::uint64_t>()] = e;
  return cache.emplace(key, std::move(file)).first->second;
}

}  // namespace detail

inline Document document_from_json(const json& j, const std::filesystem::path& base_dir,
                                   std::map<std::string, detail::FeatureFile>& cache) {
  Document doc;
  doc.id = j.value("id", std::string{});
  for (const auto& s : j.at("segments")) {
    if (s.contains("m"))
      doc.segments.emplace_back(MediaSegment{s.at("m").get<std::size_t>()});
    else if (s.contains("t"))
      doc.segments.emplace_back(TextSegment{s.at("t").get<std::string>()});
    else
      throw FormatError("document '" + doc.id + "': segment is neither text nor media");
  }
  for (const auto& m : j.value("media", json::array())) {
    MediaItem item;
    item.kind = media_kind_from_string(m.value("kind", std::string("image")));
    item.source_id = m.value("source_id", std::string{});
    item.width = m.value("width", 0);
    item.height = m.value("height", 0);
    const auto ref = m.at("features_ref").get<std::string>();
    const auto hash = ref.rfind('#');
    if (hash == std::string::npos) throw FormatError("features_ref '" + ref + "' lacks a #offset");
    const auto offset = std::stoull(ref.substr(hash + 1));
    const auto& file = detail::load_feature_file(cache, base_dir / ref.substr(0, hash));
    auto e = file.entries.find(offset);
    if (e == file.entries.end()) throw FormatError("features_ref '" + ref + "' not in index");
    item.frames = e->second.at("frames").get<std::size_t>();
    item.patches = e->second.at("patches").get<std::size_t>();
    item.dim = e->second.at("dim").get<std::size_t>();
    const std::size_t n = item.frames * item.patches * item.dim;
    if (offset + n * sizeof(float) > file.bytes.size()) throw FormatError("features_ref '" + ref + "' overruns sidecar");
    item.features.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, file.bytes.data() + offset + i * sizeof(float), sizeof bits);
      item.features[i] = static_cast<real>(std::bit_cast<float>(io::to_little(bits)));
    }
    doc.media.push_back(std::move(item));
  }
  doc.validate();
  return doc;
}

/// Reads `<prefix>.jsonl` (a path ending in .jsonl is also accepted).
inline std::vector<ShardRecord> read_shard(std::filesystem::path path) {
  if (path.extension() != ".jsonl") path = path.string() + ".jsonl";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open shard " + path.string());
  std::map<std::string, detail::FeatureFile> cache;
  std::vector<ShardRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ShardRecord rec;
    rec.doc = document_from_json(j, path.parent_path(), cache);
    if (rec.doc.id.empty()) rec.doc.id = path.stem().string() + ":" + std::to_string(lineno - 1);
    if (j.contains("similarity")) rec.similarity = j.at("similarity").get<std::vector<std::vector<double>>>();
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() != "id" && it.key() != "segments" && it.key() != "media" && it.key() != "similarity")
        rec.extra[it.key()] = it.value();
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<Document> read_documents(const std::filesystem::path& path) {
  std::vector<Document> docs;
  for (auto& r : read_shard(path)) docs.push_back(std::move(r.doc));
  return docs;
}

}  // namespace cosmo
