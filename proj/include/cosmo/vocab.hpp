// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Word-level vocabulary with byte fallback.
//
// Layout: the five reserved tokens occupy ids 0..4, the 256 byte tokens
// follow, then words ordered by descending frequency (ties lexicographic).
// A word missing from the vocabulary is spelled as its bytes; when two
// spelled words are adjacent, a space byte separates them so that
// detokenize(tokenize(s)) recovers the whitespace-normalized input.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cosmo {

namespace token {
inline constexpr int bos = 0;
inline constexpr int eoc = 1;
inline constexpr int visual = 2;
inline constexpr int pad = 3;
inline constexpr int unk = 4;
inline constexpr int first_byte = 5;
inline constexpr int first_word = first_byte + 256;
}  // namespace token

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) words.push_back(std::move(current)), current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

class Vocab {
 public:
  static constexpr std::size_t kMinSize = 300;

  Vocab() { init_reserved(); }

  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) v.add_word(w);
    return v;
  }

  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

  /// Id of a whole word, or -1 when absent.
  int word_id(const std::string& word) const {
    auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? -1 : it->second;
  }

  static bool is_reserved(int id) { return id >= 0 && id < token::first_byte; }
  static bool is_byte(int id) { return id >= token::first_byte && id < token::first_word; }

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> ids;
    bool prev_spelled = false;
    for (const auto& w : split_words(text)) {
      const int id = word_id(w);
      if (id >= 0) {
        ids.push_back(id);
        prev_spelled = false;
        continue;
      }
      if (prev_spelled) ids.push_back(token::first_byte + ' ');
      for (unsigned char c : w) ids.push_back(token::first_byte + c);
      prev_spelled = true;
    }
    return ids;
  }

  /// Inverse of tokenize. Reserved tokens are rendered by name.
  std::string detokenize(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    std::string spelled;
    bool spelling = false;
    auto flush = [&] {
      if (spelling) words.push_back(spelled);
      spelled.clear();
      spelling = false;
    };
    for (int id : ids) {
      if (is_byte(id)) {
        const char c = static_cast<char>(id - token::first_byte);
        if (c == ' ' && spelling) {
          flush();
        } else {
          spelled.push_back(c);
          spelling = true;
        }
        continue;
      }
      flush();
      words.push_back(token(id));
    }
    flush();
    std::string out;
    for (const auto& w : words) {
      if (!out.empty()) out.push_back(' ');
      out += w;
    }
    return out;
  }

 private:
  void init_reserved() {
    id_to_token_ = {"<s>", "<EOC>", "<Visual>", "<pad>", "<unk>"};
    for (int b = 0; b < 256; ++b) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "<0x%02X>", b);
      id_to_token_.emplace_back(buf);
    }
  }

  void add_word(const std::string& w) {
    if (w.empty() || word_to_id_.count(w)) throw std::invalid_argument("vocab: duplicate or empty word '" + w + "'");
    word_to_id_[w] = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(w);
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> word_to_id_;
};

/// Frequency-ranked word vocabulary over whitespace-split text.
template <class Range>
Vocab build_vocab(const Range& corpus, std::size_t max_size) {
  if (max_size < Vocab::kMinSize) {
    throw std::invalid_argument("build_vocab: max_size must be at least " + std::to_string(Vocab::kMinSize));
  }
  std::map<std::string, std::size_t> counts;
  bool any = false;
  for (const auto& text : corpus) {
    for (auto& w : split_words(text)) {
      ++counts[w];
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t room = max_size - static_cast<std::size_t>(token::first_word);
  std::vector<std::string> words;
  for (std::size_t i = 0; i < ranked.size() && i < room; ++i) words.push_back(ranked[i].first);
  return Vocab::from_words(words);
}

}  // namespace cosmo
