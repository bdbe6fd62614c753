// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// In-context evaluation. A k-shot prompt is an interleaved document of k
// (media, caption) supports followed by the query media; the model
// continues it greedily until <EOC>. Retrieval ranks each query media
// against every class caption through the contrastive head.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cosmo/document.hpp"
#include "cosmo/model.hpp"
#include "cosmo/parallel.hpp"
#include "cosmo/synthetic.hpp"
#include "cosmo/vocab.hpp"

namespace cosmo {

class ContextError : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct FewShotSupport {
  MediaItem media;
  std::string caption;
};

struct FewShotEpisode {
  std::vector<FewShotSupport> support;  // at least as many shots as the largest k evaluated
  MediaItem query;
  std::string target;
};

/// Prompt for the first k supports of an episode, serialized exactly as a
/// training document.
inline Serialized fewshot_prompt(const FewShotEpisode& ep, std::size_t k, const Vocab& vocab) {
  if (k > ep.support.size()) {
    throw std::invalid_argument("fewshot_prompt: episode has " + std::to_string(ep.support.size()) + " supports, need " +
                                std::to_string(k));
  }
  Document doc;
  doc.id = "prompt";
  for (std::size_t i = 0; i < k; ++i) {
    doc.segments.emplace_back(MediaSegment{doc.media.size()});
    doc.media.push_back(ep.support[i].media);
    doc.segments.emplace_back(TextSegment{ep.support[i].caption});
  }
  doc.segments.emplace_back(MediaSegment{doc.media.size()});
  doc.media.push_back(ep.query);
  return serialize(doc, vocab);
}

/// Greedy continuation until <EOC> or `max_new` tokens, choosing among the
/// first `vocab_size` ids; the <EOC> is not returned. Throws ContextError
/// when the prompt alone does not fit.
inline std::vector<int> greedy_decode(const Model& model, const Serialized& prompt, std::span<const MediaItem> media,
                                      std::size_t vocab_size, std::size_t max_new = 16) {
  const auto context = static_cast<std::size_t>(model.config().max_seq);
  if (prompt.tokens.size() >= context) {
    throw ContextError("prompt of " + std::to_string(prompt.tokens.size()) + " tokens leaves no room in a context of " +
                       std::to_string(context));
  }
  NoGradGuard no_grad;
  std::vector<int> tokens = prompt.tokens;
  std::vector<int> out;
  while (out.size() < max_new && tokens.size() < context) {
    const auto logits = model.forward(tokens, prompt.media_slice, media).logits;
    const std::size_t width = logits.dim(1);
    const auto row = logits.data().subspan((tokens.size() - 1) * width, std::min(width, vocab_size));
    const int next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (next == token::eoc) break;
    out.push_back(next);
    tokens.push_back(next);
  }
  return out;
}

/// Contrastive embeddings of captions, each read as the text after a media
/// token, matching how paired documents are pooled in training.
inline Tensor caption_embeddings(const Model& model, const Vocab& vocab, const std::vector<std::string>& captions) {
  NoGradGuard no_grad;
  std::vector<Tensor> rows;
  for (const auto& caption : captions) {
    auto tokens = std::vector<int>{token::bos, token::visual};
    for (int id : vocab.tokenize(caption)) tokens.push_back(id);
    const std::size_t end = tokens.size();
    tokens.push_back(token::eoc);
    rows.push_back(model.pool_text(model.encode_text_unimodal(tokens), TextSpan{2, end}));
  }
  return l2_normalize(rows.size() == 1 ? rows[0] : concat(rows, 0));
}

inline Tensor media_embedding(const Model& model, const MediaItem& media) {
  NoGradGuard no_grad;
  return l2_normalize(model.pool_visual(model.encode_media(std::span<const MediaItem>(&media, 1)).item(0)));
}

struct FewShotResult {
  std::size_t k = 0;
  double caption_exact_match = 0;
  double retrieval_at_1 = 0;
  std::vector<std::uint8_t> exact;      // per episode
  std::vector<std::uint8_t> retrieved;  // per episode
  std::vector<std::string> generated;
};

/// Evaluates every episode with its first k supports. `class_captions` is
/// the retrieval gallery and must contain every target.
inline FewShotResult eval_fewshot(const Model& model, const Vocab& vocab, const std::vector<FewShotEpisode>& episodes,
                                  std::size_t k, const std::vector<std::string>& class_captions) {
  if (episodes.empty()) throw std::invalid_argument("eval_fewshot: no episodes");
  const Tensor gallery = caption_embeddings(model, vocab, class_captions);
  const std::size_t n_classes = class_captions.size();
  const std::size_t d = gallery.dim(1);

  FewShotResult r;
  r.k = k;
  r.exact.resize(episodes.size());
  r.retrieved.resize(episodes.size());
  r.generated.resize(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t e) {
    const auto& ep = episodes[e];
    const auto target = std::find(class_captions.begin(), class_captions.end(), ep.target);
    if (target == class_captions.end()) throw std::invalid_argument("eval_fewshot: target '" + ep.target + "' not in gallery");

    const Serialized prompt = fewshot_prompt(ep, k, vocab);
    std::vector<MediaItem> media;
    for (std::size_t i = 0; i < k; ++i) media.push_back(ep.support[i].media);
    media.push_back(ep.query);
    r.generated[e] = vocab.detokenize(greedy_decode(model, prompt, media, vocab.size()));
    r.exact[e] = r.generated[e] == normalize_whitespace(ep.target);

    const Tensor query = media_embedding(model, ep.query);
    const auto q = query.data();
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t c = 0; c < n_classes; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(q[j]) * static_cast<double>(gallery.data()[c * d + j]);
      if (s > best_score) best_score = s, best = c;  // ties keep the lower index
    }
    r.retrieved[e] = best == static_cast<std::size_t>(target - class_captions.begin());
  });
  r.caption_exact_match = static_cast<double>(std::count(r.exact.begin(), r.exact.end(), 1)) / episodes.size();
  r.retrieval_at_1 = static_cast<double>(std::count(r.retrieved.begin(), r.retrieved.end(), 1)) / episodes.size();
  return r;
}

/// One-sided exact sign test that `better` beats `base` on paired outcomes:
/// P(Binomial(b + c, 1/2) >= b), with b, c the discordant counts.
struct SignTest {
  std::size_t better_only = 0;
  std::size_t base_only = 0;
  double p_value = 1.0;
};

inline double binomial_upper_tail(std::size_t n, std::size_t b) {
  if (b == 0) return 1.0;
  double p = 0;
  for (std::size_t i = b; i <= n; ++i) {
    const double log_term = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0);
    p += std::exp(log_term);
  }
  return std::min(p, 1.0);
}

inline SignTest sign_test(const std::vector<std::uint8_t>& better, const std::vector<std::uint8_t>& base) {
  if (better.size() != base.size()) throw std::invalid_argument("sign_test: outcome lists differ in length");
  SignTest t;
  for (std::size_t i = 0; i < better.size(); ++i) {
    t.better_only += better[i] && !base[i];
    t.base_only += base[i] && !better[i];
  }
  t.p_value = binomial_upper_tail(t.better_only + t.base_only, t.better_only);
  return t;
}

/// Episodes over the given classes: every support shares the query's class
/// and carries fresh media, so the context holds the answer the query
/// alone may not reveal.
inline std::vector<FewShotEpisode> make_episodes(const SyntheticWorld& world, const std::vector<SyntheticClass>& classes,
                                                 std::size_t n, std::size_t shots, std::uint64_t seed,
                                                 MediaKind kind = MediaKind::image) {
  if (classes.empty()) throw std::invalid_argument("make_episodes: no classes");
  auto rng = derived_rng(seed, {0xe915});
  std::vector<FewShotEpisode> out;
  for (std::size_t e = 0; e < n; ++e) {
    const SyntheticClass c = classes[e % classes.size()];
    FewShotEpisode ep;
    for (std::size_t s = 0; s < shots; ++s) ep.support.push_back({world.media(c, kind, rng), world.caption(c)});
    ep.query = world.media(c, kind, rng);
    ep.target = world.caption(c);
    out.push_back(std::move(ep));
  }
  return out;
}

inline std::vector<std::string> class_captions(const SyntheticWorld& world, const std::vector<SyntheticClass>& classes) {
  std::vector<std::string> out;
  for (const auto& c : classes) out.push_back(world.caption(c));
  return out;
}

}  // namespace cosmo
