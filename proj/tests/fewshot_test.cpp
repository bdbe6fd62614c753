// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "cosmo/fewshot.hpp"
#include "test_support.hpp"

namespace cosmo {
namespace {

Vocab world_vocab(const SyntheticWorld& world) {
  std::vector<std::string> captions;
  for (bool seen : {true, false})
    for (auto c : world.classes(seen)) captions.push_back(world.caption(c));
  return build_vocab(captions, 300);
}

TEST(FewShotPrompt, GoldenTokens) {
  SyntheticWorld world(testing::tiny_world());
  const Vocab vocab = world_vocab(world);
  auto eps = make_episodes(world, {{1, 2}}, 1, 2, 0);
  const auto p = fewshot_prompt(eps[0], 2, vocab);
  const int a = vocab.word_id("a"), color = vocab.word_id("green"), object = vocab.word_id("car");
  ASSERT_GE(a, token::first_word);
  const std::vector<int> want = {token::bos, token::visual, a,      color, object,       token::eoc,
                                 token::visual, a,          color, object, token::eoc, token::visual};
  EXPECT_EQ(p.tokens, want);
  EXPECT_EQ(p.media_slice, (std::vector<MediaSlot>{{1, 0}, {6, 1}, {11, 2}}));

  const auto zero = fewshot_prompt(eps[0], 0, vocab);
  EXPECT_EQ(zero.tokens, (std::vector<int>{token::bos, token::visual}));
  EXPECT_THROW(fewshot_prompt(eps[0], 3, vocab), std::invalid_argument);
}

TEST(FewShotEpisodes, SupportsShareTheQueryClass) {
  SyntheticWorld world(testing::tiny_world());
  const auto classes = world.classes(true);
  auto eps = make_episodes(world, classes, 20, 4, 3);
  ASSERT_EQ(eps.size(), 20u);
  for (std::size_t e = 0; e < eps.size(); ++e) {
    EXPECT_EQ(eps[e].target, world.caption(classes[e % classes.size()]));
    ASSERT_EQ(eps[e].support.size(), 4u);
    for (const auto& s : eps[e].support) {
      EXPECT_EQ(s.caption, eps[e].target);
      EXPECT_NE(s.media.features, eps[e].query.features);
    }
  }
}

TEST(GreedyDecode, ContextOverflowNamesLength) {
  SyntheticWorld world(testing::tiny_world());
  const Vocab vocab = world_vocab(world);
  auto cfg = testing::tiny_model_config(world.config());
  cfg.max_seq = 16;
  const Model model = Model::build(cfg, 0);
  auto eps = make_episodes(world, world.classes(true), 1, 4, 0);
  const auto prompt = fewshot_prompt(eps[0], 4, vocab);  // 22 tokens
  std::vector<MediaItem> media;
  for (const auto& s : eps[0].support) media.push_back(s.media);
  media.push_back(eps[0].query);
  try {
    greedy_decode(model, prompt, media, vocab.size());
    FAIL() << "expected ContextError";
  } catch (const ContextError& e) {
    EXPECT_NE(std::string(e.what()).find("22 tokens"), std::string::npos) << e.what();
  }
  const auto short_prompt = fewshot_prompt(eps[0], 1, vocab);
  std::vector<MediaItem> two = {eps[0].support[0].media, eps[0].query};
  EXPECT_LE(short_prompt.tokens.size() + greedy_decode(model, short_prompt, two, vocab.size()).size(), 16u);
}

TEST(GreedyDecode, FollowsForwardArgmax) {
  SyntheticWorld world(testing::tiny_world());
  const Vocab vocab = world_vocab(world);
  const Model model = Model::build(testing::tiny_model_config(world.config()), 2);
  auto eps = make_episodes(world, world.classes(true), 1, 1, 0);
  const auto prompt = fewshot_prompt(eps[0], 1, vocab);
  std::vector<MediaItem> media = {eps[0].support[0].media, eps[0].query};
  const auto out = greedy_decode(model, prompt, media, vocab.size(), 3);
  auto tokens = prompt.tokens;
  for (int next : out) {
    const auto logits = model.forward(tokens, prompt.media_slice, media).logits;
    const auto v = logits.dim(1);
    const auto row = logits.data().subspan((tokens.size() - 1) * v, vocab.size());
    ASSERT_EQ(next, std::max_element(row.begin(), row.end()) - row.begin());
    tokens.push_back(next);
  }
}

TEST(EvalFewShot, UntrainedRetrievalIsNearChance) {
  // A fixed random model ranks each class the same way in every episode, so
  // its hits are decided per class; chance holds on average over inits.
  SyntheticConfig wc = testing::tiny_world();
  SyntheticWorld world(wc);
  const Vocab vocab = world_vocab(world);
  const auto classes = world.classes(true);
  const auto captions = class_captions(world, classes);
  const auto eps = make_episodes(world, classes, 2 * classes.size(), 0, 1);
  const std::size_t n_models = 24;
  double mean = 0;
  for (std::uint64_t seed = 0; seed < n_models; ++seed) {
    const Model model = Model::build(testing::tiny_model_config(wc), seed);
    const auto r = eval_fewshot(model, vocab, eps, 0, captions);
    ASSERT_EQ(r.exact.size(), eps.size());
    mean += r.retrieval_at_1 / static_cast<double>(n_models);
  }
  const double chance = 1.0 / static_cast<double>(classes.size());
  const double sigma = std::sqrt(chance * (1 - chance) / static_cast<double>(n_models * classes.size()));
  EXPECT_NEAR(mean, chance, 3 * sigma);
}

TEST(SignTest, ExactTail) {
  EXPECT_DOUBLE_EQ(binomial_upper_tail(5, 5), 1.0 / 32);
  EXPECT_DOUBLE_EQ(binomial_upper_tail(0, 0), 1.0);
  EXPECT_NEAR(binomial_upper_tail(10, 8), 56.0 / 1024, 1e-12);
  // Brute-force enumeration of every outcome for small n.
  for (std::size_t n = 1; n <= 14; ++n)
    for (std::size_t b = 0; b <= n; ++b) {
      std::size_t hits = 0;
      for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask)
        hits += static_cast<std::size_t>(__builtin_popcountll(mask)) >= b;
      ASSERT_NEAR(binomial_upper_tail(n, b), static_cast<double>(hits) / static_cast<double>(1u << n), 1e-12);
    }

  const auto t = sign_test({1, 1, 1, 0, 1, 1, 1}, {0, 0, 1, 0, 0, 0, 0});
  EXPECT_EQ(t.better_only, 5u);
  EXPECT_EQ(t.base_only, 0u);
  EXPECT_DOUBLE_EQ(t.p_value, 1.0 / 32);
  EXPECT_THROW(sign_test({1}, {}), std::invalid_argument);
}

}  // namespace
}  // namespace cosmo
