// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "cosmo/corpus_select.hpp"

namespace cosmo {
namespace {

std::vector<EmbeddedPair> random_pairs(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 1);
  std::vector<EmbeddedPair> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "p%04zu", i);
    out[i].id = id;
    out[i].embedding.resize(d);
    for (auto& v : out[i].embedding) v = g(rng);
    out[i].similarity = std::uniform_real_distribution<double>(0, 1)(rng);
  }
  return out;
}

// Point p in blob b sits at center (10*b, 0) with spread 1 (separation 10x).
std::vector<EmbeddedPair> blobs(std::size_t per_blob, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<EmbeddedPair> out;
  for (int b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < per_blob; ++i)
      out.push_back({"b" + std::to_string(b) + "_" + std::to_string(i), {10.0 * b + u(rng), u(rng)}, 0.5});
  return out;
}

TEST(FilterHalf, Examples) {
  std::vector<EmbeddedPair> two = {{"a", {0}, 0.1}, {"b", {0}, 0.9}};
  auto kept = filter_half(two);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].id, "b");

  std::vector<EmbeddedPair> five;
  for (int i = 0; i < 5; ++i) five.push_back({std::to_string(i), {0}, 0.1 * i});
  EXPECT_EQ(filter_half(five).size(), 3u);

  std::vector<EmbeddedPair> equal = {{"d", {0}, 0.5}, {"a", {0}, 0.5}, {"c", {0}, 0.5}, {"b", {0}, 0.5}};
  auto ties = filter_half(equal);
  ASSERT_EQ(ties.size(), 2u);
  EXPECT_EQ(ties[0].id, "a");
  EXPECT_EQ(ties[1].id, "b");

  EXPECT_THROW(filter_half({{"a", {0}, 0}}), std::invalid_argument);
}

TEST(KMeans, SeparatedBlobs) {
  std::mt19937_64 rng(1);
  auto pts = blobs(20, rng);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = kmeans(pts, 2, 50, seed);
    for (std::size_t i = 0; i < 20; ++i) {
      EXPECT_EQ(c.assignment[i], c.assignment[0]);
      EXPECT_EQ(c.assignment[20 + i], c.assignment[20]);
    }
    EXPECT_NE(c.assignment[0], c.assignment[20]);
  }
}

TEST(KMeans, KEqualsNHasZeroInertia) {
  std::mt19937_64 rng(2);
  auto pts = random_pairs(12, 3, rng);
  auto c = kmeans(pts, 12, 20, 5);
  EXPECT_NEAR(c.inertia, 0.0, 1e-20);
  EXPECT_EQ(std::set<std::size_t>(c.assignment.begin(), c.assignment.end()).size(), 12u);
}

TEST(KMeans, Errors) {
  std::mt19937_64 rng(3);
  auto pts = random_pairs(3, 2, rng);
  EXPECT_THROW(kmeans(pts, 4, 10, 0), std::invalid_argument);
  EXPECT_THROW(kmeans(pts, 2, 0, 0), std::invalid_argument);
}

TEST(KMeans, InertiaNonIncreasing) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    auto pts = random_pairs(80, 4, rng);
    auto c = kmeans(pts, 6, 100, seed);
    ASSERT_FALSE(c.inertia_history.empty());
    for (std::size_t i = 1; i < c.inertia_history.size(); ++i)
      ASSERT_LE(c.inertia_history[i], c.inertia_history[i - 1] * (1 + 1e-12)) << seed << " iter " << i;
    // Reported inertia matches its definition.
    double direct = 0;
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const double diff = pts[i].embedding[j] - c.centroid(c.assignment[i])[j];
        direct += diff * diff;
      }
    ASSERT_NEAR(c.inertia, direct, 1e-9 * direct);
  }
}

TEST(KMeans, SameResultAcrossWorkerCounts) {
  std::mt19937_64 rng(4);
  auto pts = random_pairs(200, 3, rng);
  setenv("COSMO_NUM_WORKERS", "1", 1);
  auto one = kmeans(pts, 5, 50, 9);
  setenv("COSMO_NUM_WORKERS", "4", 1);
  auto many = kmeans(pts, 5, 50, 9);
  unsetenv("COSMO_NUM_WORKERS");
  EXPECT_EQ(one.assignment, many.assignment);
  EXPECT_EQ(one.centroids, many.centroids);
}

TEST(Quotas, LargestRemainder) {
  EXPECT_EQ(largest_remainder_quotas({30, 10}, 4), (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(largest_remainder_quotas({1, 1, 1}, 2), (std::vector<std::size_t>{1, 1, 0}));
  EXPECT_EQ(largest_remainder_quotas({5, 3, 2}, 10), (std::vector<std::size_t>{5, 3, 2}));
  EXPECT_THROW(largest_remainder_quotas({1}, 2), std::invalid_argument);
}

// Reference apportionment by exact rational comparison.
std::vector<std::size_t> reference_quotas(const std::vector<std::size_t>& sizes, std::size_t m) {
  std::size_t n = 0;
  for (auto s : sizes) n += s;
  std::vector<std::size_t> q(sizes.size());
  std::vector<std::pair<double, std::size_t>> frac;
  std::size_t given = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    const double exact = static_cast<double>(m) * static_cast<double>(sizes[c]) / static_cast<double>(n);
    q[c] = static_cast<std::size_t>(std::floor(exact + 1e-12));
    given += q[c];
    frac.push_back({exact - static_cast<double>(q[c]), c});
  }
  std::stable_sort(frac.begin(), frac.end(), [](auto a, auto b) { return a.first > b.first + 1e-12; });
  for (std::size_t r = 0; given < m; ++r, ++given) ++q[frac[r].second];
  return q;
}

TEST(DistanceUniformSample, OneClusterEvenRanks) {
  std::vector<EmbeddedPair> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({"x" + std::to_string(i), {static_cast<double>(i)}, 0});
  Clustering c;
  c.k = 1;
  c.dim = 1;
  c.centroids = {-1.0};  // distance order equals index order
  c.assignment.assign(10, 0);
  std::mt19937_64 rng(0);
  EXPECT_EQ(distance_uniform_sample(c, pts, 5, rng), (std::vector<std::string>{"x0", "x2", "x4", "x6", "x8"}));
  EXPECT_EQ(distance_uniform_sample(c, pts, 10, rng).size(), 10u);
  auto all = distance_uniform_sample(c, pts, 10, rng);
  EXPECT_EQ(std::set<std::string>(all.begin(), all.end()).size(), 10u);
}

TEST(DistanceUniformSample, ExactCountAndQuotas) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    auto pts = random_pairs(60 + seed % 40, 3, rng);
    auto c = kmeans(pts, 5, 50, seed);
    const std::size_t m = 1 + rng() % pts.size();
    auto ids = distance_uniform_sample(c, pts, m, rng);
    ASSERT_EQ(ids.size(), m);
    ASSERT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), m);
    std::vector<std::size_t> sizes(5, 0), got(5, 0);
    std::map<std::string, std::size_t> cluster_of;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ++sizes[c.assignment[i]];
      cluster_of[pts[i].id] = c.assignment[i];
    }
    for (const auto& id : ids) ++got[cluster_of[id]];
    ASSERT_EQ(got, reference_quotas(sizes, m)) << seed;
  }
}

TEST(DistanceUniformSample, CoversNearAndFarWhenQuotaIsLarge) {
  std::mt19937_64 rng(8);
  auto pts = random_pairs(300, 2, rng);
  auto c = kmeans(pts, 3, 50, 1);
  auto ids = distance_uniform_sample(c, pts, 60, rng);
  std::set<std::string> chosen(ids.begin(), ids.end());
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<std::pair<double, std::string>> members;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (c.assignment[i] == k) members.push_back({detail::sq_dist(pts[i].embedding.data(), c.centroid(k), 2), pts[i].id});
    std::sort(members.begin(), members.end());
    const std::size_t decile = (members.size() + 9) / 10;
    bool near = false, far = false;
    for (std::size_t r = 0; r < members.size(); ++r) {
      if (!chosen.count(members[r].second)) continue;
      near = near || r < decile;
      far = far || r >= members.size() - decile;
    }
    EXPECT_TRUE(near && far) << "cluster " << k;
  }
}

TEST(SelectCorpus, OrderIndependentAndFileRoundTrip) {
  std::mt19937_64 rng(9);
  auto pts = random_pairs(100, 4, rng);
  SelectOptions opt;
  opt.k = 4;
  opt.target = 20;
  auto a = select_corpus(pts, opt, 3);
  auto shuffled = pts;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  auto b = select_corpus(shuffled, opt, 3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 20u);

  const auto dir = std::filesystem::temp_directory_path() / "cosmo_select_test";
  std::filesystem::create_directories(dir);
  write_embedded_pairs(dir / "emb.bin", dir / "sims.csv", pts);
  auto back = read_embedded_pairs(dir / "emb.bin", dir / "sims.csv");
  ASSERT_EQ(back.size(), pts.size());
  EXPECT_EQ(back[5].id, pts[5].id);
  EXPECT_NEAR(back[5].embedding[2], pts[5].embedding[2], 1e-6);
  EXPECT_DOUBLE_EQ(back[5].similarity, pts[5].similarity);
  std::filesystem::remove_all(dir);

  opt.target = 51;
  EXPECT_THROW(select_corpus(pts, opt, 3), std::invalid_argument);
}

}  // namespace
}  // namespace cosmo
