// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Pre-training pair selection: keep the better-aligned half, cluster the
// embeddings, then draw from each cluster in proportion to its size,
// spreading picks evenly over distance-to-centroid ranks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cosmo/parallel.hpp"
#include "cosmo/shard.hpp"

namespace cosmo {

struct EmbeddedPair {
  std::string id;
  std::vector<double> embedding;
  double similarity = 0;
};

struct Clustering {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;        // [k, dim]
  std::vector<std::size_t> assignment;  // per input pair
  double inertia = 0;
  std::vector<double> inertia_history;  // after every Lloyd iteration
  std::size_t iterations = 0;

  const double* centroid(std::size_t c) const { return centroids.data() + c * dim; }
};

/// The ceil(n/2) highest-similarity pairs; equal scores keep lower ids.
inline std::vector<EmbeddedPair> filter_half(std::vector<EmbeddedPair> pairs) {
  if (pairs.size() < 2) throw std::invalid_argument("filter_half: need at least 2 pairs");
  std::sort(pairs.begin(), pairs.end(), [](const EmbeddedPair& a, const EmbeddedPair& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
  });
  pairs.resize((pairs.size() + 1) / 2);
  return pairs;
}

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Assignment distances run in
/// parallel; reductions are sequential in input order, so results do not
/// depend on the worker count.
inline Clustering kmeans(const std::vector<EmbeddedPair>& pairs, std::size_t k, std::size_t max_iters,
                         std::uint64_t seed) {
  const std::size_t n = pairs.size();
  if (k == 0 || k > n) {
    throw std::invalid_argument("kmeans: k=" + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
  }
  if (max_iters < 1) throw std::invalid_argument("kmeans: max_iters must be at least 1");
  const std::size_t d = pairs.front().embedding.size();
  std::vector<double> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (pairs[i].embedding.size() != d) throw std::invalid_argument("kmeans: embedding dimensions differ");
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(pairs[i].embedding[j])) throw std::invalid_argument("kmeans: non-finite embedding");
      x[i * d + j] = pairs[i].embedding[j];
    }
  }
  auto row = [&](std::size_t i) { return x.data() + i * d; };

  Clustering c;
  c.k = k;
  c.dim = d;
  c.centroids.assign(k * d, 0);
  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::copy_n(row(first), d, c.centroids.begin());
  for (std::size_t m = 1; m < k; ++m) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], detail::sq_dist(row(i), c.centroid(m - 1), d));
      total += nearest[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = std::uniform_real_distribution<double>(0, total)(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (nearest[i] > 0 && r < nearest[i]) {
          pick = i;
          break;
        }
        r -= nearest[i];
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    std::copy_n(row(pick), d, c.centroids.begin() + static_cast<std::ptrdiff_t>(m * d));
  }

  c.assignment.assign(n, k);  // k = unassigned
  std::vector<std::size_t> next(n);
  std::vector<double> dist(n);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    parallel_for(n, [&](std::size_t i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < k; ++m) {
        const double dd = detail::sq_dist(row(i), c.centroid(m), d);
        if (dd < best_d) {
          best_d = dd;
          best = m;
        }
      }
      next[i] = best;
      dist[i] = best_d;
    });
    if (next == c.assignment) break;
    c.assignment = next;
    ++c.iterations;

    // Repair empty clusters with the farthest member of the largest one.
    std::vector<std::size_t> sizes(k, 0);
    for (auto a : c.assignment) ++sizes[a];
    for (std::size_t m = 0; m < k; ++m) {
      if (sizes[m] != 0) continue;
      const std::size_t donor = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (c.assignment[i] == donor && (far == n || dist[i] > dist[far])) far = i;
      c.assignment[far] = m;
      dist[far] = 0;
      --sizes[donor];
      sizes[m] = 1;
      std::copy_n(row(far), d, c.centroids.begin() + static_cast<std::ptrdiff_t>(m * d));
    }

    std::vector<double> sums(k * d, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) sums[c.assignment[i] * d + j] += x[i * d + j];
    for (std::size_t m = 0; m < k; ++m)
      for (std::size_t j = 0; j < d; ++j) c.centroids[m * d + j] = sums[m * d + j] / static_cast<double>(sizes[m]);

    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) inertia += detail::sq_dist(row(i), c.centroid(c.assignment[i]), d);
    c.inertia_history.push_back(inertia);
  }
  c.inertia = 0;
  for (std::size_t i = 0; i < n; ++i) c.inertia += detail::sq_dist(row(i), c.centroid(c.assignment[i]), d);
  return c;
}

/// Largest-remainder apportionment of `total` seats by `sizes`; remainder
/// ties go to the lower index.
inline std::vector<std::size_t> largest_remainder_quotas(const std::vector<std::size_t>& sizes, std::size_t total) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total > n) throw std::invalid_argument("quotas: cannot take " + std::to_string(total) + " of " + std::to_string(n));
  std::vector<std::size_t> quota(sizes.size(), 0);
  if (n == 0) return quota;
  std::vector<std::size_t> rem(sizes.size());
  std::size_t given = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    quota[c] = total * sizes[c] / n;
    rem[c] = total * sizes[c] % n;
    given += quota[c];
  }
  std::vector<std::size_t> order(sizes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t r = 0; given < total; ++r, ++given) ++quota[order[r]];
  return quota;
}

enum class WithinCluster { even_rank, uniform_random };

NLOHMANN_JSON_SERIALIZE_ENUM(WithinCluster, {{WithinCluster::even_rank, "even_rank"},
                                             {WithinCluster::uniform_random, "uniform_random"}})

/// Selects exactly m_total ids. Cluster quotas are proportional to cluster
/// size; inside a cluster, members sorted by distance to the centroid are
/// picked at ranks floor(j * size / quota).
template <class Rng>
std::vector<std::string> distance_uniform_sample(const Clustering& clustering, const std::vector<EmbeddedPair>& pairs,
                                                 std::size_t m_total, Rng& rng,
                                                 WithinCluster mode = WithinCluster::even_rank) {
  if (clustering.assignment.size() != pairs.size()) {
    throw std::invalid_argument("distance_uniform_sample: clustering does not cover the pairs");
  }
  std::vector<std::vector<std::size_t>> members(clustering.k);
  for (std::size_t i = 0; i < pairs.size(); ++i) members[clustering.assignment[i]].push_back(i);
  std::vector<std::size_t> sizes;
  for (const auto& m : members) sizes.push_back(m.size());
  const auto quota = largest_remainder_quotas(sizes, m_total);

  std::vector<std::string> out;
  for (std::size_t c = 0; c < clustering.k; ++c) {
    auto& mem = members[c];
    std::vector<double> dist(pairs.size());
    for (auto i : mem) dist[i] = detail::sq_dist(pairs[i].embedding.data(), clustering.centroid(c), clustering.dim);
    std::sort(mem.begin(), mem.end(), [&](std::size_t a, std::size_t b) {
      if (dist[a] != dist[b]) return dist[a] < dist[b];
      return pairs[a].id < pairs[b].id;
    });
    if (mode == WithinCluster::uniform_random) {
      std::vector<std::size_t> picked;
      std::sample(mem.begin(), mem.end(), std::back_inserter(picked), quota[c], rng);
      for (auto i : picked) out.push_back(pairs[i].id);
    } else {
      for (std::size_t j = 0; j < quota[c]; ++j) out.push_back(pairs[mem[j * mem.size() / quota[c]]].id);
    }
  }
  return out;
}

// ---- files -------------------------------------------------------------------

/// Embeddings: `<path>` holds little-endian float32 rows, `<path>.json` is
/// {"dim": D, "ids": [...]} in row order. Similarities: CSV lines "id,score"
/// (a non-numeric first line is treated as a header).
inline std::vector<EmbeddedPair> read_embedded_pairs(const std::filesystem::path& embeddings,
                                                     const std::filesystem::path& sims) {
  const json index = io::read_json_file(embeddings.string() + ".json");
  const auto dim = index.at("dim").get<std::size_t>();
  const auto ids = index.at("ids").get<std::vector<std::string>>();
  std::ifstream bin(embeddings, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + embeddings.string());
  std::vector<EmbeddedPair> pairs(ids.size());
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    pairs[i].id = ids[i];
    if (!where.emplace(ids[i], i).second) throw FormatError("duplicate id '" + ids[i] + "' in embedding index");
    pairs[i].embedding.resize(dim);
    for (auto& v : pairs[i].embedding) v = io::read_f32(bin);
  }
  std::ifstream csv(sims);
  if (!csv) throw std::runtime_error("cannot open " + sims.string());
  std::string line;
  std::size_t lineno = 0, seen = 0;
  while (std::getline(csv, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError(sims.string() + ":" + std::to_string(lineno) + ": expected id,score");
    const std::string id = line.substr(0, comma);
    double score = 0;
    try {
      std::size_t used = 0;
      score = std::stod(line.substr(comma + 1), &used);
    } catch (const std::exception&) {
      if (lineno == 1) continue;
      throw FormatError(sims.string() + ":" + std::to_string(lineno) + ": bad score");
    }
    auto it = where.find(id);
    if (it == where.end()) throw FormatError(sims.string() + ":" + std::to_string(lineno) + ": unknown id '" + id + "'");
    pairs[it->second].similarity = score;
    ++seen;
  }
  if (seen != pairs.size()) {
    throw FormatError("similarity file scores " + std::to_string(seen) + " of " + std::to_string(pairs.size()) + " ids");
  }
  return pairs;
}

inline void write_embedded_pairs(const std::filesystem::path& embeddings, const std::filesystem::path& sims,
                                 const std::vector<EmbeddedPair>& pairs) {
  std::ofstream bin(embeddings, std::ios::binary);
  std::ofstream csv(sims);
  if (!bin || !csv) throw std::runtime_error("cannot write " + embeddings.string());
  json ids = json::array();
  const std::size_t dim = pairs.empty() ? 0 : pairs.front().embedding.size();
  csv << "id,score\n";
  for (const auto& p : pairs) {
    ids.push_back(p.id);
    for (double v : p.embedding) io::write_f32(bin, static_cast<float>(v));
    std::ostringstream s;
    s.precision(17);
    s << p.id << ',' << p.similarity << '\n';
    csv << s.str();
  }
  io::write_json_file(embeddings.string() + ".json", json{{"dim", dim}, {"ids", ids}});
}

struct SelectOptions {
  std::size_t k = 64;
  std::size_t target = 0;
  std::size_t max_iters = 100;
  bool skip_filter = false;
  WithinCluster mode = WithinCluster::even_rank;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SelectOptions, k, target, max_iters, skip_filter, mode)

/// filter_half -> kmeans -> distance_uniform_sample.
inline std::vector<std::string> select_corpus(std::vector<EmbeddedPair> pairs, const SelectOptions& options,
                                              std::uint64_t seed) {
  if (!options.skip_filter) pairs = filter_half(std::move(pairs));
  if (options.target > pairs.size()) {
    throw std::invalid_argument("select_corpus: target " + std::to_string(options.target) + " exceeds the " +
                                std::to_string(pairs.size()) + " pairs available");
  }
  // Input order must not matter: cluster a canonical id ordering.
  std::sort(pairs.begin(), pairs.end(), [](const EmbeddedPair& a, const EmbeddedPair& b) { return a.id < b.id; });
  const auto clustering = kmeans(pairs, std::min(options.k, pairs.size()), options.max_iters, seed);
  auto rng = derived_rng(seed, {1});
  return distance_uniform_sample(clustering, pairs, options.target, rng, options.mode);
}

}  // namespace cosmo
