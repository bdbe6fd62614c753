// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// The `cosmo` command line. Exit codes: 0 success, 1 bad arguments or
// configuration (message on stderr, usage for unknown commands), 2 failure
// while running. Every command takes --config (a JSON file; each command
// reads its own section) and --seed.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cosmo/corpus_select.hpp"
#include "cosmo/fewshot.hpp"
#include "cosmo/gradcheck.hpp"
#include "cosmo/interleave_prep.hpp"
#include "cosmo/interlink.hpp"
#include "cosmo/synthetic.hpp"
#include "cosmo/trainer.hpp"

namespace cosmo::cli {

/// Invalid arguments or configuration; maps to exit code 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  json config = json::object();

  std::filesystem::path base_dir() const {
    return config_path.empty() ? std::filesystem::current_path()
                               : std::filesystem::absolute(config_path).parent_path();
  }

  json section(const char* key) const { return config.value(key, json::object()); }

  std::uint64_t seed_or(std::uint64_t fallback) const { return seed ? *seed : fallback; }

  void load() {
    if (config_path.empty()) return;
    if (!std::filesystem::is_regular_file(config_path)) throw UsageError("config file not found: " + config_path);
    try {
      config = io::read_json_file(config_path);
    } catch (const std::exception& e) {
      throw UsageError(std::string("bad config file: ") + e.what());
    }
    if (!config.is_object()) throw UsageError("config file " + config_path + " must hold a JSON object");
  }
};

// Options a JSON section may set are read first; flags given on the
// command line then override them.
template <class T>
T from_section(const json& j, const char* what) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string(what) + ": " + e.what());
  }
}

inline SyntheticWorld synthetic_world(const json& j) {
  return SyntheticWorld(from_section<SyntheticConfig>(j, "synthetic config"));
}

/// Sources listed without shards draw their documents from the config's
/// "synthetic" section.
inline std::vector<TrainSource> resolve_sources(const RunConfig& run, const Common& common) {
  auto sources = load_sources(run.sources, common.base_dir());
  std::optional<std::array<std::vector<Document>, 4>> synthetic;
  for (auto& s : sources) {
    if (!s.spec.shards.empty()) continue;
    if (!common.config.contains("synthetic")) {
      throw UsageError("source '" + s.spec.name + "' lists no shards and the config has no synthetic section");
    }
    if (!synthetic) synthetic = synthetic_world(common.section("synthetic")).corpus();
    s.docs = (*synthetic)[static_cast<std::size_t>(s.spec.data_type)];
  }
  return sources;
}

inline RunConfig run_config(const Common& common) {
  RunConfig run = from_section<RunConfig>(common.config, "run config");
  if (common.seed) run.seed = *common.seed;
  run.validate();
  return run;
}

inline void print_json(std::ostream& out, const json& j) { out << j.dump(2) << '\n'; }

inline int cmd_prep_interleave(const Common& common, const std::string& in, const std::string& out_prefix,
                               const json& overrides, std::ostream& out) {
  json j = common.section("prep");
  j.update(overrides);
  const auto options = from_section<PrepOptions>(j, "prep options");
  MockCaptioner captioner;
  const auto s = prep_shard(in, out_prefix, options, captioner, common.seed_or(common.config.value("seed", 0ull)));
  json r = {{"read", s.read}, {"written", s.written}, {"dropped", s.dropped}, {"replaced_spans", s.replaced_spans}};
  if (s.stats) r["stats"] = to_json(*s.stats);
  print_json(out, r);
  return 0;
}

inline int cmd_select_corpus(const Common& common, const std::string& embeddings, const std::string& sims,
                             const json& overrides, const std::string& out_path, std::ostream& out) {
  json j = common.section("select");
  j.update(overrides);
  const auto options = from_section<SelectOptions>(j, "select options");
  if (options.target == 0) throw UsageError("select-corpus: --target must be positive");
  if (options.k == 0) throw UsageError("select-corpus: --k must be positive");
  const auto ids = select_corpus(read_embedded_pairs(embeddings, sims), options,
                                 common.seed_or(common.config.value("seed", 0ull)));
  if (out_path.empty()) {
    for (const auto& id : ids) out << id << '\n';
  } else {
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot write " + out_path);
    for (const auto& id : ids) f << id << '\n';
    print_json(out, {{"selected", ids.size()}, {"out", out_path}});
  }
  return 0;
}

inline int cmd_segment_shots(const Common& common, const std::string& features, const json& overrides,
                             std::ostream& out) {
  json j = common.section("segment");
  j.update(overrides);
  const std::string mode = j.value("mode", std::string("auto"));
  const auto max_shots = j.value("max_shots", std::size_t{16});
  const double penalty = j.value("penalty", 1.0);
  if (mode != "auto" && mode != "fixed") throw UsageError("segment-shots: --mode must be auto or fixed");
  if (max_shots < 1) throw UsageError("segment-shots: --max-shots must be at least 1");
  if (!(penalty >= 0)) throw UsageError("segment-shots: --penalty must be non-negative");
  const auto seq = io::read_json_file(features).get<FrameFeatureSeq>();
  // A budget of S shots is S - 1 cuts.
  const auto kts_mode = mode == "auto" ? KtsMode::automatic(max_shots - 1, penalty) : KtsMode::fixed(max_shots - 1);
  const auto b = kts_segment(seq, kts_mode);
  json segments = json::array();
  for (auto [begin, end] : segment_ranges(b, seq.n_frames)) {
    json s = {{"begin", begin}, {"end", end}};
    if (!seq.timestamps.empty()) s["start_time"] = seq.timestamps[begin], s["end_time"] = seq.timestamps[end - 1];
    segments.push_back(std::move(s));
  }
  print_json(out, {{"cuts", b.cuts}, {"scatter", b.scatter}, {"segments", segments}});
  return 0;
}

inline int cmd_gen_interlink(const Common& common, const std::string& clips, const std::string& out_prefix,
                             const json& overrides, std::ostream& out) {
  json j = common.section("interlink");
  j.update(overrides);
  const std::string client_kind = j.value("client", std::string("mock"));
  const auto history = j.value("history", kDefaultHistory);
  const auto limit = j.value("limit", worker_count());
  std::unique_ptr<AnnotatorClient> client;
  if (client_kind == "mock") {
    client = std::make_unique<MockAnnotator>();
  } else if (client_kind == "http") {
    const std::string endpoint = j.value("endpoint", std::string());
    if (endpoint.empty()) throw UsageError("gen-interlink: --client http needs --endpoint");
    client = std::make_unique<HttpAnnotator>(endpoint, j.value("timeout", 30.0));
  } else {
    throw UsageError("gen-interlink: --client must be mock or http");
  }
  if (limit < 1) throw UsageError("gen-interlink: --limit must be at least 1");

  const auto jobs = read_clip_dir(clips);
  const auto results = annotate_videos(jobs, *client, limit, history);
  json quarantine = json::object();
  {
    ShardWriter writer(out_prefix);
    for (std::size_t i = 0; i < results.size(); ++i) {
      if (results[i].doc) writer.write(*results[i].doc);
      if (!results[i].quarantine.empty()) quarantine[jobs[i].id] = to_json(results[i].quarantine);
    }
  }
  const auto s = interlink_stats(results);
  const json stats = {{"videos", s.videos},
                      {"clips", s.clips},
                      {"quarantined", s.quarantined},
                      {"avg_words_per_clip", s.avg_words_per_clip}};
  io::write_json_file(out_prefix + ".quarantine.json", quarantine);
  io::write_json_file(out_prefix + ".stats.json", stats);
  print_json(out, stats);
  return 0;
}

inline int cmd_train(const Common& common, const std::string& out_dir, const std::string& resume,
                     long checkpoint_every, std::ostream& out) {
  const RunConfig run = run_config(common);
  auto sources = resolve_sources(run, common);
  Vocab vocab = build_source_vocab(sources, run.vocab_max);
  Trainer trainer(Model::build(run.model, run.seed), std::move(vocab), std::move(sources), run.train, run.seed);
  if (!resume.empty()) trainer.restore(resume);

  std::filesystem::create_directories(out_dir);
  const auto dir = std::filesystem::path(out_dir);
  std::ofstream metrics(dir / "metrics.ndjson", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.ndjson").string());
  StepMetrics last;
  while (trainer.step_count() < run.train.schedule.max_steps) {
    last = trainer.step();
    Trainer::write_metrics(last, metrics);
    if (checkpoint_every > 0 && trainer.step_count() % checkpoint_every == 0) {
      trainer.save(dir / ("step-" + std::to_string(trainer.step_count())));
    }
  }
  metrics.flush();
  trainer.save(dir / "final");
  print_json(out, {{"steps", trainer.step_count()},
                   {"final_combined", last.combined},
                   {"guard_events", trainer.guard_events().size()},
                   {"checkpoint", (dir / "final").string()}});
  return 0;
}

inline int cmd_eval_fewshot(const Common& common, const std::string& ckpt, const std::string& synthetic,
                            std::vector<std::size_t> ks, std::size_t episodes, bool unseen, std::ostream& out) {
  if (ks.empty()) throw UsageError("eval-fewshot: give at least one --k");
  if (episodes == 0) throw UsageError("eval-fewshot: --episodes must be positive");
  json world_json;
  if (!synthetic.empty()) {
    auto path = std::filesystem::path(synthetic);
    if (std::filesystem::is_directory(path)) path /= "synthetic.json";
    world_json = io::read_json_file(path);
  } else if (common.config.contains("synthetic")) {
    world_json = common.section("synthetic");
  } else {
    throw UsageError("eval-fewshot: needs --synthetic or a config with a synthetic section");
  }
  const SyntheticWorld world = synthetic_world(world_json);
  const auto seen = world.classes(true);
  const auto queried = unseen ? world.classes(false) : seen;
  if (queried.empty()) throw UsageError("eval-fewshot: --unseen needs a world with held-out pairings");
  auto gallery = class_captions(world, seen);
  if (unseen)
    for (const auto& c : class_captions(world, queried)) gallery.push_back(c);

  const auto loaded = load_model(ckpt);
  const std::size_t shots = *std::max_element(ks.begin(), ks.end());
  const auto eps = make_episodes(world, queried, episodes, shots, common.seed_or(common.config.value("seed", 0ull)));
  json results = json::array();
  std::vector<FewShotResult> all;
  for (std::size_t k : ks) {
    all.push_back(eval_fewshot(loaded.model, loaded.vocab, eps, k, gallery));
    results.push_back({{"k", k},
                       {"caption_exact_match", all.back().caption_exact_match},
                       {"retrieval_at_1", all.back().retrieval_at_1}});
  }
  json report = {{"episodes", episodes}, {"unseen", unseen}, {"results", results}};
  if (all.size() >= 2) {
    const auto t = sign_test(all.back().exact, all.front().exact);
    report["sign_test"] = {{"better", ks.back()},
                           {"base", ks.front()},
                           {"better_only", t.better_only},
                           {"base_only", t.base_only},
                           {"p_value", t.p_value}};
  }
  print_json(out, report);
  return 0;
}

inline int cmd_grad_check(const Common& common, double eps, double tolerance, std::ostream& out) {
  const auto model = from_section<ModelConfig>(common.section("model"), "model config");
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto report = check_model_gradients(model, common.seed_or(common.config.value("seed", 0ull)), eps);
  for (const auto& [name, err] : report.groups) out << name << ' ' << err << '\n';
  out << "max relative error " << report.max_error << '\n';
  return report.max_error < tolerance ? 0 : 2;
}

inline int cmd_make_synthetic(const Common& common, const std::string& out_dir, std::ostream& out) {
  auto config = from_section<SyntheticConfig>(common.section("synthetic"), "synthetic config");
  if (common.seed) config.seed = *common.seed;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const SyntheticWorld world(config);
  write_synthetic_corpus(world, out_dir);
  json counts = json::object();
  for (std::size_t t = 0; t < 4; ++t) counts[to_string(static_cast<DataType>(t))] = config.docs_per_type[t];
  print_json(out, {{"out", out_dir}, {"documents", counts}});
  return 0;
}

/// Parses and runs one command. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"cosmo: interleaved multimodal pretraining toolkit", "cosmo"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file");
    sub->add_option("--seed", common.seed, "random seed (overrides the config)");
  };
  json overrides = json::object();
  // Registers a flag whose value, when given, overrides `key` in the section.
  auto set_if = [&](CLI::Option* opt, const char* key, auto& value) {
    return [opt, key, &value, &overrides] {
      if (opt->count() > 0) overrides[key] = value;
    };
  };
  std::vector<std::function<void()>> collect;

  std::string in, out_path, embeddings, sims, features, clips, ckpt, synthetic, resume;
  double sigma = 0, clamp = 0, replace_below = 0, penalty = 1.0, timeout = 30.0, eps = 1e-6, tolerance = 1e-4;
  int min_image_px = 0;
  std::size_t k = 0, target = 0, max_iters = 0, max_shots = 16, history = kDefaultHistory, limit = 1, episodes = 500;
  std::string mode = "auto", client = "mock", endpoint;
  bool mmc4 = false, uniform_random = false, skip_filter = false, unseen = false;
  std::vector<std::size_t> ks = {0, 4};
  long checkpoint_every = 0;

  auto* prep = app.add_subcommand("prep-interleave", "match images to texts and write a prepared shard");
  add_common(prep);
  prep->add_option("--in", in, "input shard prefix")->required();
  prep->add_option("--out", out_path, "output shard prefix")->required();
  collect.push_back(set_if(prep->add_option("--sigma", sigma, "similarity noise std"), "sigma", sigma));
  collect.push_back(set_if(prep->add_option("--clamp", clamp, "noise clamp"), "clamp", clamp));
  collect.push_back(
      set_if(prep->add_option("--replace-below", replace_below, "caption texts below this"), "replace_below", replace_below));
  collect.push_back(
      set_if(prep->add_option("--min-image-px", min_image_px, "drop smaller media first"), "min_image_px", min_image_px));
  collect.push_back(set_if(prep->add_flag("--mmc4-baseline", mmc4, "drop instead of caption"), "mmc4_baseline", mmc4));

  auto* select = app.add_subcommand("select-corpus", "filter, cluster and sample paired data");
  add_common(select);
  select->add_option("--embeddings", embeddings, "float32 embedding file")->required();
  select->add_option("--sims", sims, "id,score CSV")->required();
  collect.push_back(set_if(select->add_option("--k", k, "clusters"), "k", k));
  collect.push_back(set_if(select->add_option("--target", target, "ids to select"), "target", target));
  collect.push_back(set_if(select->add_option("--max-iters", max_iters, "k-means iterations"), "max_iters", max_iters));
  collect.push_back(set_if(select->add_flag("--skip-filter", skip_filter, "keep the low-similarity half"),
                           "skip_filter", skip_filter));
  auto* uniform_opt = select->add_flag("--uniform-random", uniform_random, "sample uniformly inside clusters");
  select->add_option("--out", out_path, "write ids here instead of stdout");

  auto* segment = app.add_subcommand("segment-shots", "kernel temporal segmentation of frame features");
  add_common(segment);
  segment->add_option("--features", features, "JSON frame features")->required();
  collect.push_back(set_if(segment->add_option("--mode", mode, "auto or fixed"), "mode", mode));
  collect.push_back(
      set_if(segment->add_option("--max-shots", max_shots, "shot budget (segments)"), "max_shots", max_shots));
  collect.push_back(set_if(segment->add_option("--penalty", penalty, "auto-mode penalty scale"), "penalty", penalty));

  auto* interlink = app.add_subcommand("gen-interlink", "summarize clips into interleaved video documents");
  add_common(interlink);
  interlink->add_option("--clips", clips, "directory of per-video JSON")->required();
  interlink->add_option("--out", out_path, "output shard prefix")->required();
  collect.push_back(set_if(interlink->add_option("--client", client, "mock or http"), "client", client));
  collect.push_back(set_if(interlink->add_option("--endpoint", endpoint, "annotator URL"), "endpoint", endpoint));
  collect.push_back(set_if(interlink->add_option("--timeout", timeout, "request timeout in seconds"), "timeout", timeout));
  collect.push_back(set_if(interlink->add_option("--history", history, "summaries kept as context"), "history", history));
  collect.push_back(set_if(interlink->add_option("--limit", limit, "videos in flight"), "limit", limit));

  auto* train = app.add_subcommand("train", "train the learnable modules");
  add_common(train);
  train->add_option("--out", out_path, "output directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--checkpoint-every", checkpoint_every, "also checkpoint every N steps");

  auto* evalf = app.add_subcommand("eval-fewshot", "k-shot captioning and retrieval on the synthetic world");
  add_common(evalf);
  evalf->add_option("--ckpt", ckpt, "checkpoint")->required();
  evalf->add_option("--synthetic", synthetic, "synthetic.json or its directory");
  evalf->add_option("--k", ks, "shots, comma separated")->delimiter(',');
  evalf->add_option("--episodes", episodes, "episodes per k");
  evalf->add_flag("--unseen", unseen, "query held-out pairings");

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of the combined objective");
  add_common(grad);
  grad->add_option("--eps", eps, "finite-difference step");
  grad->add_option("--tolerance", tolerance, "largest accepted relative error");

  auto* make = app.add_subcommand("make-synthetic", "write the synthetic corpus");
  add_common(make);
  make->add_option("--out", out_path, "output directory")->required();

  if (!args.empty() && !args[0].empty() && args[0][0] != '-' && !app.get_subcommand_no_throw(args[0])) {
    err << "unknown command '" << args[0] << "'\n" << app.help();
    return 1;
  }
  std::vector<const char*> argv = {"cosmo"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    if (app.get_subcommands().empty()) err << app.help();
    return 1;
  }

  try {
    common.load();
    for (auto& f : collect) f();
    if (prep->parsed()) return cmd_prep_interleave(common, in, out_path, overrides, out);
    if (select->parsed()) {
      if (uniform_opt->count() > 0) overrides["mode"] = WithinCluster::uniform_random;
      return cmd_select_corpus(common, embeddings, sims, overrides, out_path, out);
    }
    if (segment->parsed()) return cmd_segment_shots(common, features, overrides, out);
    if (interlink->parsed()) return cmd_gen_interlink(common, clips, out_path, overrides, out);
    if (train->parsed()) return cmd_train(common, out_path, resume, checkpoint_every, out);
    if (evalf->parsed()) return cmd_eval_fewshot(common, ckpt, synthetic, ks, episodes, unseen, out);
    if (grad->parsed()) return cmd_grad_check(common, eps, tolerance, out);
    if (make->parsed()) return cmd_make_synthetic(common, out_path, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace cosmo::cli
