// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace cosmo {
namespace {

using testing::synthetic_sources;
using testing::tiny_model_config;
using testing::tiny_trainer;
using testing::tiny_world;

ScheduleConfig schedule(Schedule s, long warmup, long max_steps) {
  ScheduleConfig c;
  c.lr_max = 1.0;
  c.schedule = s;
  c.warmup_steps = warmup;
  c.max_steps = max_steps;
  return c;
}

// Hand-evaluated points with warmup 10, max 110, lr_max 1.
TEST(Schedule, ClosedFormPoints) {
  const auto cos = schedule(Schedule::cosine, 10, 110);
  EXPECT_EQ(lr_at(0, cos), 0.0);
  EXPECT_EQ(lr_at(5, cos), 0.5);
  EXPECT_EQ(lr_at(10, cos), 1.0);
  EXPECT_NEAR(lr_at(60, cos), 0.5, 1e-12);
  EXPECT_NEAR(lr_at(110, cos), 0.0, 1e-12);
  EXPECT_NEAR(lr_at(500, cos), 0.0, 1e-12);  // clamped

  const auto constant = schedule(Schedule::constant, 10, 110);
  EXPECT_EQ(lr_at(10, constant), 1.0);
  EXPECT_EQ(lr_at(110, constant), 1.0);

  // Two restarts: period 50, cycles start at 10 and 60.
  const auto restart = schedule(Schedule::cosine_restart, 10, 110);
  EXPECT_EQ(lr_at(10, restart), 1.0);
  EXPECT_NEAR(lr_at(35, restart), 0.5, 1e-12);
  EXPECT_NEAR(lr_at(59, restart), 0.5 * (1 + std::cos(M_PI * 49.0 / 50.0)), 1e-12);
  EXPECT_NEAR(lr_at(60, restart), 1.0, 1e-12);
  EXPECT_NEAR(lr_at(110, restart), 0.0, 1e-12);

  const auto isqrt = schedule(Schedule::inverse_sqrt, 10, 110);
  EXPECT_EQ(lr_at(10, isqrt), 1.0);
  EXPECT_NEAR(lr_at(40, isqrt), 0.5, 1e-12);
  EXPECT_NEAR(lr_at(90, isqrt), 1.0 / 3.0, 1e-12);
}

TEST(Schedule, WarmupRatioRounds) {
  ScheduleConfig c;
  c.warmup_ratio = 0.03;
  c.max_steps = 1000;
  EXPECT_EQ(c.warmup(), 30);
  EXPECT_EQ(lr_at(30, c), c.lr_max);
}

TEST(Schedule, EveryStepMatchesReference) {
  for (auto s : {Schedule::cosine, Schedule::constant, Schedule::cosine_restart, Schedule::inverse_sqrt})
    for (long w : {0L, 1L, 7L, 50L})
      for (int restarts : {1, 2, 3}) {
        auto c = schedule(s, w, 200);
        c.lr_max = 3e-4;
        c.n_restarts = restarts;
        for (long t = 0; t <= 200; ++t) {
          double want;
          if (t < w) {
            want = c.lr_max * t / w;
          } else if (s == Schedule::constant) {
            want = c.lr_max;
          } else if (s == Schedule::inverse_sqrt) {
            want = w == 0 ? c.lr_max / std::sqrt(std::max<double>(t, 1)) : c.lr_max * std::sqrt(double(w) / t);
          } else {
            const double span = 200.0 - w;
            const int n = s == Schedule::cosine ? 1 : restarts;
            const double period = span / n;
            // Walk forward through cycle starts; the last one owns max_steps.
            double start = w;
            for (int k = 1; k < n; ++k)
              if (t >= w + k * period) start = w + k * period;
            want = c.lr_max * 0.5 * (1 + std::cos(M_PI * (t - start) / period));
          }
          ASSERT_NEAR(lr_at(t, c), want, 1e-9) << int(s) << " w=" << w << " n=" << restarts << " t=" << t;
        }
        if (w > 0) {
          ASSERT_EQ(lr_at(w, c), c.lr_max);
        }
      }
}

TEST(Schedule, Validation) {
  ScheduleConfig c;
  EXPECT_THROW(c.validate(), std::invalid_argument);  // neither warmup form
  c.warmup_steps = 5;
  c.warmup_ratio = 0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);  // both
  c.warmup_ratio.reset();
  EXPECT_NO_THROW(c.validate());
  c.lr_max = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Guard, Examples) {
  GuardConfig g;
  auto d = guard(5.0, 1.0, g);
  EXPECT_EQ(d.action, GuardAction::scale);
  EXPECT_DOUBLE_EQ(d.factor, 0.2);

  std::optional<double> ema = 1.0;
  d = guard(std::nan(""), ema, g);
  EXPECT_EQ(d.action, GuardAction::skip);
  update_ema(ema, d, std::nan(""), g);
  EXPECT_EQ(*ema, 1.0);
  EXPECT_EQ(guard(INFINITY, ema, g).action, GuardAction::skip);

  EXPECT_EQ(guard(1.1, 1.0, g).action, GuardAction::accept);
  EXPECT_EQ(guard(1e9, std::nullopt, g).action, GuardAction::accept);

  g.action = GuardAction::skip;
  EXPECT_EQ(guard(5.0, 1.0, g).action, GuardAction::skip);
}

TEST(Guard, EmaFoldsEffectiveLoss) {
  GuardConfig g;
  std::optional<double> ema;
  update_ema(ema, guard(2.0, ema, g), 2.0, g);
  EXPECT_EQ(*ema, 2.0);
  const auto d = guard(100.0, ema, g);
  update_ema(ema, d, 100.0, g);
  EXPECT_NEAR(*ema, 2.0, 1e-12);  // the scaled loss equals the old average
  update_ema(ema, guard(3.0, ema, g), 3.0, g);
  EXPECT_NEAR(*ema, 0.99 * 2.0 + 0.01 * 3.0, 1e-12);
}

std::size_t cycles_until_end(Loader& l, std::vector<Cycle>* out = nullptr) {
  std::size_t n = 0;
  for (;;) {
    auto c = l.next();
    if (c.epoch_end) return n;
    if (out) out->push_back(c);
    ++n;
  }
}

TEST(Loader, MinStopsAtSmallestSource) {
  Loader l({10, 20}, {1, 1}, LoaderStrategy::min, 3);
  std::vector<Cycle> cycles;
  EXPECT_EQ(cycles_until_end(l, &cycles), 10u);
  for (const auto& c : cycles) ASSERT_EQ(c.batches.size(), 2u);
  EXPECT_EQ(cycles_until_end(l), 10u);  // and again next epoch
}

TEST(Loader, MaxRestartsSmallSourceOnce) {
  Loader l({10, 20}, {1, 1}, LoaderStrategy::max, 3);
  std::vector<Cycle> cycles;
  EXPECT_EQ(cycles_until_end(l, &cycles), 20u);
  std::multiset<std::size_t> small;
  for (const auto& c : cycles) small.insert(c.batches[0].docs[0]);
  for (std::size_t d = 0; d < 10; ++d) EXPECT_EQ(small.count(d), 2u);  // two full passes
  EXPECT_EQ(l.state().epoch, 1);
}

TEST(Loader, RoundRobinDrainsInRotation) {
  Loader l({1, 1, 1}, {1, 1, 1}, LoaderStrategy::round_robin, 3);
  for (std::size_t s = 0; s < 3; ++s) {
    auto c = l.next();
    ASSERT_FALSE(c.epoch_end);
    ASSERT_EQ(c.batches.size(), 1u);
    EXPECT_EQ(c.batches[0].source, s);
  }
  EXPECT_TRUE(l.next().epoch_end);
}

TEST(Loader, EpochIsAPermutationAndStateReplays) {
  Loader l({12, 9}, {4, 3}, LoaderStrategy::min, 7);
  std::vector<Cycle> cycles;
  ASSERT_EQ(cycles_until_end(l, &cycles), 3u);
  std::set<std::size_t> a, b;
  for (const auto& c : cycles) {
    a.insert(c.batches[0].docs.begin(), c.batches[0].docs.end());
    b.insert(c.batches[1].docs.begin(), c.batches[1].docs.end());
  }
  EXPECT_EQ(a.size(), 12u);
  EXPECT_EQ(b.size(), 9u);

  l.next();
  const LoaderState saved = json(l.state()).get<LoaderState>();
  const auto want = l.next();
  Loader other({12, 9}, {4, 3}, LoaderStrategy::min, 7);
  other.set_state(saved);
  EXPECT_EQ(other.next().batches[1].docs, want.batches[1].docs);
}

TEST(Loader, Errors) {
  EXPECT_THROW(Loader({}, {}, LoaderStrategy::min, 0), std::invalid_argument);
  EXPECT_THROW(Loader({0, 4}, {1, 1}, LoaderStrategy::min, 0), std::invalid_argument);
  EXPECT_THROW(Loader({3}, {4}, LoaderStrategy::min, 0), std::invalid_argument);
}

TEST(ClipGradNorm, ScalesToLimit) {
  Tensor x = Tensor::from({2}, {1.0, 1.0}, true);
  backward(sum(mul(x, Tensor::from({2}, {3.0, 4.0}))));
  std::vector<NamedParam> params = {{"x", x, true}};
  EXPECT_NEAR(clip_grad_norm(params, 1.0), 5.0, 1e-12);
  const double after = std::hypot(x.grad()[0], x.grad()[1]);
  EXPECT_NEAR(after, 1.0, 1e-9);
  EXPECT_NEAR(clip_grad_norm(params, 2.0), 1.0, 1e-9);  // under the limit: untouched
  EXPECT_NEAR(std::hypot(x.grad()[0], x.grad()[1]), 1.0, 1e-12);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.schedule.warmup_ratio = 0.03;
  c.loader_strategy = LoaderStrategy::round_robin;
  c.guard.spike_factor = 3;
  const json j = c;
  EXPECT_EQ(json(j.get<TrainConfig>()), j);
  EXPECT_NO_THROW(c.validate());
  c.schedule.warmup_steps = 10;
  EXPECT_THROW(c.validate(), ConfigError);

  RunConfig r;
  r.train.schedule.warmup_steps = 1;
  r.sources.push_back({"pairs", DataType::image_text, 1.0, {"a.shard"}, std::nullopt});
  const json rj = r;
  EXPECT_EQ(json(rj.get<RunConfig>()), rj);
  EXPECT_THROW(json::parse(R"({"name":"x","data_type":"image_text","weight":0})").get<SourceSpec>(), ConfigError);
}

TEST(Trainer, TooFewDocumentsIsAConfigError) {
  SyntheticWorld world(tiny_world(2));
  auto sources = synthetic_sources(world);
  TrainConfig tc;
  tc.schedule.warmup_steps = 0;
  tc.batch_size = 4;
  Vocab vocab = build_source_vocab(sources, 300);
  EXPECT_THROW(Trainer(Model::build(tiny_model_config(world.config()), 0), vocab, sources, tc, 0), ConfigError);
}

std::string run_metrics(Trainer& t, long steps) {
  std::ostringstream os;
  for (long i = 0; i < steps; ++i) Trainer::write_metrics(t.step(), os);
  return os.str();
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class TrainerFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("cosmo_trainer_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(TrainerFiles, DeterministicReplay) {
  auto a = tiny_trainer(3);
  auto b = tiny_trainer(3);
  const auto ma = run_metrics(a, 12);
  EXPECT_EQ(ma, run_metrics(b, 12));
  a.save(dir_ / "a.ckpt");
  b.save(dir_ / "b.ckpt");
  EXPECT_EQ(file_bytes(dir_ / "a.ckpt"), file_bytes(dir_ / "b.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir_ / "a.ckpt.tmp"));

  // Every line carries the documented fields.
  std::istringstream lines(ma);
  std::string line;
  std::getline(lines, line);
  const auto j = json::parse(line);
  for (const char* key : {"step", "type", "lm_loss", "c_loss", "lr", "guard_event"}) EXPECT_TRUE(j.contains(key)) << key;
}

TEST_F(TrainerFiles, ResumeContinuesTheSameStream) {
  auto full = tiny_trainer(4);
  run_metrics(full, 7);
  const auto tail = run_metrics(full, 7);

  auto first = tiny_trainer(4);
  run_metrics(first, 7);
  first.save(dir_ / "mid.ckpt");
  auto resumed = tiny_trainer(4);
  resumed.restore(dir_ / "mid.ckpt");
  EXPECT_EQ(resumed.step_count(), 7);
  EXPECT_EQ(run_metrics(resumed, 7), tail);

  full.save(dir_ / "full.ckpt");
  resumed.save(dir_ / "resumed.ckpt");
  EXPECT_EQ(file_bytes(dir_ / "full.ckpt"), file_bytes(dir_ / "resumed.ckpt"));
}

TEST_F(TrainerFiles, RestoreRefusesMismatches) {
  auto t = tiny_trainer(1);
  t.step();
  t.save(dir_ / "x.ckpt");

  auto other_seed = tiny_trainer(2);
  EXPECT_THROW(other_seed.restore(dir_ / "x.ckpt"), CheckpointError);
  auto other_steps = tiny_trainer(1, 8, 99);
  EXPECT_THROW(other_steps.restore(dir_ / "x.ckpt"), CheckpointError);
  auto other_docs = tiny_trainer(1, 12);
  EXPECT_THROW(other_docs.restore(dir_ / "x.ckpt"), CheckpointError);

  std::ofstream(dir_ / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(t.restore(dir_ / "junk.ckpt"), CheckpointError);
  auto bytes = file_bytes(dir_ / "x.ckpt");
  std::ofstream(dir_ / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  EXPECT_THROW(t.restore(dir_ / "short.ckpt"), CheckpointError);

  // A checkpoint also reloads as a bare model.
  auto loaded = load_model(dir_ / "x.ckpt");
  EXPECT_EQ(loaded.vocab.tokens(), t.vocab().tokens());
  EXPECT_EQ(loaded.model.param("fusion2.gate").data()[0], t.model().param("fusion2.gate").data()[0]);
}

TEST(Trainer, FrozenParametersStayBitIdentical) {
  auto t = tiny_trainer(6, 8, 200);
  std::vector<std::vector<real>> before;
  for (const auto& p : t.model().frozen()) before.emplace_back(p.value.data().begin(), p.value.data().end());
  std::vector<real> gate_before(t.model().param("fusion2.gate").data().begin(), t.model().param("fusion2.gate").data().end());
  for (int i = 0; i < 200; ++i) t.step();
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto now = t.model().frozen()[i].value.data();
    ASSERT_TRUE(std::equal(now.begin(), now.end(), before[i].begin())) << t.model().frozen()[i].name;
  }
  EXPECT_NE(t.model().param("fusion2.gate").data()[0], gate_before[0]);
}

TEST(Trainer, CombinedLossFalls) {
  auto t = tiny_trainer(7, 8, 150);
  double early = 0, late = 0;
  for (int i = 0; i < 150; ++i) {
    const auto m = t.step();
    if (i < 10) early += m.combined / 10;
    if (i >= 140) late += m.combined / 10;
  }
  EXPECT_LT(late, 0.5 * early);
}

TEST(Trainer, SingleTypeWithoutContrastiveIsPlainLm) {
  SyntheticWorld world(tiny_world());
  auto sources = synthetic_sources(world);
  sources.resize(1);
  TrainConfig tc;
  tc.schedule.warmup_steps = 0;
  tc.lambda_contrastive = 0;
  tc.window_length = 32;
  Vocab vocab = build_source_vocab(sources, 300);
  Trainer t(Model::build(tiny_model_config(world.config()), 0), vocab, sources, tc, 0);
  const double scale_before = t.model().logit_scale().item();
  for (int i = 0; i < 3; ++i) {
    const auto m = t.step();
    ASSERT_EQ(m.batches.size(), 1u);
    EXPECT_EQ(m.combined, m.batches[0].lm_loss);
  }
  EXPECT_EQ(t.model().logit_scale().item(), scale_before);
}

TEST(Trainer, DroppingASourceLeavesOtherTermsAlone) {
  SyntheticWorld world(tiny_world());
  auto all = synthetic_sources(world);
  auto fewer = all;
  fewer.pop_back();
  TrainConfig tc;
  tc.schedule.warmup_steps = 2;
  tc.window_length = 32;
  Vocab vocab = build_source_vocab(all, 300);
  Trainer a(Model::build(tiny_model_config(world.config()), 0), vocab, all, tc, 0);
  Trainer b(Model::build(tiny_model_config(world.config()), 0), vocab, fewer, tc, 0);
  const auto ma = a.step();
  const auto mb = b.step();
  ASSERT_EQ(mb.batches.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ma.batches[i].lm_loss, mb.batches[i].lm_loss);
    EXPECT_EQ(ma.batches[i].c_loss, mb.batches[i].c_loss);
  }
}

TEST(Trainer, AdversarialSpikesAndNans) {
  auto t = tiny_trainer(8, 8, 300);
  long calls = 0;
  std::size_t spikes = 0, nans = 0;
  t.set_loss_hook([&](long, DataType, LossKind, double v) {
    ++calls;
    if (calls % 50 == 0) return ++spikes, 1e6;
    if (calls % 37 == 0) return ++nans, std::nan("");
    return v;
  });
  for (int i = 0; i < 300; ++i) t.step();
  for (const auto& p : t.model().all_params())
    for (real v : p.value.data()) ASSERT_TRUE(std::isfinite(v)) << p.name;
  std::size_t scaled = 0, skipped = 0;
  for (const auto& e : t.guard_events()) {
    if (e.loss == 1e6) scaled += e.action == GuardAction::scale;
    if (std::isnan(e.loss)) skipped += e.action == GuardAction::skip;
  }
  EXPECT_EQ(scaled, spikes);
  EXPECT_EQ(skipped, nans);
  for (const auto& [key, ema] : t.emas()) EXPECT_TRUE(std::isfinite(ema)) << key;
}

TEST(Trainer, AllSkippedCycleDoesNotUpdate) {
  auto t = tiny_trainer(9);
  t.set_loss_hook([](long, DataType, LossKind, double) { return std::nan(""); });
  const auto gate = t.model().param("fusion2.gate").data()[0];
  const auto m = t.step();
  EXPECT_FALSE(m.updated);
  EXPECT_EQ(t.step_count(), 1);
  EXPECT_EQ(t.model().param("fusion2.gate").data()[0], gate);
  for (const auto& b : m.batches) EXPECT_EQ(b.event, GuardAction::skip);
}

}  // namespace
}  // namespace cosmo
