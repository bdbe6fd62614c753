// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Learning-rate schedules with linear warmup.
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace cosmo {

enum class Schedule { cosine, constant, cosine_restart, inverse_sqrt };

NLOHMANN_JSON_SERIALIZE_ENUM(Schedule, {{Schedule::cosine, "cosine"},
                                        {Schedule::constant, "constant"},
                                        {Schedule::cosine_restart, "cosine_restart"},
                                        {Schedule::inverse_sqrt, "inverse_sqrt"}})

struct ScheduleConfig {
  double lr_max = 1e-3;
  Schedule schedule = Schedule::cosine;
  std::optional<long> warmup_steps;
  std::optional<double> warmup_ratio;
  long max_steps = 1000;
  int n_restarts = 2;

  void validate() const {
    if (!(lr_max > 0)) throw std::invalid_argument("schedule: lr_max must be positive");
    if (max_steps < 1) throw std::invalid_argument("schedule: max_steps must be at least 1");
    if (warmup_steps.has_value() == warmup_ratio.has_value()) {
      throw std::invalid_argument("schedule: set exactly one of warmup_steps and warmup_ratio");
    }
    if (warmup_steps && (*warmup_steps < 0 || *warmup_steps > max_steps)) {
      throw std::invalid_argument("schedule: warmup_steps must be in [0, max_steps]");
    }
    if (warmup_ratio && (*warmup_ratio < 0 || *warmup_ratio > 1)) {
      throw std::invalid_argument("schedule: warmup_ratio must be in [0, 1]");
    }
    if (n_restarts < 1) throw std::invalid_argument("schedule: n_restarts must be at least 1");
  }

  long warmup() const {
    if (warmup_steps) return *warmup_steps;
    return std::lround(warmup_ratio.value_or(0.0) * static_cast<double>(max_steps));
  }
};

inline double lr_at(long step, const ScheduleConfig& c) {
  step = std::clamp(step, 0L, c.max_steps);
  const long w = c.warmup();
  const double lr = c.lr_max;
  if (step < w) return lr * static_cast<double>(step) / static_cast<double>(w);
  const double span = static_cast<double>(c.max_steps - w);
  const double since = static_cast<double>(step - w);
  auto half_cosine = [&](double p) { return lr * 0.5 * (1 + std::cos(std::numbers::pi * p)); };
  switch (c.schedule) {
    case Schedule::constant:
      return lr;
    case Schedule::cosine:
      return span > 0 ? half_cosine(since / span) : lr;
    case Schedule::cosine_restart: {
      if (span <= 0) return lr;
      const double period = span / c.n_restarts;
      // The last cycle runs through max_steps, ending at zero.
      const double cycle = std::min(std::floor(since / period), static_cast<double>(c.n_restarts - 1));
      return half_cosine((since - cycle * period) / period);
    }
    case Schedule::inverse_sqrt: {
      const double ws = static_cast<double>(std::max(w, 1L));
      return lr * std::sqrt(ws / std::max(static_cast<double>(step), ws));
    }
  }
  throw std::logic_error("lr_at: unknown schedule");
}

}  // namespace cosmo
