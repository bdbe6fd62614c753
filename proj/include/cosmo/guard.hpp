// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Loss-spike guard driven by an exponential moving average of past losses.
#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace cosmo {

enum class GuardAction { accept, scale, skip };

NLOHMANN_JSON_SERIALIZE_ENUM(GuardAction,
                             {{GuardAction::accept, "accept"}, {GuardAction::scale, "scale"}, {GuardAction::skip, "skip"}})

inline const char* to_string(GuardAction a) {
  switch (a) {
    case GuardAction::accept:
      return "accept";
    case GuardAction::scale:
      return "scale";
    case GuardAction::skip:
      return "skip";
  }
  return "?";
}

struct GuardConfig {
  double ema_decay = 0.99;
  double spike_factor = 2.0;
  GuardAction action = GuardAction::scale;  // response to a finite spike: scale or skip

  void validate() const {
    if (!(spike_factor > 1)) throw std::invalid_argument("guard: spike_factor must exceed 1");
    if (!(ema_decay >= 0 && ema_decay < 1)) throw std::invalid_argument("guard: ema_decay must be in [0, 1)");
    if (action == GuardAction::accept) throw std::invalid_argument("guard: action must be scale or skip");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GuardConfig, ema_decay, spike_factor, action)

struct GuardDecision {
  GuardAction action = GuardAction::accept;
  double factor = 1.0;  // multiplier on the loss; 0 for skip
};

/// Non-finite -> skip. Above spike_factor * ema -> scale to ema/loss (or
/// skip, if so configured). Otherwise accept. No ema yet -> accept.
inline GuardDecision guard(double loss, std::optional<double> ema, const GuardConfig& config) {
  if (!std::isfinite(loss)) return {GuardAction::skip, 0.0};
  if (ema && loss > config.spike_factor * *ema) {
    if (config.action == GuardAction::skip) return {GuardAction::skip, 0.0};
    return {GuardAction::scale, *ema / loss};
  }
  return {GuardAction::accept, 1.0};
}

/// Folds the effective (post-guard) loss into the average. Skips leave it alone.
inline void update_ema(std::optional<double>& ema, const GuardDecision& d, double loss, const GuardConfig& config) {
  if (d.action == GuardAction::skip) return;
  const double effective = loss * d.factor;
  ema = ema ? config.ema_decay * *ema + (1 - config.ema_decay) * effective : effective;
}

}  // namespace cosmo
