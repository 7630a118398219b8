#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "gaitq/search.hpp"
#include "gaitq/stream.hpp"

namespace gaitq::testing {

/// Reference trigger: at each step, rescans backwards for the run of target
/// predictions since the last non-target or emitted event.
inline std::vector<FeedbackEvent> brute_force_events(const std::vector<int>& pred, const std::vector<double>& t,
                                                     const StreamConfig& cfg) {
  std::vector<FeedbackEvent> events;
  std::optional<std::size_t> last_event;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    std::size_t run = 0;
    for (std::size_t j = k + 1; j-- > 0;) {
      if (pred[j] != cfg.target || (last_event && j <= *last_event)) break;
      ++run;
    }
    if (run < static_cast<std::size_t>(cfg.n_consec)) continue;
    if (!events.empty() && t[k] - events.back().t < cfg.cooldown - 1e-9) continue;
    events.push_back({t[k], cfg.target});
    last_event = k;
  }
  return events;
}

struct TriggerCase {
  StreamConfig cfg;
  std::vector<int> pred;
  std::vector<double> t;
};

inline TriggerCase random_trigger_case(std::mt19937_64& rng, std::size_t length) {
  TriggerCase c;
  std::uniform_int_distribution<int> n(1, 8);
  const double cooldowns[] = {0.0, 0.125, 0.25, 0.5, 1.0, 0.3};
  const double strides[] = {0.25, 0.5, 1.0};
  c.cfg.n_consec = n(rng);
  c.cfg.cooldown = cooldowns[rng() % 6];
  c.cfg.s = strides[rng() % 3];
  std::uniform_real_distribution<double> u(0, 1);
  const double p = 0.3 + 0.65 * u(rng);
  for (std::size_t k = 0; k < length; ++k) {
    c.pred.push_back(u(rng) < p ? c.cfg.target : 1 - c.cfg.target);
    c.t.push_back(static_cast<double>(window_start(k, c.cfg) + c.cfg.w) / c.cfg.f);
  }
  return c;
}

/// Non-dominated deployable trials by exhaustive pairwise comparison.
inline std::vector<std::size_t> brute_force_front(const std::vector<Trial>& all) {
  std::vector<std::size_t> front;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (!all[i].deployable) continue;
    bool dominated = false;
    for (std::size_t j = 0; j < all.size() && !dominated; ++j) {
      if (!all[j].deployable || j == i) continue;
      const bool no_worse = all[j].f1 >= all[i].f1 && all[j].energy_uj <= all[i].energy_uj;
      const bool better = all[j].f1 > all[i].f1 || all[j].energy_uj < all[i].energy_uj;
      dominated = no_worse && better;
    }
    if (!dominated) front.push_back(i);
  }
  return front;
}

/// Synthetic objective over a discrete space, with an infeasible corner.
inline Evaluation synthetic_objective(const TrialConfig& c) {
  const double size = c.model.variable() * c.model.bits / 8.0;
  const double e = size + 0.1 * c.bs / 16.0;
  const double f1 = 1.0 - std::exp(-size / 12.0) - 0.02 * std::abs(std::log10(c.lr) + 3.5) - 0.001 * c.bs;
  return {f1, e, !(c.model.variable() >= 56 && c.model.bits == 8)};
}

}  // namespace gaitq::testing
