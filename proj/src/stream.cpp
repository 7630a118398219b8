#include "gaitq/stream.hpp"

#include <cmath>
#include <string>

#include "gaitq/error.hpp"

namespace gaitq {

namespace {
// Guards the cooldown comparison against representation error in window times.
constexpr double kTimeSlack = 1e-9;
}  // namespace

void StreamConfig::validate() const {
  require(w > 0 && f > 0, ErrorKind::Validation, "window size and sampling frequency must be positive");
  require(s > 0 && s <= 1, ErrorKind::Validation, "stride ratio must be in (0, 1]");
  require(d > 0 && w % d == 0, ErrorKind::Validation,
          "downsampling factor " + std::to_string(d) + " does not divide window size " + std::to_string(w));
  require(n_consec >= 1, ErrorKind::Validation, "n_consec must be at least 1");
  require(cooldown >= 0, ErrorKind::Validation, "cooldown must be non-negative");
}

std::size_t window_start(std::size_t k, const StreamConfig& cfg) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(k) * static_cast<double>(cfg.w) * cfg.s));
}

std::size_t window_count(std::size_t samples, const StreamConfig& cfg) {
  cfg.validate();
  if (samples < cfg.w) return 0;
  const double step = static_cast<double>(cfg.w) * cfg.s;
  return static_cast<std::size_t>(std::floor(static_cast<double>(samples - cfg.w) / step)) + 1;
}

std::vector<StreamWindow> make_windows(std::span<const ImuSample> samples, const StreamConfig& cfg) {
  const std::size_t count = window_count(samples.size(), cfg);
  const std::size_t n = cfg.n();
  std::vector<StreamWindow> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t start = window_start(k, cfg);
    Tensor x({3, n});
    for (std::size_t i = 0; i < n; ++i) {
      const ImuSample& v = samples[start + i * cfg.d];
      x.at(0, i) = v.ax;
      x.at(1, i) = v.ay;
      x.at(2, i) = v.az;
    }
    out.push_back({std::move(x), start, start + cfg.w, static_cast<double>(start + cfg.w) / cfg.f});
  }
  return out;
}

double feedback_latency(const StreamConfig& cfg) {
  cfg.validate();
  return static_cast<double>(cfg.n_consec - 1) * static_cast<double>(cfg.w) * cfg.s / cfg.f;
}

double realtime_bound(const StreamConfig& cfg) {
  cfg.validate();
  return static_cast<double>(cfg.w) * cfg.s / cfg.f;
}

bool realtime_ok(const StreamConfig& cfg, double t_infer_s) { return t_infer_s <= realtime_bound(cfg); }

double worst_case_energy_rate(const StreamConfig& cfg, double e_infer_uj) {
  cfg.validate();
  require(e_infer_uj >= 0, ErrorKind::Validation, "energy per inference must be non-negative");
  return e_infer_uj * 1e-6 * cfg.f / (static_cast<double>(cfg.w) * cfg.s);
}

std::optional<FeedbackEvent> trigger_step(TriggerState& st, int prediction, double t, const StreamConfig& cfg) {
  require(!st.last_t || t >= *st.last_t, ErrorKind::Validation, "trigger timestamps must be nondecreasing");
  st.last_t = t;
  st.counter = prediction == cfg.target ? std::min(st.counter + 1, cfg.n_consec) : 0;
  if (st.counter < cfg.n_consec) return std::nullopt;
  if (st.last_event && t - *st.last_event < cfg.cooldown - kTimeSlack) return std::nullopt;
  st.counter = 0;
  st.last_event = t;
  return FeedbackEvent{t, prediction};
}

SimResult simulate(std::span<const ImuSample> samples, const Classifier& classify, const StreamConfig& cfg) {
  cfg.validate();
  SimResult r;
  TriggerState st;
  const auto windows = make_windows(samples, cfg);
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const int pred = classify(windows[k].x);
    const auto ev = trigger_step(st, pred, windows[k].t, cfg);
    if (ev) r.events.push_back(*ev);
    r.steps.push_back({k, windows[k].t, pred, st.counter, ev.has_value()});
  }
  return r;
}

}  // namespace gaitq
