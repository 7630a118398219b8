#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "gaitq/dataio.hpp"
#include "gaitq/tensor.hpp"

namespace gaitq {

struct StreamConfig {
  std::size_t w = 50;      // window size, raw samples
  double f = 100.0;        // sampling frequency, Hz
  double s = 0.25;         // stride ratio
  std::size_t d = 2;       // downsampling factor
  int n_consec = 5;
  double cooldown = 0.5;   // seconds between feedback events
  int target = 1;          // class that triggers feedback (heel)

  void validate() const;
  std::size_t n() const { return w / d; }
  /// Seconds between consecutive window completions.
  double stride_seconds() const { return static_cast<double>(w) * s / f; }
};

struct StreamWindow {
  Tensor x;            // [3 x n]
  std::size_t start;   // raw interval [start, end)
  std::size_t end;
  double t;            // completion time, seconds from stream start
};

/// Raw start index of window k: floor(k * w * s).
std::size_t window_start(std::size_t k, const StreamConfig& cfg);
std::size_t window_count(std::size_t samples, const StreamConfig& cfg);
std::vector<StreamWindow> make_windows(std::span<const ImuSample> samples, const StreamConfig& cfg);

/// (N_consec - 1) * w * s / f, seconds.
double feedback_latency(const StreamConfig& cfg);
/// w * s / f, seconds.
double realtime_bound(const StreamConfig& cfg);
bool realtime_ok(const StreamConfig& cfg, double t_infer_s);
/// E_infer * f / (w * s), with E in microjoules; returns watts.
double worst_case_energy_rate(const StreamConfig& cfg, double e_infer_uj);

struct FeedbackEvent {
  double t;
  int cls;

  friend bool operator==(const FeedbackEvent&, const FeedbackEvent&) = default;
};

struct TriggerState {
  int counter = 0;
  std::optional<double> last_event;
  std::optional<double> last_t;
};

/// Advances the consecutive-positive machine by one prediction.
std::optional<FeedbackEvent> trigger_step(TriggerState& state, int prediction, double t, const StreamConfig& cfg);

struct SimStep {
  std::size_t window;
  double t;
  int predicted;
  int counter;
  bool event;
};

struct SimResult {
  std::vector<SimStep> steps;
  std::vector<FeedbackEvent> events;
};

using Classifier = std::function<int(const Tensor&)>;

SimResult simulate(std::span<const ImuSample> samples, const Classifier& classify, const StreamConfig& cfg);

}  // namespace gaitq
