#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace gaitq {

/// One accelerometer reading in g.
struct ImuSample {
  double t = 0.0;
  double ax = 0.0, ay = 0.0, az = 0.0;

  friend bool operator==(const ImuSample&, const ImuSample&) = default;
};

inline constexpr double kFullScaleG = 2.0;

struct LabeledSegment {
  std::string participant;
  int label = 0;  // kForefoot or kHeel
  double freq_hz = 100.0;
  std::vector<ImuSample> samples;

  friend bool operator==(const LabeledSegment&, const LabeledSegment&) = default;
};

std::string label_name(int label);
int parse_label(const std::string& s);

/// Parses one segment object or an array of them. `source` names the origin in errors.
std::vector<LabeledSegment> parse_sessions(const nlohmann::json& j, const std::string& source);
/// Reads a session file, or every *.json file of a directory in name order
/// (run manifests excluded).
std::vector<LabeledSegment> load_sessions(const std::filesystem::path& path);

nlohmann::json segment_json(const LabeledSegment& s);
void write_session(const std::filesystem::path& file, const LabeledSegment& s);
void write_sessions(const std::filesystem::path& file, const std::vector<LabeledSegment>& segs);

/// Keeps at most `cap` samples per (participant, label), dropping from the
/// chronological tail. With `equalize`, both labels of a participant are cut
/// to the smaller of their capped totals.
std::vector<LabeledSegment> cap_balance(const std::vector<LabeledSegment>& segs, std::size_t cap,
                                        bool equalize = false);

struct SynthOptions {
  std::uint64_t seed = 1;
  int participants = 12;
  double seconds_per_class = 60.0;
  double freq_hz = 100.0;
  double noise_sigma = 0.05;
};

/// Deterministic wrist-IMU stand-in: one forefoot and one heel segment per participant.
std::vector<LabeledSegment> synth_dataset(const SynthOptions& opt);

}  // namespace gaitq
