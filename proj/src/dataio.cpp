#include "gaitq/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "gaitq/error.hpp"

namespace gaitq {

using nlohmann::json;
namespace fs = std::filesystem;

std::string label_name(int label) {
  switch (label) {
    case 0: return "forefoot";
    case 1: return "heel";
  }
  fail(ErrorKind::Validation, "unknown class index " + std::to_string(label));
}

int parse_label(const std::string& s) {
  if (s == "forefoot") return 0;
  if (s == "heel") return 1;
  fail(ErrorKind::Validation, "unknown label '" + s + "' (expected forefoot or heel)");
}

namespace {

LabeledSegment parse_segment(const json& j, const std::string& where) {
  require(j.is_object(), ErrorKind::Io, where + ": segment must be an object");
  LabeledSegment s;
  try {
    s.participant = j.at("participant").get<std::string>();
    s.label = parse_label(j.at("label").get<std::string>());
    s.freq_hz = j.at("freq_hz").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, where + ": " + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::Io, where + ": " + e.what());
  }
  require(s.freq_hz > 0, ErrorKind::Io, where + ": freq_hz must be positive");
  const json& arr = j.contains("samples") ? j.at("samples") : json();
  require(arr.is_array(), ErrorKind::Io, where + ": samples must be an array");
  const double dt = 1.0 / s.freq_hz;
  s.samples.reserve(arr.size());
  for (std::size_t k = 0; k < arr.size(); ++k) {
    const std::string at = where + ": sample " + std::to_string(k);
    ImuSample x;
    try {
      x.t = arr[k].at("t").get<double>();
      x.ax = arr[k].at("ax").get<double>();
      x.ay = arr[k].at("ay").get<double>();
      x.az = arr[k].at("az").get<double>();
    } catch (const json::exception& e) {
      fail(ErrorKind::Io, at + ": " + e.what());
    }
    for (double a : {x.ax, x.ay, x.az})
      require(std::isfinite(a) && std::abs(a) <= kFullScaleG, ErrorKind::Io,
              at + ": acceleration outside +-2 g");
    if (k > 0) {
      const double step = x.t - s.samples.back().t;
      require(step > 0, ErrorKind::Io, at + ": timestamp is not increasing");
      require(std::abs(step - dt) <= 0.01 * dt, ErrorKind::Io,
              at + ": sample spacing deviates from 1/freq_hz by more than 1%");
    }
    s.samples.push_back(x);
  }
  return s;
}

/// 1-based line of a byte offset in `text`.
std::size_t line_of(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

std::vector<LabeledSegment> load_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Io, file.string() + ":" + std::to_string(line_of(text, e.byte)) + ": malformed JSON");
  }
  return parse_sessions(j, file.string());
}

}  // namespace

std::vector<LabeledSegment> parse_sessions(const json& j, const std::string& source) {
  std::vector<LabeledSegment> out;
  if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i)
      out.push_back(parse_segment(j[i], source + ": segment " + std::to_string(i)));
  } else {
    out.push_back(parse_segment(j, source));
  }
  return out;
}

std::vector<LabeledSegment> load_sessions(const fs::path& path) {
  require(fs::exists(path), ErrorKind::Io, "no such file or directory: " + path.string());
  if (!fs::is_directory(path)) return load_file(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file() && e.path().extension() == ".json" && e.path().filename() != "manifest.json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<LabeledSegment> out;
  for (const auto& f : files) {
    auto segs = load_file(f);
    out.insert(out.end(), std::make_move_iterator(segs.begin()), std::make_move_iterator(segs.end()));
  }
  return out;
}

json segment_json(const LabeledSegment& s) {
  json samples = json::array();
  for (const auto& x : s.samples) samples.push_back({{"t", x.t}, {"ax", x.ax}, {"ay", x.ay}, {"az", x.az}});
  return {{"participant", s.participant}, {"label", label_name(s.label)}, {"freq_hz", s.freq_hz},
          {"samples", std::move(samples)}};
}

namespace {

void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write " + file.string());
  out << j.dump() << '\n';
  require(out.good(), ErrorKind::Io, "write failed for " + file.string());
}

}  // namespace

void write_session(const fs::path& file, const LabeledSegment& s) { write_json(file, segment_json(s)); }

void write_sessions(const fs::path& file, const std::vector<LabeledSegment>& segs) {
  json arr = json::array();
  for (const auto& s : segs) arr.push_back(segment_json(s));
  write_json(file, arr);
}

std::vector<LabeledSegment> cap_balance(const std::vector<LabeledSegment>& segs, std::size_t cap, bool equalize) {
  require(cap > 0, ErrorKind::Validation, "cap must be positive");
  using Key = std::pair<std::string, int>;
  std::map<Key, std::size_t> total;
  for (const auto& s : segs) total[{s.participant, s.label}] += s.samples.size();

  std::map<Key, std::size_t> budget;
  for (const auto& [key, n] : total) budget[key] = std::min(n, cap);
  if (equalize) {
    std::map<std::string, std::size_t> lowest;
    for (const auto& [key, n] : budget) {
      auto [it, fresh] = lowest.try_emplace(key.first, n);
      if (!fresh) it->second = std::min(it->second, n);
    }
    for (auto& [key, n] : budget) n = lowest[key.first];
  }

  std::vector<LabeledSegment> out;
  for (const auto& s : segs) {
    std::size_t& left = budget[{s.participant, s.label}];
    const std::size_t keep = std::min(left, s.samples.size());
    left -= keep;
    if (keep == 0) continue;
    LabeledSegment c = s;
    c.samples.resize(keep);
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

/// Derivative-of-Gaussian pulse: positive lobe of height `amp` at tau = -width.
double biphasic(double tau, double width, double amp) {
  const double u = tau / width;
  return amp * (-u) * std::exp(0.5 - 0.5 * u * u);
}

struct Gait {
  double freq;       // strides per second
  double swing;      // arm-swing amplitude, g
  double phase;      // swing phase
  double spike_gain; // participant-specific impact strength
};

LabeledSegment synth_segment(const Gait& g, int label, const std::string& pid, const SynthOptions& opt,
                             std::mt19937_64& rng) {
  const std::size_t count = static_cast<std::size_t>(std::llround(opt.seconds_per_class * opt.freq_hz));
  const double period = 1.0 / g.freq;
  // Class-specific impact shape: forefoot narrow and early, heel wide, larger and later.
  const bool heel = label == 1;
  const double width = heel ? 0.030 : 0.012;
  const double amp = (heel ? 1.8 : 1.4) * g.spike_gain;
  const double at = (heel ? 0.45 : 0.20) * period;

  // Per-cycle amplitude jitter, drawn up front so the noise stream is independent of it.
  const std::size_t cycles = static_cast<std::size_t>(opt.seconds_per_class / period) + 2;
  std::uniform_real_distribution<double> jitter(0.9, 1.1);
  std::vector<double> gain(cycles);
  for (double& v : gain) v = jitter(rng);
  std::normal_distribution<double> noise(0.0, 1.0);

  LabeledSegment s;
  s.participant = pid;
  s.label = label;
  s.freq_hz = opt.freq_hz;
  s.samples.reserve(count);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < count; ++i) {
    const double t = static_cast<double>(i) / opt.freq_hz;
    const std::size_t cycle = static_cast<std::size_t>(t / period);
    double spike = 0.0;
    for (std::size_t c = cycle == 0 ? 0 : cycle - 1; c <= cycle + 1 && c < cycles; ++c)
      spike += gain[c] * biphasic(t - (static_cast<double>(c) * period + at), width, amp);
    const double swing = g.swing * std::sin(two_pi * g.freq * t + g.phase);
    ImuSample x;
    x.t = t;
    x.ax = swing + opt.noise_sigma * noise(rng);
    x.ay = 0.5 * swing + (heel ? 0.25 * std::sin(two_pi * 0.5 * g.freq * t) : 0.0) + opt.noise_sigma * noise(rng);
    x.az = 0.3 * std::cos(two_pi * g.freq * t + g.phase) + spike + opt.noise_sigma * noise(rng);
    for (double* a : {&x.ax, &x.ay, &x.az}) *a = std::clamp(*a, -kFullScaleG, kFullScaleG);
    s.samples.push_back(x);
  }
  return s;
}

}  // namespace

std::vector<LabeledSegment> synth_dataset(const SynthOptions& opt) {
  require(opt.participants > 0 && opt.seconds_per_class > 0 && opt.freq_hz > 0 && opt.noise_sigma >= 0,
          ErrorKind::Validation, "synthetic dataset options must be positive");
  std::mt19937_64 rng(opt.seed);
  std::vector<LabeledSegment> out;
  for (int p = 0; p < opt.participants; ++p) {
    std::uniform_real_distribution<double> freq(2.4, 3.2), swing(0.3, 0.7), phase(0.0, 2.0 * std::numbers::pi),
        gain(0.9, 1.1);
    const Gait g{freq(rng), swing(rng), phase(rng), gain(rng)};
    char pid[16];
    std::snprintf(pid, sizeof pid, "p%02d", p + 1);
    for (int label : {0, 1}) out.push_back(synth_segment(g, label, pid, opt, rng));
  }
  return out;
}

}  // namespace gaitq
