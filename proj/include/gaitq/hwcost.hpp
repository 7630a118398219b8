#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gaitq/models.hpp"

namespace gaitq {

/// mW x ms = uJ.
double energy_uj(double power_mw, double latency_ms);
double latency_ms(std::int64_t cycles, double clock_hz);

/// One row of a platform's measured table. Partial rows leave fields empty.
struct MeasuredRow {
  ModelConfig config;
  std::optional<double> lut_pct, bram_pct, dsp_pct;
  std::optional<double> power_mw, latency_ms, energy_uj;
};

struct CycleAnchor {
  ModelConfig config;
  std::int64_t cycles = 0;
};

struct PlatformProfile {
  std::string name;
  std::string device;
  double clock_hz = 0;
  int lut_capacity = 0, dsp_capacity = 0, bram_capacity = 0;
  /// Profile whose resource slopes stand in for architectures measured
  /// on the reference platform only. Empty for the reference itself.
  std::string transfer_from;
  std::vector<CycleAnchor> cycle_anchors;
  std::vector<MeasuredRow> measured;

  void validate() const;
  nlohmann::json to_json() const;
  static PlatformProfile from_json(const nlohmann::json& j);
};

enum class Resource { Lut, Dsp, Bram };

/// util = intercept + slope[arch] * S, S = params * bits / 1000 + MACs / 1000.
struct ResourceFit {
  double intercept = 0;
  std::map<Arch, double> slope;

  double predict(Arch a, double s) const;
};

/// Cost feature S of a configuration.
double size_feature(const ModelConfig& cfg);

/// Minimum-norm exact fit through one anchor per architecture.
ResourceFit fit_resource(std::span<const std::pair<ModelConfig, double>> anchors);

struct Utilization {
  double lut = 0, dsp = 0, bram = 0;
};

bool check_deployable(const Utilization& u);

struct CostReport {
  std::string platform;
  ModelConfig config;
  std::int64_t cycles = 0;
  double latency_ms = 0, power_mw = 0, energy_uj = 0;
  Utilization util;
  bool deployable = true;
  /// An estimated utilization within the coarseness band around 100%.
  bool uncertain = false;
  std::string source;  // measured | estimated | mixed

  std::string verdict() const;
  nlohmann::json to_json() const;
};

/// Profile plus the calibration derived from its anchors and measured rows.
class Platform {
 public:
  /// Percentage points of declared resource-estimate error.
  static constexpr double kCoarsePct = 15.0;

  explicit Platform(PlatformProfile profile, const Platform* reference = nullptr);

  /// Loads `name_or_path`: a JSON file path or a profile name looked up in
  /// `profile_dir()`. The transfer reference is loaded from the same directory.
  static Platform load(const std::string& name_or_path);
  /// $GAITQ_PROFILE_DIR, else the profiles shipped with the source tree.
  static std::filesystem::path profile_dir();

  const PlatformProfile& profile() const { return profile_; }
  const std::string& name() const { return profile_.name; }
  double cycles_per_mac(Arch a) const;
  const ResourceFit& fit(Resource r) const;
  double power_static_mw() const { return power_a_; }
  double power_per_lut_pct() const { return power_b_; }

  std::int64_t cycles(const ModelConfig& cfg) const;
  Utilization estimate_resources(const ModelConfig& cfg) const;
  double estimate_power_mw(const Utilization& u) const;
  /// Analytic estimate, ignoring the measured table.
  CostReport estimate(const ModelConfig& cfg) const;
  /// Measured values where the table has them, estimates elsewhere.
  CostReport cost(const ModelConfig& cfg) const;
  const MeasuredRow* lookup(const ModelConfig& cfg) const;

 private:
  PlatformProfile profile_;
  std::map<Arch, double> cpm_;
  std::map<Resource, ResourceFit> fits_;
  double power_a_ = 0, power_b_ = 0;
};

/// True when a and b deploy identically (same arch variable, bits and input).
bool same_deployment(const ModelConfig& a, const ModelConfig& b);

double inference_power_mw(double rate_hz, double e_infer_uj);

/// (mAh x V) mWh over total draw, in days.
double battery_life_days(std::span<const double> idle_mw, double rate_hz, double e_infer_uj, double battery_mah,
                         double nominal_v);

}  // namespace gaitq
