#include "gaitq/hwcost.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "gaitq/error.hpp"

#ifndef GAITQ_SOURCE_PROFILE_DIR
#define GAITQ_SOURCE_PROFILE_DIR "profiles"
#endif

namespace gaitq {

using nlohmann::json;
namespace fs = std::filesystem;

double energy_uj(double power_mw, double latency_ms) {
  require(power_mw >= 0 && latency_ms >= 0, ErrorKind::Validation, "power and latency must be non-negative");
  return power_mw * latency_ms;
}

double latency_ms(std::int64_t cycles, double clock_hz) {
  require(clock_hz > 0, ErrorKind::Validation, "clock must be positive");
  require(cycles >= 0, ErrorKind::Validation, "cycle count must be non-negative");
  return static_cast<double>(cycles) * 1000.0 / clock_hz;
}

bool same_deployment(const ModelConfig& a, const ModelConfig& b) {
  return a.arch == b.arch && a.variable() == b.variable() && a.bits == b.bits && a.n == b.n && a.c_in == b.c_in &&
         a.classes == b.classes;
}

namespace {

ModelConfig row_config(const json& j) {
  ModelConfig c;
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.set_variable(j.at("variable").get<int>());
  c.bits = j.at("bits").get<int>();
  c.n = j.value("n", c.n);
  c.validate();
  return c;
}

json row_key(const ModelConfig& c) {
  json j = {{"arch", arch_name(c.arch)}, {"variable", c.variable()}, {"bits", c.bits}};
  if (c.n != ModelConfig{}.n) j["n"] = c.n;
  return j;
}

std::optional<double> opt_number(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

void put(json& j, const char* key, const std::optional<double>& v) {
  if (v) j[key] = *v;
}

}  // namespace

void PlatformProfile::validate() const {
  require(!name.empty(), ErrorKind::Validation, "platform profile needs a name");
  require(clock_hz > 0, ErrorKind::Validation, name + ": clock must be positive");
  require(lut_capacity > 0 && dsp_capacity > 0 && bram_capacity > 0, ErrorKind::Validation,
          name + ": resource capacities must be positive");
  for (const auto& a : cycle_anchors)
    require(a.cycles > 0, ErrorKind::Validation, name + ": cycle anchors must be positive");
  for (const auto& r : measured)
    for (const auto& v : {r.lut_pct, r.bram_pct, r.dsp_pct, r.power_mw, r.latency_ms, r.energy_uj})
      require(!v || *v >= 0, ErrorKind::Validation, name + ": measured values must be non-negative");
}

json PlatformProfile::to_json() const {
  json anchors = json::array(), rows = json::array();
  for (const auto& a : cycle_anchors) {
    json j = row_key(a.config);
    j["cycles"] = a.cycles;
    anchors.push_back(j);
  }
  for (const auto& r : measured) {
    json j = row_key(r.config);
    put(j, "lut_pct", r.lut_pct);
    put(j, "bram_pct", r.bram_pct);
    put(j, "dsp_pct", r.dsp_pct);
    put(j, "energy_uj", r.energy_uj);
    put(j, "power_mw", r.power_mw);
    put(j, "latency_ms", r.latency_ms);
    rows.push_back(j);
  }
  json j = {{"name", name},
            {"device", device},
            {"clock_hz", clock_hz},
            {"capacity", {{"lut", lut_capacity}, {"dsp", dsp_capacity}, {"bram", bram_capacity}}},
            {"cycle_anchors", anchors},
            {"measured", rows}};
  if (!transfer_from.empty()) j["transfer_from"] = transfer_from;
  return j;
}

PlatformProfile PlatformProfile::from_json(const json& j) {
  PlatformProfile p;
  try {
    p.name = j.at("name").get<std::string>();
    p.device = j.value("device", std::string{});
    p.clock_hz = j.at("clock_hz").get<double>();
    const json& cap = j.at("capacity");
    p.lut_capacity = cap.at("lut").get<int>();
    p.dsp_capacity = cap.at("dsp").get<int>();
    p.bram_capacity = cap.at("bram").get<int>();
    p.transfer_from = j.value("transfer_from", std::string{});
    for (const auto& a : j.value("cycle_anchors", json::array()))
      p.cycle_anchors.push_back({row_config(a), a.at("cycles").get<std::int64_t>()});
    for (const auto& r : j.value("measured", json::array())) {
      MeasuredRow m;
      m.config = row_config(r);
      m.lut_pct = opt_number(r, "lut_pct");
      m.bram_pct = opt_number(r, "bram_pct");
      m.dsp_pct = opt_number(r, "dsp_pct");
      m.power_mw = opt_number(r, "power_mw");
      m.latency_ms = opt_number(r, "latency_ms");
      m.energy_uj = opt_number(r, "energy_uj");
      p.measured.push_back(m);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("bad platform profile: ") + e.what());
  }
  p.validate();
  return p;
}

double size_feature(const ModelConfig& cfg) {
  return static_cast<double>(param_count(cfg)) * cfg.bits / 1000.0 + static_cast<double>(mac_count(cfg)) / 1000.0;
}

double ResourceFit::predict(Arch a, double s) const {
  const auto it = slope.find(a);
  require(it != slope.end(), ErrorKind::Validation, "no resource calibration for " + arch_name(a));
  return intercept + it->second * s;
}

ResourceFit fit_resource(std::span<const std::pair<ModelConfig, double>> anchors) {
  // Unknowns: intercept and one slope per arch, one equation per anchor.
  // Minimising intercept^2 + sum slope^2 gives the closed form below.
  std::set<Arch> seen;
  double num = 0, den = 1;
  for (const auto& [cfg, u] : anchors) {
    require(seen.insert(cfg.arch).second, ErrorKind::Validation,
            "at most one resource anchor per architecture (" + arch_name(cfg.arch) + ")");
    const double s = size_feature(cfg);
    num += u / (s * s);
    den += 1 / (s * s);
  }
  ResourceFit f;
  f.intercept = num / den;
  for (const auto& [cfg, u] : anchors) f.slope[cfg.arch] = (u - f.intercept) / size_feature(cfg);
  return f;
}

bool check_deployable(const Utilization& u) { return u.lut <= 100.0 && u.dsp <= 100.0 && u.bram <= 100.0; }

std::string CostReport::verdict() const {
  if (deployable) return uncertain ? "deployable (uncertain)" : "deployable";
  return uncertain ? "not deployable (uncertain)" : "not deployable";
}

json CostReport::to_json() const {
  return {{"platform", platform},
          {"config", config.to_json()},
          {"cycles", cycles},
          {"latency_ms", latency_ms},
          {"power_mw", power_mw},
          {"energy_uj", energy_uj},
          {"lut_pct", util.lut},
          {"dsp_pct", util.dsp},
          {"bram_pct", util.bram},
          {"deployable", deployable},
          {"uncertain", uncertain},
          {"verdict", verdict()},
          {"source", source}};
}

namespace {

std::optional<double> field(const MeasuredRow& r, Resource res) {
  switch (res) {
    case Resource::Lut: return r.lut_pct;
    case Resource::Dsp: return r.dsp_pct;
    case Resource::Bram: return r.bram_pct;
  }
  return std::nullopt;
}

constexpr Resource kResources[] = {Resource::Lut, Resource::Dsp, Resource::Bram};

}  // namespace

Platform::Platform(PlatformProfile profile, const Platform* reference) : profile_(std::move(profile)) {
  profile_.validate();
  for (const auto& a : profile_.cycle_anchors)
    cpm_[a.config.arch] = static_cast<double>(a.cycles) / static_cast<double>(mac_count(a.config));
  if (reference)
    for (const auto& [arch, v] : reference->cpm_) cpm_.try_emplace(arch, v);

  for (Resource res : kResources) {
    std::vector<std::pair<ModelConfig, double>> anchors;
    for (const auto& r : profile_.measured)
      if (auto v = field(r, res)) anchors.emplace_back(r.config, *v);
    fits_[res] = fit_resource(anchors);
  }

  if (reference) {
    // Slopes of unanchored architectures: the reference slope times the mean
    // LUT slope ratio over architectures anchored on both platforms.
    double sum = 0;
    int shared = 0;
    for (const auto& [arch, s] : fits_[Resource::Lut].slope) {
      const auto it = reference->fit(Resource::Lut).slope.find(arch);
      if (it == reference->fit(Resource::Lut).slope.end() || it->second <= 0 || s <= 0) continue;
      sum += s / it->second;
      ++shared;
    }
    require(shared > 0, ErrorKind::Validation,
            profile_.name + ": no architecture anchored on both this profile and " + reference->name());
    const double ratio = sum / shared;
    for (Resource res : kResources)
      for (const auto& [arch, s] : reference->fit(res).slope) fits_[res].slope.try_emplace(arch, s * ratio);
  }

  // Power = a + b * LUT%, least squares over rows with both values.
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : profile_.measured)
    if (r.lut_pct && r.power_mw) pts.emplace_back(*r.lut_pct, *r.power_mw);
  if (!pts.empty()) {
    double mx = 0, my = 0;
    for (auto [x, y] : pts) mx += x, my += y;
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    double sxy = 0, sxx = 0;
    for (auto [x, y] : pts) sxy += (x - mx) * (y - my), sxx += (x - mx) * (x - mx);
    power_b_ = sxx > 0 ? sxy / sxx : 0.0;
    power_a_ = my - power_b_ * mx;
  }
}

fs::path Platform::profile_dir() {
  if (const char* env = std::getenv("GAITQ_PROFILE_DIR"); env && *env) return env;
  return GAITQ_SOURCE_PROFILE_DIR;
}

namespace {

PlatformProfile read_profile(const fs::path& file) {
  std::ifstream in(file);
  require(in.good(), ErrorKind::Io, "cannot open platform profile " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Io, file.string() + ": malformed JSON");
  }
  return PlatformProfile::from_json(j);
}

Platform load_chain(const fs::path& file, int depth) {
  require(depth < 4, ErrorKind::Validation, "platform transfer chain too long at " + file.string());
  PlatformProfile p = read_profile(file);
  if (p.transfer_from.empty()) return Platform(std::move(p));
  const Platform ref = load_chain(file.parent_path() / (p.transfer_from + ".json"), depth + 1);
  return Platform(std::move(p), &ref);
}

}  // namespace

Platform Platform::load(const std::string& name_or_path) {
  fs::path file(name_or_path);
  if (file.extension() != ".json" || !fs::exists(file)) file = profile_dir() / (name_or_path + ".json");
  require(fs::exists(file), ErrorKind::Io, "unknown platform '" + name_or_path + "' (looked in " +
                                               profile_dir().string() + ")");
  return load_chain(file, 0);
}

double Platform::cycles_per_mac(Arch a) const {
  const auto it = cpm_.find(a);
  require(it != cpm_.end(), ErrorKind::Validation, name() + ": no cycle calibration for " + arch_name(a));
  return it->second;
}

const ResourceFit& Platform::fit(Resource r) const { return fits_.at(r); }

std::int64_t Platform::cycles(const ModelConfig& cfg) const {
  return std::llround(static_cast<double>(mac_count(cfg)) * cycles_per_mac(cfg.arch));
}

Utilization Platform::estimate_resources(const ModelConfig& cfg) const {
  cfg.validate();
  const double s = size_feature(cfg);
  Utilization u;
  u.lut = std::max(0.0, fit(Resource::Lut).predict(cfg.arch, s));
  u.bram = std::max(0.0, fit(Resource::Bram).predict(cfg.arch, s));
  // Multipliers beyond the DSP budget are mapped to LUT fabric.
  u.dsp = std::clamp(fit(Resource::Dsp).predict(cfg.arch, s), 0.0, 100.0);
  return u;
}

double Platform::estimate_power_mw(const Utilization& u) const {
  return std::max(0.0, power_a_ + power_b_ * u.lut);
}

namespace {

bool near_limit(double pct) { return std::abs(pct - 100.0) <= Platform::kCoarsePct; }

}  // namespace

CostReport Platform::estimate(const ModelConfig& cfg) const {
  CostReport r;
  r.platform = name();
  r.config = cfg;
  r.cycles = cycles(cfg);
  r.latency_ms = gaitq::latency_ms(r.cycles, profile_.clock_hz);
  r.util = estimate_resources(cfg);
  r.power_mw = estimate_power_mw(r.util);
  r.energy_uj = energy_uj(r.power_mw, r.latency_ms);
  r.deployable = check_deployable(r.util);
  r.uncertain = near_limit(r.util.lut) || near_limit(r.util.bram);
  r.source = "estimated";
  return r;
}

const MeasuredRow* Platform::lookup(const ModelConfig& cfg) const {
  for (const auto& r : profile_.measured)
    if (same_deployment(r.config, cfg)) return &r;
  return nullptr;
}

CostReport Platform::cost(const ModelConfig& cfg) const {
  CostReport r = estimate(cfg);
  const MeasuredRow* m = lookup(cfg);
  if (!m) return r;

  if (m->lut_pct) r.util.lut = *m->lut_pct;
  if (m->dsp_pct) r.util.dsp = *m->dsp_pct;
  if (m->bram_pct) r.util.bram = *m->bram_pct;
  r.deployable = check_deployable(r.util);
  r.uncertain = (!m->lut_pct && near_limit(r.util.lut)) || (!m->bram_pct && near_limit(r.util.bram));
  if (!m->power_mw) r.power_mw = estimate_power_mw(r.util);

  const auto& p = m->power_mw;
  const auto& t = m->latency_ms;
  const auto& e = m->energy_uj;
  if (p) r.power_mw = *p;
  if (t) r.latency_ms = *t;
  if (e) r.energy_uj = *e;
  if (p && t && !e) r.energy_uj = energy_uj(*p, *t);
  if (!p && t && e) r.power_mw = *t > 0 ? *e / *t : 0.0;
  if (p && !t && e) r.latency_ms = *p > 0 ? *e / *p : 0.0;
  if (!e && !(p && t)) r.energy_uj = energy_uj(r.power_mw, r.latency_ms);
  if (t || (p && e)) r.cycles = std::llround(r.latency_ms * profile_.clock_hz / 1000.0);

  const bool complete = m->lut_pct && m->dsp_pct && m->bram_pct && p && t && e;
  r.source = complete ? "measured" : "mixed";
  return r;
}

double inference_power_mw(double rate_hz, double e_infer_uj) {
  require(rate_hz >= 0 && e_infer_uj >= 0, ErrorKind::Validation, "rate and energy must be non-negative");
  return rate_hz * e_infer_uj / 1000.0;
}

double battery_life_days(std::span<const double> idle_mw, double rate_hz, double e_infer_uj, double battery_mah,
                         double nominal_v) {
  require(battery_mah > 0 && nominal_v > 0, ErrorKind::Validation, "battery capacity and voltage must be positive");
  double total = inference_power_mw(rate_hz, e_infer_uj);
  for (double p : idle_mw) {
    require(p >= 0, ErrorKind::Validation, "idle power terms must be non-negative");
    total += p;
  }
  require(total > 0, ErrorKind::Validation, "total power draw is zero; battery life is unbounded");
  return battery_mah * nominal_v / total / 24.0;
}

}  // namespace gaitq
