#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "gaitq/hwcost.hpp"

using namespace gaitq;
namespace fs = std::filesystem;

namespace {

ModelConfig cfg(Arch a, int variable, int bits) {
  ModelConfig c;
  c.arch = a;
  c.set_variable(variable);
  c.bits = bits;
  return c;
}

const Platform& large() {
  static const Platform p = Platform::load("xc7s15");
  return p;
}
const Platform& small() {
  static const Platform p = Platform::load("ice40up5k");
  return p;
}

}  // namespace

TEST_CASE("energy and latency arithmetic") {
  CHECK(energy_uj(39, 0.032) == doctest::Approx(1.248));
  CHECK(energy_uj(2.494, 0.140) == doctest::Approx(0.349).epsilon(1e-3));
  CHECK(energy_uj(0, 5) == 0.0);
  CHECK(latency_ms(3200, 1e8) == 0.032);
  CHECK(latency_ms(3200, 2e7) == 0.160);
  CHECK(latency_ms(2800, 2e7) == 0.140);
  CHECK_THROWS_AS(latency_ms(3200, 0), Error);
}

TEST_CASE("measured rows obey the energy identity") {
  for (const Platform* p : {&large(), &small()})
    for (const auto& row : p->profile().measured) {
      if (!row.power_mw || !row.latency_ms || !row.energy_uj) continue;
      CAPTURE(p->name());
      CAPTURE(arch_name(row.config.arch));
      CHECK(std::abs(*row.power_mw * *row.latency_ms - *row.energy_uj) <= 0.005 * *row.energy_uj);
    }
}

TEST_CASE("measured rows are reproduced") {
  for (const Platform* p : {&large(), &small()})
    for (const auto& row : p->profile().measured) {
      if (!row.lut_pct || !row.dsp_pct || !row.bram_pct || !row.power_mw || !row.latency_ms) continue;
      const CostReport r = p->cost(row.config);
      CHECK(r.source == "measured");
      CHECK(r.util.lut == *row.lut_pct);
      CHECK(r.util.dsp == *row.dsp_pct);
      CHECK(r.util.bram == *row.bram_pct);
      CHECK(r.power_mw == *row.power_mw);
      CHECK(r.latency_ms == *row.latency_ms);
      CHECK(r.energy_uj == *row.energy_uj);
      CHECK(r.deployable);
    }
}

TEST_CASE("clock scaling of the CNN configurations") {
  for (const ModelConfig& c : {cfg(Arch::Cnn1d, 3, 4), cfg(Arch::SepCnn1d, 3, 6)}) {
    const double fast = large().estimate(c).latency_ms, slow = small().estimate(c).latency_ms;
    CHECK(slow == 5 * fast);
    CHECK(large().cycles(c) == small().cycles(c));
  }
  CHECK(large().estimate(cfg(Arch::Cnn1d, 3, 4)).latency_ms == 0.032);
  CHECK(small().estimate(cfg(Arch::Cnn1d, 3, 4)).latency_ms == 0.160);
  CHECK(large().estimate(cfg(Arch::SepCnn1d, 3, 6)).latency_ms == 0.028);
  CHECK(small().estimate(cfg(Arch::SepCnn1d, 3, 6)).latency_ms == 0.140);
}

TEST_CASE("resource fits pass through their anchors") {
  for (const Platform* p : {&large(), &small()})
    for (const auto& row : p->profile().measured) {
      const Utilization u = p->estimate_resources(row.config);
      if (row.lut_pct) CHECK(u.lut == doctest::Approx(*row.lut_pct));
      if (row.bram_pct) CHECK(u.bram == doctest::Approx(*row.bram_pct));
      if (row.dsp_pct) CHECK(u.dsp == doctest::Approx(*row.dsp_pct));
    }
}

TEST_CASE("minimum-norm fit") {
  std::vector<std::pair<ModelConfig, double>> one{{cfg(Arch::Cnn1d, 3, 8), 20.0}};
  const ResourceFit f = fit_resource(one);
  const double s = size_feature(one[0].first);
  CHECK(f.predict(Arch::Cnn1d, s) == doctest::Approx(20.0));
  // minimum norm for one anchor: (intercept, slope) is parallel to (1, s)
  CHECK(f.slope.at(Arch::Cnn1d) == doctest::Approx(f.intercept * s));
  std::vector<std::pair<ModelConfig, double>> dup{{cfg(Arch::Cnn1d, 3, 8), 20.0}, {cfg(Arch::Cnn1d, 2, 8), 15.0}};
  CHECK_THROWS_AS(fit_resource(dup), Error);
}

TEST_CASE("estimates grow with size") {
  for (const Platform* p : {&large(), &small()})
    for (Arch a : {Arch::Cnn1d, Arch::SepCnn1d, Arch::Lstm, Arch::Transformer}) {
      const int lo = a == Arch::Lstm ? 8 : a == Arch::Transformer ? 8 : 1;
      const int hi = a == Arch::Lstm ? 64 : a == Arch::Transformer ? 32 : 5;
      const CostReport r1 = p->estimate(cfg(a, lo, 4)), r2 = p->estimate(cfg(a, hi, 8));
      CHECK(r2.util.lut >= r1.util.lut);
      CHECK(r2.latency_ms > r1.latency_ms);
      CHECK(r2.energy_uj > r1.energy_uj);
      CHECK(r1.energy_uj == doctest::Approx(r1.power_mw * r1.latency_ms));
    }
}

TEST_CASE("deployability verdicts") {
  CHECK(check_deployable({100, 100, 100}));
  CHECK_FALSE(check_deployable({100.01, 0, 0}));
  CHECK_FALSE(check_deployable({0, 0, 101}));

  const CostReport lstm8 = small().cost(cfg(Arch::Lstm, 24, 8));
  CHECK(lstm8.util.lut == 103.0);
  CHECK_FALSE(lstm8.deployable);
  CHECK(lstm8.source == "mixed");

  const CostReport lstm6 = small().cost(cfg(Arch::Lstm, 24, 6));
  CHECK(lstm6.energy_uj == 4.408);
  CHECK(lstm6.latency_ms == 1.722);
  CHECK(lstm6.power_mw == doctest::Approx(4.408 / 1.722));
  CHECK(lstm6.uncertain);

  const CostReport tr = small().cost(cfg(Arch::Transformer, 8, 4));
  CHECK_FALSE(tr.deployable);
  CHECK(tr.source == "estimated");
  CHECK(tr.verdict().find("not deployable") == 0);

  const CostReport big = large().cost(cfg(Arch::Transformer, 8, 4));
  CHECK(big.deployable);
  CHECK(big.verdict() == "deployable");
}

TEST_CASE("deployment identity ignores training fields") {
  ModelConfig a = cfg(Arch::Cnn1d, 3, 4), b = a;
  b.num_blocks = 3;
  b.h_size = 40;  // unused by the CNN
  CHECK(same_deployment(a, b));
  b.bits = 6;
  CHECK_FALSE(same_deployment(a, b));
}

TEST_CASE("battery life") {
  const double idle[] = {1.25, 2.28};
  const double days = battery_life_days(idle, 8.0, 0.350, 320, 3.6);
  CHECK(days == doctest::Approx(13.6).epsilon(0.02));
  CHECK(inference_power_mw(8.0, 0.350) == doctest::Approx(0.0028));
  const double one[] = {1.0};
  CHECK(battery_life_days(one, 0, 0, 320, 3.6) == doctest::Approx(48.0));
  double prev = 1e9;
  for (double e : {0.0, 0.35, 1.0, 10.0, 100.0}) {
    const double d = battery_life_days(idle, 8.0, e, 320, 3.6);
    CHECK(d < prev);
    prev = d;
  }
  const double none[] = {0.0};
  CHECK_THROWS_AS(battery_life_days(none, 0, 0, 320, 3.6), Error);
}

TEST_CASE("profiles load by name, path and directory override") {
  CHECK(large().profile().clock_hz == 1e8);
  CHECK(small().profile().transfer_from == "xc7s15");
  CHECK_THROWS_AS(Platform::load("no-such-board"), Error);

  const fs::path dir = fs::temp_directory_path() / ("gaitq_prof_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  PlatformProfile p = large().profile();
  p.name = "copy";
  std::ofstream(dir / "copy.json") << p.to_json().dump(2);
  CHECK(Platform::load((dir / "copy.json").string()).name() == "copy");
  ::setenv("GAITQ_PROFILE_DIR", dir.c_str(), 1);
  CHECK(Platform::profile_dir() == dir);
  CHECK(Platform::load("copy").estimate(cfg(Arch::Cnn1d, 3, 4)).latency_ms == 0.032);
  ::unsetenv("GAITQ_PROFILE_DIR");
  fs::remove_all(dir);

  CHECK(PlatformProfile::from_json(large().profile().to_json()).to_json() == large().profile().to_json());
  nlohmann::json bad = large().profile().to_json();
  bad["clock_hz"] = -1;
  CHECK_THROWS_AS(PlatformProfile::from_json(bad).validate(), Error);
}
