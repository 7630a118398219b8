#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <unistd.h>

#include "gaitq/search.hpp"
#include "oracles.hpp"

using namespace gaitq;

namespace {

Trial point(double f1, double e, bool ok = true, std::size_t index = 0) {
  Trial t;
  t.f1 = f1;
  t.energy_uj = e;
  t.deployable = ok;
  t.index = index;
  return t;
}

SearchSpace discrete_lstm() {
  SearchSpace s = SearchSpace::for_arch(Arch::Lstm);
  s.lr_grid = {1e-5, 1e-4, 3e-4, 1e-3};
  return s;
}

Evaluator synthetic() {
  return [](const TrialConfig& c, std::uint64_t) { return testing::synthetic_objective(c); };
}

std::set<std::string> keys(const std::vector<Trial>& all, const std::vector<std::size_t>& idx) {
  std::set<std::string> k;
  for (auto i : idx) k.insert(all[i].config.key());
  return k;
}

}  // namespace

TEST_CASE("dominance") {
  CHECK(dominates(point(0.9, 1), point(0.8, 2)));
  CHECK(dominates(point(0.9, 1), point(0.9, 2)));
  CHECK_FALSE(dominates(point(0.9, 1), point(0.9, 1)));
  CHECK_FALSE(dominates(point(0.9, 2), point(0.8, 1)));
}

TEST_CASE("non-dominated sorting against brute force") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> grid(0, 9);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<Trial> ts;
    for (std::size_t i = 0; i < 50; ++i) ts.push_back(point(grid(rng) / 10.0, grid(rng), rng() % 8 != 0, i));
    const auto fronts = nondominated_sort(ts);
    // peel the brute-force front repeatedly
    std::vector<Trial> rest = ts;
    std::vector<std::size_t> alive(ts.size());
    for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;
    std::size_t level = 0;
    std::size_t feasible = 0;
    for (const auto& t : ts) feasible += t.deployable;
    std::size_t covered = 0;
    while (covered < feasible) {
      std::vector<Trial> sub;
      for (auto i : alive) sub.push_back(ts[i]);
      const auto bf = testing::brute_force_front(sub);
      std::set<std::size_t> want;
      for (auto j : bf) want.insert(alive[j]);
      REQUIRE(level < fronts.size());
      CHECK(std::set<std::size_t>(fronts[level].begin(), fronts[level].end()) == want);
      std::vector<std::size_t> next;
      for (auto i : alive)
        if (!want.count(i)) next.push_back(i);
      alive = next;
      covered += want.size();
      ++level;
    }
    if (feasible < ts.size()) {
      REQUIRE(fronts.size() == level + 1);
      for (auto i : fronts.back()) CHECK_FALSE(ts[i].deployable);
    } else {
      CHECK(fronts.size() == level);
    }
    const auto pf = pareto_front(ts), bf = testing::brute_force_front(ts);
    CHECK(std::set<std::size_t>(pf.begin(), pf.end()) == std::set<std::size_t>(bf.begin(), bf.end()));
  }
}

TEST_CASE("a dominance chain gives singleton fronts") {
  std::vector<Trial> ts{point(0.7, 3, true, 0), point(0.9, 1, true, 1), point(0.8, 2, true, 2)};
  const auto fronts = nondominated_sort(ts);
  REQUIRE(fronts.size() == 3);
  CHECK(fronts[0] == std::vector<std::size_t>{1});
  CHECK(fronts[1] == std::vector<std::size_t>{2});
  CHECK(fronts[2] == std::vector<std::size_t>{0});
}

TEST_CASE("crowding distance") {
  std::vector<Trial> ts{point(0.5, 1), point(0.6, 2), point(0.8, 4), point(0.9, 8)};
  const std::vector<std::size_t> all{0, 1, 2, 3};
  const auto d = crowding_distance(ts, all);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(d[0] == inf);
  CHECK(d[3] == inf);
  // (0.8 - 0.5)/0.4 + (4 - 1)/7
  CHECK(d[1] == doctest::Approx(0.3 / 0.4 + 3.0 / 7));
  CHECK(d[2] == doctest::Approx(0.3 / 0.4 + 6.0 / 7));
  const std::vector<std::size_t> two{1, 2};
  for (double v : crowding_distance(ts, two)) CHECK(v == inf);
}

TEST_CASE("search spaces") {
  const SearchSpace cnn = SearchSpace::for_arch(Arch::Cnn1d);
  CHECK(cnn.variables == std::vector<int>{1, 2, 3, 4, 5});
  CHECK_FALSE(cnn.size().has_value());
  const SearchSpace s = discrete_lstm();
  REQUIRE(s.size().has_value());
  CHECK(*s.size() == 8 * 3 * 5 * 4);
  const auto all = s.enumerate();
  CHECK(all.size() == *s.size());
  std::set<std::string> k;
  for (const auto& c : all) k.insert(c.key());
  CHECK(k.size() == all.size());
  SearchSpace bad = s;
  bad.bits = {5};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = s;
  bad.batch_sizes = {20};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("trial config serialization") {
  TrialConfig c;
  c.model.arch = Arch::Transformer;
  c.model.d_model = 16;
  c.model.bits = 6;
  c.bs = 40;
  c.lr = 3.7e-4;
  const TrialConfig back = TrialConfig::from_json(c.to_json());
  CHECK(back.key() == c.key());
  CHECK(back.model == c.model);
}

TEST_CASE("exhaustive budget recovers the brute-force front") {
  const SearchSpace s = discrete_lstm();
  SearchOptions o;
  o.budget = *s.size();
  const auto r = run_search(s, o, synthetic());
  CHECK(r.archive.size() == *s.size());
  std::vector<Trial> truth;
  for (const auto& c : s.enumerate()) {
    const auto e = testing::synthetic_objective(c);
    Trial t;
    t.config = c;
    t.f1 = e.f1;
    t.energy_uj = e.energy_uj;
    t.deployable = e.deployable;
    truth.push_back(t);
  }
  CHECK(keys(r.archive, r.front) == keys(truth, testing::brute_force_front(truth)));
}

TEST_CASE("budget handling") {
  const SearchSpace s = discrete_lstm();
  SearchOptions o;
  o.budget = 1000;
  int calls = 0;
  const auto r = run_search(s, o, [&](const TrialConfig& c, std::uint64_t) {
    ++calls;
    return testing::synthetic_objective(c);
  });
  CHECK(static_cast<std::size_t>(calls) == *s.size());

  SearchSpace cont = SearchSpace::for_arch(Arch::Cnn1d);
  o.budget = 60;
  calls = 0;
  std::set<std::string> seen;
  const auto rc = run_search(cont, o, [&](const TrialConfig& c, std::uint64_t) {
    ++calls;
    seen.insert(c.key());
    CHECK(c.lr >= cont.lr_min);
    CHECK(c.lr <= cont.lr_max);
    return Evaluation{0.5 + 0.05 * c.model.bits, static_cast<double>(c.model.variable()), true};
  });
  CHECK(calls == 60);
  CHECK(seen.size() == 60);
  CHECK(rc.archive.size() == 60);
  for (std::size_t i = 0; i < rc.archive.size(); ++i) CHECK(rc.archive[i].index == i);

  o.budget = 10;
  CHECK_THROWS_AS(run_search(cont, o, synthetic()), Error);
}

TEST_CASE("search is deterministic and its front is non-dominated") {
  const SearchSpace s = discrete_lstm();
  SearchOptions o;
  o.budget = 100;
  o.seed = 7;
  const auto a = run_search(s, o, synthetic()), b = run_search(s, o, synthetic());
  REQUIRE(a.archive.size() == b.archive.size());
  for (std::size_t i = 0; i < a.archive.size(); ++i)
    CHECK(a.archive[i].to_json().dump() == b.archive[i].to_json().dump());
  CHECK(a.front == b.front);
  CHECK(keys(a.archive, a.front) == keys(a.archive, testing::brute_force_front(a.archive)));
  for (std::size_t i = 1; i < a.front.size(); ++i)
    CHECK(a.archive[a.front[i - 1]].energy_uj <= a.archive[a.front[i]].energy_uj);
  o.seed = 8;
  const auto c = run_search(s, o, synthetic());
  CHECK(keys(c.archive, std::vector<std::size_t>{0, 1, 2, 3, 4}) !=
        keys(a.archive, std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST_CASE("repeats average the evaluator's F1") {
  const SearchSpace s = discrete_lstm();
  SearchOptions o;
  o.budget = 20;
  o.repeats = 3;
  std::map<std::string, std::set<std::uint64_t>> seeds;
  const auto r = run_search(s, o, [&](const TrialConfig& c, std::uint64_t seed) {
    seeds[c.key()].insert(seed);
    return Evaluation{static_cast<double>(seed % 3), 1.0, true};
  });
  for (const auto& t : r.archive) {
    CHECK(seeds[t.config.key()].size() == 3);
    double mean = 0;
    for (auto sd : seeds[t.config.key()]) mean += static_cast<double>(sd % 3) / 3;
    CHECK(t.f1 == doctest::Approx(mean));
  }
}

TEST_CASE("evaluator failures are recorded, not fatal") {
  const SearchSpace s = discrete_lstm();
  SearchOptions o;
  o.budget = 40;
  const auto r = run_search(s, o, [](const TrialConfig& c, std::uint64_t) -> Evaluation {
    if (c.model.h_size == 16) throw Error(ErrorKind::Numeric, "diverged");
    return testing::synthetic_objective(c);
  });
  CHECK(r.archive.size() == 40);
  for (const auto& t : r.archive)
    if (t.config.model.h_size == 16) {
      CHECK_FALSE(t.deployable);
      CHECK(t.error.find("diverged") != std::string::npos);
    }
  for (auto i : r.front) CHECK(r.archive[i].error.empty());
}

TEST_CASE("archive files") {
  const SearchSpace s = discrete_lstm();
  SearchOptions o;
  o.budget = 30;
  const auto r = run_search(s, o, synthetic());
  const auto dir = std::filesystem::temp_directory_path() / ("gaitq_search_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  write_archive(dir / "archive.jsonl", r.archive);
  const auto back = read_archive(dir / "archive.jsonl");
  REQUIRE(back.size() == r.archive.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i].to_json() == r.archive[i].to_json());
  CHECK(pareto_front(back) == r.front);

  write_scatter_csv(dir / "scatter.csv", r.archive, r.front);
  std::ifstream csv(dir / "scatter.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "index,arch,variable,bits,bs,lr,f1,energy_uj,deployable,pareto");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == r.archive.size());

  std::ofstream(dir / "bad.jsonl") << r.archive[0].to_json().dump() << "\n{oops\n";
  try {
    read_archive(dir / "bad.jsonl");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}
