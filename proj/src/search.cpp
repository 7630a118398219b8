#include "gaitq/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "gaitq/error.hpp"
#include "gaitq/train.hpp"

namespace gaitq {

using nlohmann::json;
namespace fs = std::filesystem;

std::string TrialConfig::key() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s/%zu/%d/%d/%d/%.17g", arch_name(model.arch).c_str(), model.n, model.variable(),
                model.bits, bs, lr);
  return buf;
}

json TrialConfig::to_json() const {
  return {{"arch", arch_name(model.arch)}, {"n", model.n},   {"variable", model.variable()},
          {"bits", model.bits},            {"bs", bs},       {"lr", lr}};
}

TrialConfig TrialConfig::from_json(const json& j) {
  TrialConfig c;
  try {
    c.model.arch = parse_arch(j.at("arch").get<std::string>());
    c.model.n = j.value("n", c.model.n);
    c.model.set_variable(j.at("variable").get<int>());
    c.model.bits = j.at("bits").get<int>();
    c.bs = j.at("bs").get<int>();
    c.lr = j.at("lr").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("bad trial config: ") + e.what());
  }
  c.model.validate();
  return c;
}

SearchSpace SearchSpace::for_arch(Arch arch, std::size_t n) {
  SearchSpace s;
  s.arch = arch;
  s.n = n;
  switch (arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d:
      for (int b = 1; b <= 6; ++b)
        if (n >= (std::size_t{1} << (b - 1))) s.variables.push_back(b);
      break;
    case Arch::Lstm:
      for (int h = 8; h <= 64; h += 8) s.variables.push_back(h);
      break;
    case Arch::Transformer:
      s.variables = {8, 16, 24, 32};
      break;
  }
  return s;
}

void SearchSpace::validate() const {
  require(!variables.empty() && !bits.empty() && !batch_sizes.empty(), ErrorKind::Validation,
          "search space has an empty gene");
  ModelConfig m;
  m.arch = arch;
  m.n = n;
  for (int v : variables) {
    m.set_variable(v);
    for (int b : bits) {
      m.bits = b;
      m.validate();
    }
  }
  for (int bs : batch_sizes)
    require(is_allowed_batch_size(bs), ErrorKind::Validation, "batch size " + std::to_string(bs) + " not allowed");
  require(lr_min > 0 && lr_min <= lr_max, ErrorKind::Validation, "lr range must satisfy 0 < lr_min <= lr_max");
  for (double lr : lr_grid)
    require(lr >= lr_min && lr <= lr_max, ErrorKind::Validation, "lr grid value outside [lr_min, lr_max]");
}

std::optional<std::size_t> SearchSpace::size() const {
  if (lr_grid.empty()) return std::nullopt;
  return variables.size() * bits.size() * batch_sizes.size() * lr_grid.size();
}

std::vector<TrialConfig> SearchSpace::enumerate() const {
  require(!lr_grid.empty(), ErrorKind::Validation, "only discrete spaces can be enumerated");
  std::vector<TrialConfig> out;
  for (int v : variables)
    for (int b : bits)
      for (int bs : batch_sizes)
        for (double lr : lr_grid) {
          TrialConfig c;
          c.model.arch = arch;
          c.model.n = n;
          c.model.set_variable(v);
          c.model.bits = b;
          c.bs = bs;
          c.lr = lr;
          out.push_back(c);
        }
  return out;
}

json SearchSpace::to_json() const {
  json j = {{"arch", arch_name(arch)}, {"n", n},           {"variables", variables}, {"bits", bits},
            {"batch_sizes", batch_sizes}, {"lr_min", lr_min}, {"lr_max", lr_max}};
  if (!lr_grid.empty()) j["lr_grid"] = lr_grid;
  return j;
}

json Trial::to_json() const {
  json j = {{"index", index},           {"seed", seed}, {"config", config.to_json()}, {"f1", f1},
            {"energy_uj", energy_uj}, {"deployable", deployable}};
  if (!error.empty()) j["error"] = error;
  return j;
}

Trial Trial::from_json(const json& j) {
  Trial t;
  try {
    t.index = j.at("index").get<std::size_t>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.config = TrialConfig::from_json(j.at("config"));
    t.f1 = j.at("f1").get<double>();
    t.energy_uj = j.at("energy_uj").get<double>();
    t.deployable = j.at("deployable").get<bool>();
    t.error = j.value("error", std::string{});
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("bad trial record: ") + e.what());
  }
  return t;
}

bool dominates(const Trial& a, const Trial& b) {
  return a.f1 >= b.f1 && a.energy_uj <= b.energy_uj && (a.f1 > b.f1 || a.energy_uj < b.energy_uj);
}

std::vector<double> crowding_distance(std::span<const Trial> trials, std::span<const std::size_t> front) {
  const std::size_t m = front.size();
  std::vector<double> d(m, 0.0);
  if (m <= 2) {
    std::fill(d.begin(), d.end(), std::numeric_limits<double>::infinity());
    return d;
  }
  auto accumulate = [&](auto value) {
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return value(front[a]) < value(front[b]); });
    const double lo = value(front[order.front()]), hi = value(front[order.back()]);
    d[order.front()] = d[order.back()] = std::numeric_limits<double>::infinity();
    if (hi <= lo) return;
    for (std::size_t k = 1; k + 1 < m; ++k)
      d[order[k]] += (value(front[order[k + 1]]) - value(front[order[k - 1]])) / (hi - lo);
  };
  accumulate([&](std::size_t i) { return trials[i].f1; });
  accumulate([&](std::size_t i) { return trials[i].energy_uj; });
  return d;
}

namespace {

void order_by_crowding(std::span<const Trial> trials, std::vector<std::size_t>& front) {
  const auto d = crowding_distance(trials, front);
  std::vector<std::size_t> pos(front.size());
  std::iota(pos.begin(), pos.end(), 0);
  std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
  std::vector<std::size_t> sorted;
  for (std::size_t p : pos) sorted.push_back(front[p]);
  front = std::move(sorted);
}

}  // namespace

std::vector<std::vector<std::size_t>> nondominated_sort(std::span<const Trial> trials) {
  std::vector<std::size_t> feasible, infeasible;
  for (std::size_t i = 0; i < trials.size(); ++i) (trials[i].deployable ? feasible : infeasible).push_back(i);

  // Fast non-dominated sort over the feasible set.
  const std::size_t n = feasible.size();
  std::vector<std::vector<std::size_t>> dominated(n);
  std::vector<std::size_t> count(n, 0);
  std::vector<std::vector<std::size_t>> fronts;
  std::vector<std::size_t> current;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      if (dominates(trials[feasible[p]], trials[feasible[q]])) dominated[p].push_back(q);
      else if (dominates(trials[feasible[q]], trials[feasible[p]])) ++count[p];
    }
    if (count[p] == 0) current.push_back(p);
  }
  while (!current.empty()) {
    std::vector<std::size_t> next, front;
    for (std::size_t p : current) {
      front.push_back(feasible[p]);
      for (std::size_t q : dominated[p])
        if (--count[q] == 0) next.push_back(q);
    }
    std::sort(next.begin(), next.end());
    order_by_crowding(trials, front);
    fronts.push_back(std::move(front));
    current = std::move(next);
  }
  if (!infeasible.empty()) fronts.push_back(std::move(infeasible));
  return fronts;
}

std::vector<std::size_t> pareto_front(std::span<const Trial> trials) {
  const auto fronts = nondominated_sort(trials);
  if (fronts.empty() || !trials[fronts[0].front()].deployable) return {};
  std::vector<std::size_t> f = fronts[0];
  std::stable_sort(f.begin(), f.end(), [&](std::size_t a, std::size_t b) {
    if (trials[a].energy_uj != trials[b].energy_uj) return trials[a].energy_uj < trials[b].energy_uj;
    return a < b;
  });
  return f;
}

std::uint64_t trial_seed(std::uint64_t master, std::size_t index) {
  // splitmix64 finaliser over the pair.
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

class Nsga2 {
 public:
  Nsga2(const SearchSpace& space, const SearchOptions& opt, const Evaluator& eval, const TrialSink& sink)
      : space_(space), opt_(opt), eval_(eval), sink_(sink), rng_(opt.seed) {
    if (space_.size()) all_ = space_.enumerate();
  }

  SearchResult run() {
    const std::size_t budget = space_.size() ? std::min(opt_.budget, *space_.size()) : opt_.budget;
    std::vector<std::size_t> population;
    while (archive_.size() < budget && population.size() < opt_.population)
      population.push_back(evaluate(sample_unseen()));

    while (archive_.size() < budget) {
      const auto ranked = rank(population);
      std::vector<std::size_t> offspring;
      for (std::size_t k = 0; k < opt_.population && archive_.size() < budget; ++k) {
        const TrialConfig& a = archive_[tournament(population, ranked)].config;
        const TrialConfig& b = archive_[tournament(population, ranked)].config;
        offspring.push_back(evaluate(make_child(a, b)));
      }
      population.insert(population.end(), offspring.begin(), offspring.end());
      population = survivors(population);
    }
    SearchResult r;
    r.archive = std::move(archive_);
    r.front = pareto_front(r.archive);
    return r;
  }

 private:
  struct Rank {
    std::size_t front;
    double crowding;
  };

  TrialConfig random_config() {
    TrialConfig c;
    c.model.arch = space_.arch;
    c.model.n = space_.n;
    c.model.set_variable(pick(space_.variables));
    c.model.bits = pick(space_.bits);
    c.bs = pick(space_.batch_sizes);
    if (!space_.lr_grid.empty()) {
      c.lr = pick(space_.lr_grid);
    } else {
      std::uniform_real_distribution<double> u(std::log(space_.lr_min), std::log(space_.lr_max));
      c.lr = std::exp(u(rng_));
    }
    return c;
  }

  template <class T>
  T pick(const std::vector<T>& v) {
    std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
    return v[d(rng_)];
  }

  bool coin(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }

  TrialConfig sample_unseen() {
    for (int attempt = 0; attempt < 64; ++attempt) {
      TrialConfig c = random_config();
      if (!seen_.count(c.key())) return c;
    }
    // Dense discrete space: take a random unseen point directly.
    require(!all_.empty(), ErrorKind::Validation, "search could not find an unseen configuration");
    std::vector<const TrialConfig*> left;
    for (const auto& c : all_)
      if (!seen_.count(c.key())) left.push_back(&c);
    require(!left.empty(), ErrorKind::Validation, "search space exhausted");
    std::uniform_int_distribution<std::size_t> d(0, left.size() - 1);
    return *left[d(rng_)];
  }

  TrialConfig make_child(const TrialConfig& a, const TrialConfig& b) {
    for (int attempt = 0; attempt < 16; ++attempt) {
      TrialConfig c = a;
      if (coin(0.5)) c.model.set_variable(b.model.variable());
      if (coin(0.5)) c.model.bits = b.model.bits;
      if (coin(0.5)) c.bs = b.bs;
      if (coin(0.5)) c.lr = b.lr;
      if (coin(opt_.mutation)) c.model.set_variable(pick(space_.variables));
      if (coin(opt_.mutation)) c.model.bits = pick(space_.bits);
      if (coin(opt_.mutation)) c.bs = pick(space_.batch_sizes);
      if (coin(opt_.mutation)) {
        if (!space_.lr_grid.empty()) {
          c.lr = pick(space_.lr_grid);
        } else {
          const double span = std::log(space_.lr_max / space_.lr_min);
          std::normal_distribution<double> step(0.0, 0.1 * span);
          c.lr = std::clamp(std::exp(std::log(c.lr) + step(rng_)), space_.lr_min, space_.lr_max);
        }
      }
      if (!seen_.count(c.key())) return c;
    }
    return sample_unseen();
  }

  std::size_t evaluate(const TrialConfig& cfg) {
    Trial t;
    t.index = archive_.size();
    t.seed = trial_seed(opt_.seed, t.index);
    t.config = cfg;
    try {
      double f1 = 0;
      for (int r = 0; r < opt_.repeats; ++r) {
        const Evaluation e = eval_(cfg, r == 0 ? t.seed : trial_seed(t.seed, static_cast<std::size_t>(r)));
        require(std::isfinite(e.f1) && std::isfinite(e.energy_uj), ErrorKind::Numeric,
                "evaluator returned a non-finite objective");
        f1 += e.f1;
        if (r == 0) {
          t.energy_uj = e.energy_uj;
          t.deployable = e.deployable;
        }
        if (!e.deployable) break;
      }
      t.f1 = t.deployable ? f1 / opt_.repeats : f1;
    } catch (const std::exception& e) {
      t.f1 = 0;
      t.energy_uj = 0;
      t.deployable = false;
      t.error = e.what();
    }
    seen_.insert(cfg.key());
    archive_.push_back(t);
    if (sink_) sink_(archive_.back());
    return t.index;
  }

  std::map<std::size_t, Rank> rank(const std::vector<std::size_t>& members) {
    std::vector<Trial> sub;
    for (std::size_t i : members) sub.push_back(archive_[i]);
    std::map<std::size_t, Rank> out;
    const auto fronts = nondominated_sort(sub);
    for (std::size_t f = 0; f < fronts.size(); ++f) {
      const auto d = crowding_distance(sub, fronts[f]);
      for (std::size_t k = 0; k < fronts[f].size(); ++k) out[members[fronts[f][k]]] = {f, d[k]};
    }
    return out;
  }

  std::size_t tournament(const std::vector<std::size_t>& population, const std::map<std::size_t, Rank>& ranked) {
    const std::size_t a = pick(population), b = pick(population);
    const Rank& ra = ranked.at(a);
    const Rank& rb = ranked.at(b);
    if (ra.front != rb.front) return ra.front < rb.front ? a : b;
    return rb.crowding > ra.crowding ? b : a;
  }

  std::vector<std::size_t> survivors(const std::vector<std::size_t>& pool) {
    std::vector<Trial> sub;
    for (std::size_t i : pool) sub.push_back(archive_[i]);
    std::vector<std::size_t> next;
    for (const auto& front : nondominated_sort(sub)) {
      // Fronts arrive ordered by crowding distance, so truncation keeps the most spread members.
      for (std::size_t k : front) {
        if (next.size() == opt_.population) return next;
        next.push_back(pool[k]);
      }
    }
    return next;
  }

  const SearchSpace& space_;
  const SearchOptions& opt_;
  const Evaluator& eval_;
  const TrialSink& sink_;
  std::mt19937_64 rng_;
  std::vector<TrialConfig> all_;
  std::set<std::string> seen_;
  std::vector<Trial> archive_;
};

}  // namespace

SearchResult run_search(const SearchSpace& space, const SearchOptions& opt, const Evaluator& eval,
                        const TrialSink& sink) {
  space.validate();
  require(opt.population >= 2, ErrorKind::Validation, "population must be at least 2");
  require(opt.budget >= opt.population, ErrorKind::Validation, "budget must be at least the population size");
  require(opt.mutation >= 0 && opt.mutation <= 1, ErrorKind::Validation, "mutation probability must be in [0, 1]");
  require(opt.repeats >= 1, ErrorKind::Validation, "repeats must be at least 1");
  require(static_cast<bool>(eval), ErrorKind::Validation, "search needs an evaluator");
  return Nsga2(space, opt, eval, sink).run();
}

namespace {

std::ofstream open_out(const fs::path& file) {
  std::ofstream out(file, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write " + file.string());
  return out;
}

}  // namespace

void write_archive(const fs::path& file, std::span<const Trial> archive) {
  auto out = open_out(file);
  for (const auto& t : archive) out << t.to_json().dump() << '\n';
  require(out.good(), ErrorKind::Io, "write failed for " + file.string());
}

std::vector<Trial> read_archive(const fs::path& file) {
  std::ifstream in(file);
  require(in.good(), ErrorKind::Io, "cannot open " + file.string());
  std::vector<Trial> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(Trial::from_json(json::parse(line)));
    } catch (const json::parse_error&) {
      fail(ErrorKind::Io, file.string() + ":" + std::to_string(no) + ": malformed JSON");
    } catch (const Error& e) {
      fail(ErrorKind::Io, file.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

void write_front(const fs::path& file, std::span<const Trial> archive, std::span<const std::size_t> front) {
  json arr = json::array();
  for (std::size_t i : front) arr.push_back(archive[i].to_json());
  auto out = open_out(file);
  out << arr.dump(2) << '\n';
  require(out.good(), ErrorKind::Io, "write failed for " + file.string());
}

void write_scatter_csv(const fs::path& file, std::span<const Trial> archive, std::span<const std::size_t> front) {
  const std::set<std::size_t> on_front(front.begin(), front.end());
  auto out = open_out(file);
  out << "index,arch,variable,bits,bs,lr,f1,energy_uj,deployable,pareto\n";
  char buf[256];
  for (const auto& t : archive) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%d,%d,%d,%.6g,%.6f,%.6f,%d,%d\n", t.index,
                  arch_name(t.config.model.arch).c_str(), t.config.model.variable(), t.config.model.bits, t.config.bs,
                  t.config.lr, t.f1, t.energy_uj, t.deployable ? 1 : 0, on_front.count(t.index) ? 1 : 0);
    out << buf;
  }
  require(out.good(), ErrorKind::Io, "write failed for " + file.string());
}

}  // namespace gaitq
