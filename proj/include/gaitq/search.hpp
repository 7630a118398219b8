#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gaitq/models.hpp"

namespace gaitq {

struct TrialConfig {
  ModelConfig model;
  int bs = 32;
  double lr = 5e-4;

  /// Canonical identity used to deduplicate trials.
  std::string key() const;
  nlohmann::json to_json() const;
  static TrialConfig from_json(const nlohmann::json& j);
};

struct SearchSpace {
  Arch arch = Arch::Cnn1d;
  std::size_t n = 25;
  std::vector<int> variables;  // num_blocks, h_size or d_model
  std::vector<int> bits{4, 6, 8};
  std::vector<int> batch_sizes{16, 24, 32, 40, 48};
  double lr_min = 1e-5, lr_max = 1e-3;
  /// When non-empty, lr is drawn from this grid instead of the log-uniform range.
  std::vector<double> lr_grid;

  /// Default space for `arch`; CNN depths are limited to those valid at n.
  static SearchSpace for_arch(Arch arch, std::size_t n = 25);
  void validate() const;
  /// Number of distinct configurations, or nullopt when lr is continuous.
  std::optional<std::size_t> size() const;
  /// Every configuration of a discrete space, in gene order.
  std::vector<TrialConfig> enumerate() const;
  nlohmann::json to_json() const;
};

struct Evaluation {
  double f1 = 0;
  double energy_uj = 0;
  bool deployable = true;
};

using Evaluator = std::function<Evaluation(const TrialConfig&, std::uint64_t seed)>;

struct Trial {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  TrialConfig config;
  double f1 = 0;
  double energy_uj = 0;
  bool deployable = false;
  std::string error;  // evaluator failure, if any

  nlohmann::json to_json() const;
  static Trial from_json(const nlohmann::json& j);
};

/// a is no worse in both objectives (higher F1, lower energy) and better in one.
bool dominates(const Trial& a, const Trial& b);

/// Crowding distance of each member of `front` (indices into trials).
std::vector<double> crowding_distance(std::span<const Trial> trials, std::span<const std::size_t> front);

/// Fronts of deployable trials, best first, each ordered by decreasing
/// crowding distance. Non-deployable trials form one trailing front.
std::vector<std::vector<std::size_t>> nondominated_sort(std::span<const Trial> trials);

/// Non-dominated deployable trials, ordered by energy.
std::vector<std::size_t> pareto_front(std::span<const Trial> trials);

std::uint64_t trial_seed(std::uint64_t master, std::size_t index);

struct SearchOptions {
  std::size_t budget = 200;
  std::size_t population = 20;
  double mutation = 0.2;  // per gene
  int repeats = 1;        // F1 averaged over this many evaluations
  std::uint64_t seed = 1;
};

struct SearchResult {
  std::vector<Trial> archive;
  std::vector<std::size_t> front;  // indices into archive
};

using TrialSink = std::function<void(const Trial&)>;

/// NSGA-II over `space`. Evaluates exactly min(budget, |space|) distinct
/// configurations; the front is taken from the whole archive.
SearchResult run_search(const SearchSpace& space, const SearchOptions& opt, const Evaluator& eval,
                        const TrialSink& sink = {});

void write_archive(const std::filesystem::path& file, std::span<const Trial> archive);
std::vector<Trial> read_archive(const std::filesystem::path& file);
void write_front(const std::filesystem::path& file, std::span<const Trial> archive, std::span<const std::size_t> front);
/// One row per trial with a pareto column, for plotting F1 against energy.
void write_scatter_csv(const std::filesystem::path& file, std::span<const Trial> archive,
                       std::span<const std::size_t> front);

}  // namespace gaitq
