#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gaitq/dataio.hpp"
#include "gaitq/models.hpp"
#include "gaitq/stream.hpp"

namespace gaitq {

/// Model input cut from one labeled segment, with its raw-sample interval.
struct Window {
  Tensor x;
  int label = 0;
  std::string participant;
  std::size_t segment = 0;  // index into the source segment list
  std::size_t start = 0, end = 0;
};

std::vector<Window> windows_from_segments(const std::vector<LabeledSegment>& segs, const StreamConfig& cfg);

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Chronological split of every segment: earliest windows to train, then
/// validation, then test. Sizes per segment are round(0.7 N), round(0.1 N)
/// and the remainder.
Split split_participant(std::span<const Window> windows, double train_ratio = 0.7, double val_ratio = 0.1);

/// Allowed batch sizes: 16 to 48 in steps of 8.
bool is_allowed_batch_size(int bs);

struct TrainConfig {
  int bs = 32;
  double lr = 5e-4;
  int epochs = 200;    // cap
  int patience = 10;   // epochs without validation-F1 improvement
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
};

struct EpochLog {
  std::string phase;
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
  double wall_s = 0.0;

  nlohmann::json to_json() const;
};

using EpochSink = std::function<void(const EpochLog&)>;

struct Samples {
  std::vector<Tensor> x;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

Samples gather(std::span<const Window> windows, std::span<const std::size_t> idx);

/// F1 of `positive`; 0 when there are no true positives.
double f1_score(std::span<const int> pred, std::span<const int> labels, int positive = kHeel);

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  double best_val_f1 = 0.0;
  int best_epoch = 0;
};

/// Float training with Adam and early stopping; returns the best-validation checkpoint.
TrainResult train_float(Model model, const Samples& train, const Samples& val, const TrainConfig& cfg,
                        const EpochSink& sink = {});

/// Calibrates activation ranges at `bits`, then runs QAT with frozen BN
/// statistics. The returned model is frozen and carries its integer twin.
TrainResult finetune_qat(Model model, int bits, const Samples& train, const Samples& val, const TrainConfig& cfg,
                         const EpochSink& sink = {});

/// Float pre-training on every participant except `held_out`.
TrainResult train_generalized(const ModelConfig& mcfg, std::span<const Window> windows, const std::string& held_out,
                              const TrainConfig& cfg, const EpochSink& sink = {});

struct StudyResult {
  Model model;
  std::vector<EpochLog> log;
  double generalized_test_f1 = 0.0;  // float pre-trained model on the subject's test split
  double val_f1 = 0.0;               // fake-quant, subject validation split
  double test_f1_fakequant = 0.0;
  double test_f1_int = 0.0;
  std::size_t test_windows = 0;
};

/// Generalized pre-training on the other participants, then QAT fine-tuning
/// on the subject's training split.
StudyResult two_step(const ModelConfig& mcfg, std::span<const Window> windows, const std::string& subject,
                     const TrainConfig& pretrain, const TrainConfig& finetune, const EpochSink& sink = {});

}  // namespace gaitq
