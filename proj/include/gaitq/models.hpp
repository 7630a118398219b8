#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gaitq/autodiff.hpp"
#include "gaitq/int_kernels.hpp"
#include "gaitq/quant.hpp"
#include "gaitq/tensor.hpp"

namespace gaitq {

enum class Arch { Cnn1d, SepCnn1d, Lstm, Transformer };

std::string arch_name(Arch a);
/// Accepts "cnn", "sepcnn", "lstm", "transformer" (case-insensitive).
Arch parse_arch(const std::string& s);

// Class indices used everywhere (metrics, serialization, trigger).
inline constexpr int kForefoot = 0;
inline constexpr int kHeel = 1;

struct ModelConfig {
  Arch arch = Arch::Cnn1d;
  std::size_t n = 25;
  std::size_t c_in = 3;
  std::size_t classes = 2;
  int num_blocks = 3;  // Cnn1d, SepCnn1d
  int h_size = 24;     // Lstm
  int d_model = 8;     // Transformer
  int bits = 8;

  void validate() const;
  /// Only the fields relevant to `arch` are written.
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// num_blocks, h_size or d_model depending on arch.
  int variable() const;
  void set_variable(int v);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Output channels per block: 3, 3, then doubling every two blocks.
std::vector<std::size_t> channel_schedule(int num_blocks);
/// Width of the first dense layer of the CNN heads.
std::size_t dense_hidden_width(std::size_t final_channels);

struct LayerInfo {
  std::string name;
  std::string kind;
  Shape in, out;
  std::size_t params = 0;
  std::size_t macs = 0;
};

/// Layer-by-layer shape, parameter and MAC trace.
std::vector<LayerInfo> describe(const ModelConfig& cfg);
std::string describe_text(const ModelConfig& cfg);
std::size_t param_count(const ModelConfig& cfg);
std::size_t mac_count(const ModelConfig& cfg);

/// Integer-only twin: folded, quantized weights plus frozen activation scales.
struct IntModel {
  static constexpr int kVersion = 1;

  ModelConfig config;
  std::map<std::string, QTensor> weights;
  std::map<std::string, QBias> biases;
  std::map<std::string, QuantParams> acts;

  /// x is [c_in x n]; returns integer logits on the "logits" scale.
  QTensor forward(const Tensor& x, MacCounter* mc = nullptr) const;
  int predict(const Tensor& x) const;

  nlohmann::json to_json() const;
  static IntModel from_json(const nlohmann::json& j);

  friend bool operator==(const IntModel&, const IntModel&) = default;
};

enum class Mode { Float, FakeQuant, Int };

/// Graph passes. Folded passes use running BN statistics.
enum class Pass {
  FloatTrain,  // batch statistics, updates running stats
  FloatEval,   // folded, no quantization
  Calibrate,   // folded, no quantization, observes activation ranges
  QatTrain,    // folded, fake-quantized, ranges updated by EMA
  QuantEval,   // folded, fake-quantized with frozen scales
};

class Model;

struct GraphOut {
  ad::Var logits;
  std::map<std::string, ad::Var> params;
};

/// Records one batched pass of `m` on x [B x c_in x n]. Mutating passes
/// (FloatTrain, Calibrate, QatTrain) update `m` in place.
GraphOut build_graph(ad::Tape& tape, Model& m, const Tensor& x, Pass pass);

class Model {
 public:
  static constexpr int kVersion = 1;

  static Model build(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, ops::BatchNormState>& bn_states() { return bn_; }
  const std::map<std::string, ops::BatchNormState>& bn_states() const { return bn_; }
  std::map<std::string, RangeTracker>& ranges() { return ranges_; }
  const std::map<std::string, RangeTracker>& ranges() const { return ranges_; }

  std::size_t parameter_count() const;

  /// Sets the bitwidth used by the quantized passes; clears frozen state.
  void set_bits(int bits);
  void reset_ranges();
  bool frozen() const { return !acts_.empty(); }
  const std::map<std::string, QuantParams>& act_params() const { return acts_; }
  const QuantParams& act_params(const std::string& name) const;

  /// Freezes activation scales from the trackers and builds the integer twin.
  void freeze();
  const std::optional<IntModel>& int_model() const { return int_; }
  /// Integer export from the current weights and frozen scales.
  IntModel export_int() const;

  /// Logits for a single input [c_in x n].
  Tensor forward(const Tensor& x, Mode mode) const;
  /// Logits [B x classes] for a batch [B x c_in x n] (Float or FakeQuant).
  Tensor forward_batch(const Tensor& x, Mode mode) const;
  std::vector<int> predict(const std::vector<Tensor>& xs, Mode mode) const;

  nlohmann::json to_json() const;
  static Model from_json(const nlohmann::json& j);

 private:
  friend GraphOut build_graph(ad::Tape&, Model&, const Tensor&, Pass);
  friend class GraphBuilder;

  ModelConfig cfg_;
  std::map<std::string, Tensor> params_;
  std::map<std::string, ops::BatchNormState> bn_;
  std::map<std::string, RangeTracker> ranges_;
  std::map<std::string, QuantParams> acts_;
  std::optional<IntModel> int_;
};

/// Observes activation ranges of `m` on a batch [B x c_in x n] (no quantization).
void observe_ranges(Model& m, const Tensor& batch);

/// Stacks [c_in x n] samples into a batch [B x c_in x n].
Tensor stack_batch(const std::vector<Tensor>& xs);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace gaitq
