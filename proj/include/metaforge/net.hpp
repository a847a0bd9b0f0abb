#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaforge/mutenc.hpp"
#include "metaforge/params.hpp"
#include "metaforge/rng.hpp"

namespace metaforge {

/// Transformer-encoder regressor shape. The regression head is fixed at
/// 256 -> 128 -> 1 with ReLU after the two hidden layers.
struct NetConfig {
  std::size_t vocab_size = 24;
  std::size_t max_len = 1024;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t ff_dim = 64;
  double dropout = 0.1;

  static constexpr std::array<std::size_t, 3> kHeadDims = {256, 128, 1};

  /// Throws ContractViolation on an unusable configuration.
  void validate() const;

  /// Closed-form trainable parameter count.
  std::size_t param_count() const;

  nlohmann::ordered_json to_json() const;
  static NetConfig from_json(const nlohmann::ordered_json& j);

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

enum class Mode { kTrain, kEval };

/// Xavier-uniform weights, zero biases, unit layernorm scales, zero shifts.
ParamSet init_params(const NetConfig& config, std::uint64_t seed);

/// Optional capture of intermediate values for inspection and tests.
struct ForwardTrace {
  /// Attention probabilities per layer and head, each [batch, len, len].
  std::vector<Tensor> attention;
};

/// Records the forward pass on `tape`; returns predictions of shape [batch].
/// Dropout masks are drawn from `rng` only in train mode.
Var forward(Tape& tape, const ParamVars& params, const NetConfig& config, std::span<const TokenSequence> batch,
            Mode mode, Rng& rng, ForwardTrace* trace = nullptr);

/// Eval-mode predictions.
std::vector<double> predict(const ParamSet& params, const NetConfig& config, std::span<const TokenSequence> batch);

/// Mean of squared residuals, recorded on the tape. `targets` has shape [batch].
Var loss_mse(const Var& predictions, const Var& targets);
double loss_mse(std::span<const double> predictions, std::span<const double> targets);

struct LossGrad {
  double loss = 0.0;
  ParamSet grad;
};

/// MSE loss and its gradient for every parameter.
LossGrad grads(const ParamSet& params, const NetConfig& config, std::span<const TokenSequence> batch,
               std::span<const double> targets, Rng& rng, Mode mode = Mode::kTrain);

}  // namespace metaforge
