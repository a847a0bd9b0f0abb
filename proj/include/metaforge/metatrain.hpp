#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaforge/checkpoint.hpp"
#include "metaforge/dataio.hpp"
#include "metaforge/mutenc.hpp"
#include "metaforge/net.hpp"
#include "metaforge/params.hpp"
#include "metaforge/rng.hpp"

namespace metaforge {

/// One training example. `tokens` feed the transformer; `features` feed small
/// reference models. `task` is the provenance tag of the originating record.
struct Example {
  TokenSequence tokens;
  std::vector<double> features;
  double target = 0.0;
  std::string task;
};

/// Model interface the training loops are written against.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual ParamSet init(std::uint64_t seed) const = 0;
  virtual LossGrad loss_grad(const ParamSet& params, std::span<const Example> batch, Rng& rng, Mode mode) const = 0;
  virtual std::vector<double> predict(const ParamSet& params, std::span<const Example> batch) const = 0;
};

class TransformerLearner final : public Learner {
 public:
  explicit TransformerLearner(NetConfig config);

  const NetConfig& config() const noexcept { return config_; }

  ParamSet init(std::uint64_t seed) const override;
  LossGrad loss_grad(const ParamSet& params, std::span<const Example> batch, Rng& rng, Mode mode) const override;
  std::vector<double> predict(const ParamSet& params, std::span<const Example> batch) const override;

 private:
  NetConfig config_;
};

/// y = w . features (+ b). Parameters "w" [n_features] and optionally "b" [1].
class LinearLearner final : public Learner {
 public:
  explicit LinearLearner(std::size_t n_features, bool bias = false);

  ParamSet init(std::uint64_t seed) const override;
  LossGrad loss_grad(const ParamSet& params, std::span<const Example> batch, Rng& rng, Mode mode) const override;
  std::vector<double> predict(const ParamSet& params, std::span<const Example> batch) const override;

 private:
  std::size_t n_features_;
  bool bias_;
};

enum class InnerOptimizer { kSgd, kAdam };

std::string to_string(InnerOptimizer o);
InnerOptimizer parse_inner_optimizer(std::string_view text);

struct MamlConfig {
  double inner_lr = 0.01;
  double meta_lr = 0.001;
  std::size_t support_size = 8;
  std::size_t query_size = 8;
  std::size_t meta_batch = 4;
  std::size_t epochs = 50;
  std::size_t inner_steps = 5;
  std::size_t steps_per_epoch = 1;
  /// Clipping threshold on the averaged meta-gradient; 0 disables clipping.
  double clip_max_norm = 1.0;
  InnerOptimizer inner_optimizer = InnerOptimizer::kAdam;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Rejects unknown keys; missing keys keep their defaults.
  static MamlConfig from_json(const nlohmann::ordered_json& j);

  friend bool operator==(const MamlConfig&, const MamlConfig&) = default;
};

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  ParamSet m;
  ParamSet v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const ParamSet& params);

  /// Entries prefixed "optim." for checkpoint storage.
  ParamSet to_entries() const;
  static AdamState from_entries(const ParamSet& entries, const ParamSet& params);
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(ParamSet& params, const ParamSet& grad, AdamState& state, double lr);

/// Scales every tensor by max_norm / norm when the global norm exceeds max_norm.
ParamSet clip_grad(ParamSet grad, double max_norm);

/// A task's examples ready for training.
struct Task {
  std::string name;
  std::vector<Example> train;
  std::vector<Example> test;
};

std::vector<Example> to_examples(const std::vector<MutationRecord>& records, EncoderMode mode, std::size_t max_len);
Task to_task(const TaskDataset& ds, EncoderMode mode, std::size_t max_len);

struct Episode {
  std::string task;
  std::vector<Example> support;
  std::vector<Example> query;
};

/// Draws support_size + query_size distinct training examples. Throws DataError
/// naming the task when it has too few.
Episode sample_episode(const Task& task, const MamlConfig& cfg, Rng& rng);

struct InnerResult {
  ParamSet adapted;
  /// Eval-mode support loss before the first step and after each step.
  std::vector<double> support_losses;
};

/// Adapts a clone of `theta` on `support`; `theta` is left untouched.
InnerResult inner_adapt(const Learner& learner, const ParamSet& theta, std::span<const Example> support,
                        const MamlConfig& cfg, Rng& rng);

struct MetaStepMetrics {
  double support_loss_before = 0.0;
  double support_loss_after = 0.0;
  double query_loss_before = 0.0;
  double query_loss_after = 0.0;
  double grad_norm_preclip = 0.0;
  double grad_norm_postclip = 0.0;
  /// Episodes whose final support loss did not exceed the initial one.
  std::size_t support_improved = 0;
  std::size_t episodes = 0;
};

struct MetaGradient {
  /// Mean over episodes of the query-loss gradient at each adapted parameter set.
  ParamSet grad;
  MetaStepMetrics metrics;
};

/// First-order meta-gradient of `theta` over `episodes`, before clipping.
MetaGradient meta_gradient(const Learner& learner, const ParamSet& theta, std::span<const Episode> episodes,
                           const MamlConfig& cfg, Rng& rng);

/// meta_gradient, then clipping (unless clip_max_norm is 0) and one Adam step at meta_lr.
MetaStepMetrics meta_step(const Learner& learner, ParamSet& theta, std::span<const Episode> episodes,
                          const MamlConfig& cfg, AdamState& adam, Rng& rng);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_support_loss = 0.0;
  double mean_query_loss = 0.0;
  double grad_norm_preclip = 0.0;
  double grad_norm_postclip = 0.0;
  double wall_ms = 0.0;
  std::size_t support_improved = 0;
  std::size_t episodes = 0;

  nlohmann::ordered_json to_json() const;
};

struct TrainResult {
  ParamSet params;
  AdamState optimizer;
  std::vector<EpochLog> log;
  /// Task tags of every example that contributed to a meta-gradient.
  std::set<std::string> tasks_seen;
  std::size_t train_examples = 0;
  double wall_seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Episodic meta-training from `init`. Tasks are drawn uniformly with replacement.
TrainResult train_maml(const Learner& learner, ParamSet init, const std::vector<Task>& tasks, const MamlConfig& cfg,
                       const EpochCallback& on_epoch = {});

struct AdaptEval {
  std::vector<double> nmse;
  std::vector<double> mse;
  std::vector<std::uint64_t> seeds;
  double unadapted_nmse = 0.0;
  double unadapted_mse = 0.0;
};

/// Per trial i: draws support_size training examples with seed `seed + i`, adapts,
/// and scores the full test split.
AdaptEval adapt_and_eval(const Learner& learner, const ParamSet& theta, const Task& target, const MamlConfig& cfg,
                         std::size_t trials, std::uint64_t seed);

struct FinetuneConfig {
  std::size_t epochs = 10;
  double lr = 1e-4;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
  static FinetuneConfig from_json(const nlohmann::ordered_json& j);

  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

struct FinetuneResult {
  ParamSet params;
  AdamState optimizer;
  /// Mean train-mode batch loss per epoch.
  std::vector<double> epoch_losses;
  std::size_t optimizer_steps = 0;
  double wall_seconds = 0.0;
};

/// Mini-batch Adam on MSE, reshuffling every epoch.
FinetuneResult train_finetune(const Learner& learner, ParamSet init, const std::vector<Example>& train,
                              const FinetuneConfig& cfg);

/// Eval-mode NMSE of `params` over `examples`.
double evaluate_nmse(const Learner& learner, const ParamSet& params, std::span<const Example> examples);

}  // namespace metaforge
