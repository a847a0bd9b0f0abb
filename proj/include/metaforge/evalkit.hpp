#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaforge/dataio.hpp"
#include "metaforge/metatrain.hpp"
#include "metaforge/metrics.hpp"
#include "metaforge/mutenc.hpp"
#include "metaforge/net.hpp"

namespace metaforge {

enum class Protocol { kCrossTask, kPooledMeta, kFinetune, kFinetunePooled };

std::string to_string(Protocol p);
Protocol parse_protocol(std::string_view text);

struct RunReport {
  Protocol protocol = Protocol::kCrossTask;
  std::string target_task;
  EncoderMode encoder = EncoderMode::kEnhanced;
  std::vector<double> trial_nmse;
  std::vector<std::uint64_t> seeds;
  double nmse_mean = 0.0;
  /// Population variance over trials.
  double nmse_variance = 0.0;
  double unadapted_nmse = 0.0;
  double wall_seconds = 0.0;
  std::size_t train_size = 0;
  std::vector<std::string> training_tasks;
  std::string config_hash;
  std::string checkpoint_hash;

  /// Fills mean and variance from trial_nmse.
  void summarize();

  nlohmann::ordered_json to_json() const;
  static RunReport from_json(const nlohmann::ordered_json& j);
};

/// Everything that shapes a run; hashed into each report.
struct ExperimentConfig {
  NetConfig net;
  MamlConfig maml;
  FinetuneConfig finetune;
  EncoderMode encoder = EncoderMode::kEnhanced;
  std::size_t trials = 3;

  nlohmann::ordered_json to_json() const;
  std::string hash() const;
};

/// Hex SHA-256 prefix (16 characters).
std::string short_hash(const std::string& bytes);

struct MetaRun {
  TrainResult train;
  std::vector<RunReport> reports;
};

/// Meta-trains on every task except `target`, then adapts and scores on the target
/// test split once per trial seed. Throws ContractViolation if any target record
/// reached training.
MetaRun run_cross_task(const std::vector<TaskDataset>& all, const std::string& target, const ExperimentConfig& cfg);

/// Meta-trains once on every train split, then reports each task.
MetaRun run_pooled(const std::vector<TaskDataset>& all, const ExperimentConfig& cfg);

struct FinetuneRun {
  RunReport report;
  /// Parameters and optimizer state from the first trial.
  FinetuneResult first;
};

/// Supervised baseline on the target train split (or every train split when
/// `pooled`), retrained per trial seed and scored on the target test split.
FinetuneRun run_finetune(const std::vector<TaskDataset>& all, const std::string& target, const ExperimentConfig& cfg,
                         bool pooled);

struct ComparisonRow {
  std::string task;
  std::string method;
  double wall_seconds = 0.0;
  std::size_t train_size = 0;
  std::size_t trials = 0;
  double nmse_mean = 0.0;
  double nmse_variance = 0.0;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;

  nlohmann::ordered_json to_json() const;
  std::string to_text() const;
};

/// One row per report, sorted by task then method; mean and variance are
/// recomputed from the trial list.
ComparisonTable aggregate(const std::vector<RunReport>& reports);

/// Kyte-Doolittle hydropathy of a standard residue.
double hydropathy(char residue);

/// A regression task over single substitutions of one wild type:
/// y = hydro_coef * dH + sine_amp * sin(2 pi p + phase) + slope * p + noise,
/// with dH the hydropathy change scaled to [-1, 1] and p the position fraction.
struct SyntheticTask {
  std::string name;
  std::string wild_type;
  double hydro_coef = 1.0;
  double sine_amp = 1.0;
  double phase = 0.0;
  double slope = 0.0;
  /// Residues used for the wild type and for replacements.
  std::string alphabet = std::string(kAminoAcids);
};

struct SyntheticOptions {
  std::size_t seq_len = 24;
  std::size_t records = 160;
  double noise = 0.05;
  /// Standard deviation of task coefficients around their shared centre.
  double spread = 0.3;
  std::string alphabet = std::string(kAminoAcids);
};

/// Noise-free target of a single-substitution record under `task`.
double synthetic_mean(const SyntheticTask& task, const Mutation& m);

/// {position fraction, scaled hydropathy change} of a single-substitution record.
std::vector<double> synthetic_features(const std::string& wild_type, const Mutation& m);

std::vector<SyntheticTask> synthetic_family(std::size_t k, const SyntheticOptions& opt, std::uint64_t seed,
                                            const std::string& prefix = "syn");

/// Distinct random substitutions of the task's wild type with noisy targets.
/// The task name doubles as the source tag.
std::vector<MutationRecord> synthetic_records(const SyntheticTask& task, std::size_t n, double noise,
                                              std::uint64_t seed);

/// Records pushed through the standard pipeline (split, scalers, normalization).
TaskDataset synthetic_dataset(const SyntheticTask& task, const SyntheticOptions& opt, std::uint64_t seed);

}  // namespace metaforge
