#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metaforge/mutenc.hpp"

namespace metaforge {

struct MutationRecord {
  std::string sequence;
  std::vector<Mutation> mutations;
  double target = 0.0;
  std::string source;
  std::string task;
  std::size_t line = 0;  // 1-based line in the originating file (0 when synthetic)

  /// Identity used for de-duplication and split disjointness.
  std::string key() const;
};

enum class TableFormat { kCsv, kTsv };

/// Picks the format from the file extension (.tsv/.tab are TSV, everything else CSV).
TableFormat format_for(const std::filesystem::path& path);

struct Rejection {
  std::string file;
  std::size_t line = 0;
  std::string task;
  std::string reason;
};

struct ReadResult {
  std::vector<MutationRecord> records;
  std::vector<Rejection> rejects;
  std::size_t rows = 0;
};

/// Reads a header-led table with columns sequence, mutation, target, source and an
/// optional task column (defaulting to the file stem). Rows that fail parsing or QC are
/// rejected with a reason. Throws FormatError when required columns are missing.
ReadResult read_records(const std::filesystem::path& path);
ReadResult read_records(const std::filesystem::path& path, TableFormat format);

/// Keeps the first record for each key; later copies are reported in `dropped`.
std::vector<MutationRecord> dedup(const std::vector<MutationRecord>& records,
                                  std::vector<Rejection>* dropped = nullptr);

/// Per-source standardization fitted with the population standard deviation.
struct Scaler {
  std::string source;
  double mean = 0.0;
  double std = 1.0;

  double transform(double x) const { return (x - mean) / std; }
  double inverse(double z) const { return z * std + mean; }
};

using ScalerMap = std::map<std::string, Scaler>;

ScalerMap fit_scalers(const std::vector<MutationRecord>& train);

/// Replaces every target with its source scaler's transform.
std::vector<MutationRecord> normalize(std::vector<MutationRecord> records, const ScalerMap& scalers);

struct Split {
  std::vector<MutationRecord> train;
  std::vector<MutationRecord> test;
};

/// Equal-frequency target bins, each split by a seeded shuffle. Train takes
/// round(ratio * n) records overall, apportioned across bins by largest remainder.
Split stratified_split(const std::vector<MutationRecord>& records, double ratio, std::size_t bins,
                       std::uint64_t seed);

struct PipelineStats {
  std::size_t input_rows = 0;
  std::size_t rejected = 0;     // parse/QC failures plus duplicates
  std::size_t duplicates = 0;
  std::size_t accepted = 0;
};

struct TaskDataset {
  std::string task;
  std::vector<MutationRecord> train;  // normalized
  std::vector<MutationRecord> test;   // normalized with train-fitted scalers
  ScalerMap scalers;
  std::vector<Rejection> rejects;
  PipelineStats stats;
};

struct PipelineOptions {
  double train_ratio = 0.8;
  std::size_t bins = 10;
};

/// read -> QC -> dedup -> split -> fit scalers on train -> normalize both splits.
TaskDataset build_task_dataset(const std::vector<std::filesystem::path>& files, const std::string& task,
                               std::uint64_t seed, const PipelineOptions& options = {});

/// Same pipeline for records already in memory (rows that failed QC go in `rejects`).
TaskDataset build_task_dataset(std::vector<MutationRecord> records, std::vector<Rejection> rejects,
                               const std::string& task, std::uint64_t seed, const PipelineOptions& options = {});

/// Every task tag present in the files, in first-seen order.
std::vector<std::string> tasks_in(const std::vector<std::filesystem::path>& files);

/// CSV with columns sequence,mutation,target,source,task.
void write_records(const std::filesystem::path& path, const std::vector<MutationRecord>& records);

/// Writes train.csv, test.csv, scalers.json, rejects.log and summary.json into `dir`.
void save_task_dataset(const TaskDataset& ds, const std::filesystem::path& dir);
TaskDataset load_task_dataset(const std::filesystem::path& dir);

/// Loads every task directory under `root` (sub-directories holding a train.csv), sorted by name.
std::vector<TaskDataset> load_task_datasets(const std::filesystem::path& root);

/// Shortest round-trip text form of a double.
std::string format_double(double v);

}  // namespace metaforge
