#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaforge/evalkit.hpp"

namespace metaforge::cli {

/// Merged run settings. Precedence when resolving: command-line flag, then the
/// --config file, then METAFORGE_SEED (seed only), then defaults.
struct RunConfig {
  NetConfig net;
  MamlConfig maml;
  FinetuneConfig finetune;
  EncoderMode encoder = EncoderMode::kEnhanced;
  std::string protocol = "maml";
  std::size_t trials = 3;
  std::uint64_t seed = 0;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs";

  /// Seeds flow into the MAML and fine-tuning sections.
  ExperimentConfig experiment() const;

  nlohmann::ordered_json to_json() const;
  /// Applies the keys present in `j` on top of `base`; unknown keys throw ValidationError.
  static RunConfig merge(RunConfig base, const nlohmann::ordered_json& j);
  static RunConfig load(const std::filesystem::path& path, RunConfig base);
};

/// Parses and runs one command line; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace metaforge::cli
