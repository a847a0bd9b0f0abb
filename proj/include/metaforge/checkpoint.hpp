#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "metaforge/net.hpp"
#include "metaforge/params.hpp"

namespace metaforge {

/// On-disk model state.
///
/// Layout (little-endian):
///   "MFCK" | u32 version | u64 json_len | json | u32 n_entries |
///   n_entries x { u32 name_len | name | u8 dtype (1 = f64) | u32 ndim | u64 dims[ndim] | f64 data[] }
/// The JSON block carries {"net": NetConfig, "n_params": k, "meta": {...}}. The first k
/// entries are model parameters; any remaining entries are optimizer state.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  NetConfig config;
  ParamSet params;
  ParamSet optimizer;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws CheckpointError on a corrupt file or on parameters that do not match the config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

}  // namespace metaforge
