#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "rescaps/layers.hpp"

namespace rescaps {

/// Flat key=value rendering of a configuration (keys mirror CLI flag names).
std::map<std::string, std::string> config_to_map(const ModelConfig& config);
/// Inverse of config_to_map; unknown keys raise UsageError.
ModelConfig config_from_map(const std::map<std::string, std::string>& values);

/// Writes `dir/manifest.txt` (config, layer plan, parameter shapes) and one
/// canonical f32 container `dir/<parameter>.caps` per parameter.
void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model);

/// Rebuilds the model from the manifest and loads every parameter, checking names
/// and shapes. Throws ParseError/IoError on malformed or missing files.
Model<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace rescaps
