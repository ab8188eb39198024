#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "avedit/model.hpp"
#include "avedit/sampler.hpp"
#include "avedit/training.hpp"

namespace avedit {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// JSON (de)serialization. Parsing rejects unknown keys; absent keys keep
// their defaults. Parsed configs are validated.
std::string to_json(const ModelConfig& config);
std::string to_json(const TrainConfig& config);
std::string to_json(const GuidanceConfig& config);
std::string to_json(const WorldParams& params);
ModelConfig model_config_from_json(const std::string& text);
TrainConfig train_config_from_json(const std::string& text);
GuidanceConfig guidance_config_from_json(const std::string& text);
WorldParams world_params_from_json(const std::string& text);

/// Applies "dotted.key=value" overrides to a JSON document (values parsed as
/// JSON, falling back to a string). Unknown paths throw ConfigError.
std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& overrides);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary checkpoint: magic, JSON header length, JSON header (model config,
/// seed, step count, parameter names, shapes and byte offsets), then
/// little-endian float64 parameter values in visit order.
void save_checkpoint(Model& model, const std::filesystem::path& file, std::size_t step = 0);
Model load_checkpoint(const std::filesystem::path& file, std::size_t* step = nullptr);

std::string read_text(const std::filesystem::path& file);
void write_text(const std::filesystem::path& file, const std::string& text);

}  // namespace avedit
