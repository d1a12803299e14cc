#pragma once

#include <string>

#include "qvit/data.hpp"
#include "qvit/distill.hpp"
#include "qvit/model.hpp"
#include "qvit/train.hpp"

namespace qvit {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DistillationConfig distill;
  DataSpec data;
  std::string output_dir = "out";

  // Throws ConfigError.
  void validate() const;
};

/// Strict JSON reader: unknown keys anywhere raise ConfigError; missing keys
/// keep their defaults.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string to_json(const RunConfig& cfg);

std::string to_json(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& json_text);

// "W-A" -> {W, A}; both must be in {2, 3, 4, 8, 32}. Throws ConfigError.
std::pair<int, int> parse_bits(const std::string& text);

}  // namespace qvit
