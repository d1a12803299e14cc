#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "qvit/data.hpp"
#include "qvit/distill.hpp"
#include "qvit/model.hpp"
#include "qvit/quant.hpp"
#include "qvit/train.hpp"

namespace qvit::json_io {

using Json = nlohmann::ordered_json;

Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const DistillationConfig& c);
Json to_json(const DataSpec& c);
Json to_json(const QuantizerState& s);

// Strict readers: unknown keys and wrong types raise ConfigError. Missing
// keys keep the value already in `out`.
void from_json(const Json& j, ModelConfig& out, const std::string& where = "model");
void from_json(const Json& j, TrainConfig& out, const std::string& where = "train");
void from_json(const Json& j, DistillationConfig& out, const std::string& where = "distill");
void from_json(const Json& j, DataSpec& out, const std::string& where = "data");
QuantizerState quantizer_state_from_json(const Json& j);

void require_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where);

}  // namespace qvit::json_io
