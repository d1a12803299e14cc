#include "qvit/run_config.hpp"

#include <fstream>
#include <sstream>

#include "json_io.hpp"

namespace qvit {

void RunConfig::validate() const {
  model.validate();
  train.validate();
  distill.validate();
  data.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig parse_run_config(const std::string& json_text) {
  json_io::Json j;
  try {
    j = json_io::Json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json_io::require_keys(j, {"model", "train", "distill", "data", "output_dir"}, "config");
  RunConfig cfg;
  if (j.contains("model")) json_io::from_json(j["model"], cfg.model);
  if (j.contains("train")) json_io::from_json(j["train"], cfg.train);
  if (j.contains("distill")) json_io::from_json(j["distill"], cfg.distill);
  if (j.contains("data")) json_io::from_json(j["data"], cfg.data);
  if (j.contains("output_dir")) {
    if (!j["output_dir"].is_string()) throw ConfigError("output_dir: expected a string");
    cfg.output_dir = j["output_dir"].get<std::string>();
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str());
}

std::string to_json(const RunConfig& cfg) {
  json_io::Json j;
  j["model"] = json_io::to_json(cfg.model);
  j["train"] = json_io::to_json(cfg.train);
  j["distill"] = json_io::to_json(cfg.distill);
  j["data"] = json_io::to_json(cfg.data);
  j["output_dir"] = cfg.output_dir;
  return j.dump(2);
}

std::string to_json(const ModelConfig& cfg) { return json_io::to_json(cfg).dump(2); }

ModelConfig parse_model_config(const std::string& json_text) {
  json_io::Json j;
  try {
    j = json_io::Json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig cfg;
  json_io::from_json(j, cfg);
  cfg.validate();
  return cfg;
}

std::pair<int, int> parse_bits(const std::string& text) {
  const auto dash = text.find('-');
  if (dash == std::string::npos) throw ConfigError("bits must look like W-A, got '" + text + "'");
  auto parse = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ConfigError("bits must look like W-A, got '" + text + "'");
    QuantizerConfig{v}.validate();
    return v;
  };
  return {parse(text.substr(0, dash)), parse(text.substr(dash + 1))};
}

}  // namespace qvit
