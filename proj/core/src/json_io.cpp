#include "json_io.hpp"

namespace qvit::json_io {
namespace {

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (got " + it->dump() + ")");
  }
}

}  // namespace

void require_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

Json to_json(const ModelConfig& c) {
  Json j;
  j["image_size"] = c.image_size;
  j["patch_size"] = c.patch_size;
  j["channels"] = c.channels;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["embed_dim"] = c.embed_dim;
  j["mlp_ratio"] = c.mlp_ratio;
  j["classes"] = c.classes;
  j["w_bits"] = c.w_bits;
  j["a_bits"] = c.a_bits;
  j["first_last_bits"] = c.first_last_bits;
  j["irm_enabled"] = c.irm_enabled;
  Json parts;
  for (auto p : kAllModelParts) parts[to_string(p)] = c.quant_parts[p];
  j["quant_enabled_parts"] = parts;
  j["scale_mode"] = to_string(c.scale_mode);
  j["irm_eps"] = c.irm_eps;
  j["ln_eps"] = c.ln_eps;
  return j;
}

void from_json(const Json& j, ModelConfig& c, const std::string& where) {
  require_keys(j,
               {"image_size", "patch_size", "channels", "depth", "heads", "embed_dim", "mlp_ratio",
                "classes", "w_bits", "a_bits", "first_last_bits", "irm_enabled",
                "quant_enabled_parts", "scale_mode", "irm_eps", "ln_eps"},
               where);
  read(j, "image_size", c.image_size, where);
  read(j, "patch_size", c.patch_size, where);
  read(j, "channels", c.channels, where);
  read(j, "depth", c.depth, where);
  read(j, "heads", c.heads, where);
  read(j, "embed_dim", c.embed_dim, where);
  read(j, "mlp_ratio", c.mlp_ratio, where);
  read(j, "classes", c.classes, where);
  read(j, "w_bits", c.w_bits, where);
  read(j, "a_bits", c.a_bits, where);
  read(j, "first_last_bits", c.first_last_bits, where);
  read(j, "irm_enabled", c.irm_enabled, where);
  read(j, "irm_eps", c.irm_eps, where);
  read(j, "ln_eps", c.ln_eps, where);
  if (auto it = j.find("quant_enabled_parts"); it != j.end()) {
    if (!it->is_object()) throw ConfigError(where + ".quant_enabled_parts: expected an object");
    for (auto p = it->begin(); p != it->end(); ++p) {
      const ModelPart part = model_part_from_string(p.key());
      if (!p->is_boolean()) {
        throw ConfigError(where + ".quant_enabled_parts." + p.key() + ": expected a boolean");
      }
      c.quant_parts[part] = p->get<bool>();
    }
  }
  if (auto it = j.find("scale_mode"); it != j.end()) {
    if (!it->is_string()) throw ConfigError(where + ".scale_mode: expected a string");
    c.scale_mode = scale_mode_from_string(it->get<std::string>());
  }
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["teacher_epochs"] = c.teacher_epochs;
  j["batch_size"] = c.batch_size;
  j["base_lr"] = c.base_lr;
  j["weight_decay"] = c.weight_decay;
  j["optimizer"] = to_string(c.optimizer);
  j["seed"] = c.seed;
  j["grad_clip"] = c.grad_clip;
  j["augment"] = c.augment;
  j["eval_batch_size"] = c.eval_batch_size;
  return j;
}

void from_json(const Json& j, TrainConfig& c, const std::string& where) {
  require_keys(j,
               {"epochs", "teacher_epochs", "batch_size", "base_lr", "weight_decay", "optimizer", "seed",
                "grad_clip", "augment", "eval_batch_size"},
               where);
  read(j, "epochs", c.epochs, where);
  read(j, "teacher_epochs", c.teacher_epochs, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "base_lr", c.base_lr, where);
  read(j, "weight_decay", c.weight_decay, where);
  read(j, "seed", c.seed, where);
  read(j, "grad_clip", c.grad_clip, where);
  read(j, "augment", c.augment, where);
  read(j, "eval_batch_size", c.eval_batch_size, where);
  if (auto it = j.find("optimizer"); it != j.end()) {
    if (!it->is_string()) throw ConfigError(where + ".optimizer: expected a string");
    c.optimizer = optimizer_from_string(it->get<std::string>());
  }
}

Json to_json(const DistillationConfig& c) {
  Json j;
  j["lambda_dgd"] = c.lambda_dgd;
  j["use_normalized"] = c.use_normalized;
  j["teacher_checkpoint"] = c.teacher_checkpoint;
  return j;
}

void from_json(const Json& j, DistillationConfig& c, const std::string& where) {
  require_keys(j, {"lambda_dgd", "use_normalized", "teacher_checkpoint"}, where);
  read(j, "lambda_dgd", c.lambda_dgd, where);
  read(j, "use_normalized", c.use_normalized, where);
  read(j, "teacher_checkpoint", c.teacher_checkpoint, where);
}

Json to_json(const DataSpec& c) {
  Json j;
  j["source"] = c.source;
  Json s;
  s["classes"] = c.synthetic.classes;
  s["per_class"] = c.synthetic.per_class;
  s["image_size"] = c.synthetic.image_size;
  s["seed"] = c.synthetic.seed;
  s["amplitude"] = c.synthetic.amplitude;
  j["synthetic"] = s;
  j["test_per_class"] = c.test_per_class;
  j["train_images"] = c.train_images;
  j["train_labels"] = c.train_labels;
  j["test_images"] = c.test_images;
  j["test_labels"] = c.test_labels;
  return j;
}

void from_json(const Json& j, DataSpec& c, const std::string& where) {
  require_keys(j,
               {"source", "synthetic", "test_per_class", "train_images", "train_labels",
                "test_images", "test_labels"},
               where);
  read(j, "source", c.source, where);
  read(j, "test_per_class", c.test_per_class, where);
  read(j, "train_images", c.train_images, where);
  read(j, "train_labels", c.train_labels, where);
  read(j, "test_images", c.test_images, where);
  read(j, "test_labels", c.test_labels, where);
  if (auto it = j.find("synthetic"); it != j.end()) {
    const std::string w = where + ".synthetic";
    require_keys(*it, {"classes", "per_class", "image_size", "seed", "amplitude"}, w);
    read(*it, "classes", c.synthetic.classes, w);
    read(*it, "per_class", c.synthetic.per_class, w);
    read(*it, "image_size", c.synthetic.image_size, w);
    read(*it, "seed", c.synthetic.seed, w);
    read(*it, "amplitude", c.synthetic.amplitude, w);
  }
}

Json to_json(const QuantizerState& s) {
  Json j;
  j["alpha"] = s.alpha;
  j["zero_point"] = s.zero_point;
  j["q_n"] = s.q_n;
  j["q_p"] = s.q_p;
  j["ema_min"] = s.ema_min;
  j["ema_max"] = s.ema_max;
  j["grad_scale"] = s.grad_scale;
  j["initialized"] = s.initialized;
  return j;
}

QuantizerState quantizer_state_from_json(const Json& j) {
  QuantizerState s;
  const std::string w = "quantizer state";
  require_keys(j, {"alpha", "zero_point", "q_n", "q_p", "ema_min", "ema_max", "grad_scale",
                   "initialized"},
               w);
  read(j, "alpha", s.alpha, w);
  read(j, "zero_point", s.zero_point, w);
  read(j, "q_n", s.q_n, w);
  read(j, "q_p", s.q_p, w);
  read(j, "ema_min", s.ema_min, w);
  read(j, "ema_max", s.ema_max, w);
  read(j, "grad_scale", s.grad_scale, w);
  read(j, "initialized", s.initialized, w);
  return s;
}

}  // namespace qvit::json_io
