#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qvit/quant.hpp"
#include "qvit/tensor.hpp"

namespace qvit {

// Parts that the sensitivity protocol can switch back to float.
enum class ModelPart {
  QkvLinears,        // input + weight quantizers of the q/k/v projections
  AttentionWeights,  // Q_a(q), Q_a(k), Q_a(v) and the quantized softmax(A)
  MhsaOutWeights,    // the attention output projection
  Mlp,               // both MLP linears
};
inline constexpr std::array<ModelPart, 4> kAllModelParts = {
    ModelPart::QkvLinears, ModelPart::AttentionWeights, ModelPart::MhsaOutWeights,
    ModelPart::Mlp};

std::string to_string(ModelPart part);
// Throws ConfigError for unknown names.
ModelPart model_part_from_string(const std::string& name);

struct QuantParts {
  bool qkv_linears = true;
  bool attention_weights = true;
  bool mhsa_out_weights = true;
  bool mlp = true;

  bool& operator[](ModelPart p);
  bool operator[](ModelPart p) const;
  bool operator==(const QuantParts&) const = default;
};

struct ModelConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 1;
  int depth = 4;
  int heads = 4;
  int embed_dim = 64;
  int mlp_ratio = 4;
  int classes = 4;
  int w_bits = kPassthroughBits;
  int a_bits = kPassthroughBits;
  int first_last_bits = 8;
  bool irm_enabled = false;
  QuantParts quant_parts;
  ScaleMode scale_mode = ScaleMode::Learned;
  float irm_eps = 1e-5f;
  float ln_eps = 1e-6f;

  int head_dim() const { return embed_dim / heads; }
  int patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int tokens() const { return patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * channels; }
  bool quantized() const { return w_bits < kPassthroughBits || a_bits < kPassthroughBits; }
  // Throws ConfigError.
  void validate() const;
  // Same float architecture (what a teacher checkpoint must share).
  bool same_architecture(const ModelConfig& other) const;
  bool operator==(const ModelConfig&) const = default;
};

/// Returns cfg with `part` executed in float (or re-quantized when
/// full_precision is false). Unknown part names raise ConfigError.
ModelConfig set_module_precision(ModelConfig cfg, const std::string& part, bool full_precision);

struct DistributionStats {
  // Indexed by head.
  std::vector<double> mean;
  std::vector<double> variance;
  // Axes of the [B, H, T, d] tensor that were reduced.
  std::vector<int> reduced_axes{0, 2, 3};
};

DistributionStats distribution_stats(const Tensor& x);

/// Information rectification of q or k, x[B, H, T, d]:
///   (x - mu + beta) / (gamma * sqrt(var + eps))
/// with mu and var taken per sample and head over the T x d slice, and
/// gamma, beta of shape [H]. Gradients flow to x, gamma and beta.
Tensor irm_transform(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

struct LayerTelemetry {
  Tensor raw_q, raw_k;        // projections before IRM, [B, H, T, d]
  Tensor q, k;                // after IRM, before quantization (on the tape)
  QuantizedTensor q_codes, k_codes;  // empty when the quantizer is in float
  Tensor attention;           // softmax(A), [B, H, T, T]
  Tensor quantized_attention; // Q_a(softmax(A))
};

struct Telemetry {
  std::vector<LayerTelemetry> layers;
  bool empty() const { return layers.empty(); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct NamedQuantizer {
  std::string name;
  Quantizer* quantizer;
};

// Quantized linear layer: input quantizer, weight quantizer, float bias.
struct QLinear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  Quantizer input_quant;
  Quantizer weight_quant;

  Tensor forward(const Tensor& x, bool training);
};

class QViT {
 public:
  QViT(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  struct Output {
    Tensor logits;
    Telemetry telemetry;
  };
  // images: [B, H, W, C] normalized floats.
  Output forward(const Tensor& images, bool training, bool capture);

  // [B, N + 1, D]: quantized projection of the patches, class token
  // prepended, positional embedding added.
  Tensor patch_embed(const Tensor& images, bool training);
  // One Q-MHSA, x[B, T, D] (already layer-normed).
  std::pair<Tensor, LayerTelemetry> attention(std::size_t layer, const Tensor& x, bool training,
                                              bool capture);

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedQuantizer> quantizers();
  // |gamma| >= 1e-4 for IRM, alpha floor for learned quantizers.
  void clamp_parameters();
  // Copies every float parameter with a matching name and shape; quantizer
  // states are left untouched (fresh). Returns the number of tensors copied.
  std::size_t copy_float_weights_from(const QViT& other);

  // Direct handles used by tests and diagnostics.
  Tensor& cls_token() { return cls_token_; }
  Tensor& pos_embed() { return pos_embed_; }

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Quantizer qkv_input;
    QLinear q, k, v, proj, fc1, fc2;
    Quantizer q_act, k_act, v_act, attn_act;
    Tensor gamma_q, beta_q, gamma_k, beta_k;  // [H]
  };

  ModelConfig cfg_;
  QLinear embed_;
  Tensor cls_token_;  // [1, 1, D]
  Tensor pos_embed_;  // [1, T, D]
  std::vector<Block> blocks_;
  Tensor norm_gain_, norm_bias_;
  QLinear head_;
};

// Patches of [B, H, W, C] images flattened row-major as (py, px, c):
// [B, N, p * p * C].
Tensor extract_patches(const Tensor& images, int patch_size);

struct ModelStats {
  std::uint64_t params = 0;
  double size_mb = 0.0;
  double macs = 0.0;  // per image
  double bops = 0.0;  // per image, MACs weighted by operand bit-widths
};

/// Parameter count, storage size and bit-operations of a configuration.
/// size_mb counts 1e6 bytes per MB; the patch embedding and classifier
/// (weights and biases) are stored at first_last_bits when the body is
/// quantized, every other parameter at w_bits.
ModelStats model_stats(const ModelConfig& cfg);

// Published architectures (224 px, patch 16, RGB, 1000 classes) and the
// desk-scale tiny model. Throws ConfigError for unknown names.
ModelConfig preset_config(const std::string& name);

}  // namespace qvit
