#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qvit/tensor.hpp"

namespace qvit {

enum class QuantKind {
  ActivationAsymmetric,  // signed grid [-2^(b-1), 2^(b-1)-1] plus zero point
  WeightSymmetric,       // signed grid, zero point fixed at 0
  ActivationUnsigned,    // [0, 2^b - 1]; used for softmax outputs
};

enum class ScaleMode {
  StaticEma,  // alpha, z derived from running min/max
  Learned,    // alpha (and z for asymmetric activations) trained, LSQ gradient
};

std::string to_string(QuantKind kind);
std::string to_string(ScaleMode mode);
QuantKind quant_kind_from_string(const std::string& s);
ScaleMode scale_mode_from_string(const std::string& s);

inline constexpr int kPassthroughBits = 32;
inline constexpr float kAlphaFloor = 1e-8f;

struct QuantizerConfig {
  // One of {2, 3, 4, 8}; kPassthroughBits turns the quantizer into identity.
  int bits = 4;
  QuantKind kind = QuantKind::ActivationAsymmetric;
  ScaleMode scale_mode = ScaleMode::Learned;
  float ema_decay = 0.9f;

  bool passthrough() const { return bits >= kPassthroughBits; }
  // Throws ConfigError.
  void validate() const;
};

struct QuantizerState {
  float alpha = 1.0f;
  float zero_point = 0.0f;
  int q_n = 0;
  int q_p = 0;
  float ema_min = 0.0f;
  float ema_max = 0.0f;
  float grad_scale = 1.0f;
  bool initialized = false;

  bool operator==(const QuantizerState&) const = default;
};

// (Q_n, Q_p) for a bit-width and kind.
std::pair<int, int> clip_bounds(int bits, QuantKind kind);
QuantizerState make_quantizer_state(const QuantizerConfig& cfg, float alpha = 1.0f,
                                    float zero_point = 0.0f);

struct QuantizedTensor {
  Shape shape;
  std::vector<std::int32_t> codes;
  float alpha = 1.0f;
  float zero_point = 0.0f;
  int bits = 0;
  int q_n = 0;
  int q_p = 0;
};

// codes = round_half_even(clip((x - z) / alpha, -q_n, q_p)).
QuantizedTensor quantize_activation(const Tensor& x, const QuantizerState& s);
// As quantize_activation with z = 0.
QuantizedTensor quantize_weight(const Tensor& w, const QuantizerState& s);
// codes * alpha + z, as a constant tensor.
Tensor dequantize(const QuantizedTensor& q);

/// Exact: round to the grid, STE backward. Surrogate: skip the rounding so
/// the forward is the clipped-linear function whose true derivative the STE
/// uses, and drop the LSQ gradient scale; finite-difference checks run in
/// this mode.
enum class QuantMode { Exact, Surrogate };
QuantMode quant_mode();
void set_quant_mode(QuantMode mode);

// Hash of which side of the clip range every surrogate-mode fake-quant input
// fell on since the last reset. Two evaluations with equal signatures lie on
// the same smooth piece of the surrogate.
std::uint64_t clip_signature();
void reset_clip_signature();

class QuantModeGuard {
 public:
  explicit QuantModeGuard(QuantMode mode);
  ~QuantModeGuard();
  QuantModeGuard(const QuantModeGuard&) = delete;
  QuantModeGuard& operator=(const QuantModeGuard&) = delete;

 private:
  QuantMode previous_;
};

/// Quantize-dequantize with fixed alpha and z. Backward passes the upstream
/// gradient where the pre-clip argument (x - z) / alpha lies in [-q_n, q_p]
/// and zero elsewhere.
Tensor fake_quant(const Tensor& x, const QuantizerState& s, const QuantizerConfig& cfg);

/// Same forward with alpha (shape [1]) and optional zero point (shape [1],
/// may be undefined for z = 0) taken from tensors, so both receive the LSQ
/// gradient scaled by 1/sqrt(numel(x) * q_p).
Tensor fake_quant_learned(const Tensor& x, const Tensor& alpha, const Tensor& zero_point,
                          const QuantizerState& s);

/// EMA of batch min/max, then alpha = (max - min) / (q_p + q_n) and
/// z = min + alpha * q_n (z = 0 for weights, whose range is symmetrized).
/// Static mode only.
QuantizerState update_scale_statistics(QuantizerState s, const Tensor& x,
                                       const QuantizerConfig& cfg);

/// LSQ step-size gradient for alpha given the upstream gradient wrt the
/// fake-quantized output. Learned mode only.
float lsq_scale_gradient(const QuantizerState& s, const QuantizerConfig& cfg, const Tensor& x,
                         const Tensor& upstream);

// Q-Linear without bias, x[..., din] against w[dout, din].
// Float path: matmul of the fake-quantized operands.
Tensor qlinear_forward(const Tensor& x, const Tensor& w, const QuantizerState& sx,
                       const QuantizerState& sw);
// Integer path: int64 product of the codes, rescaled by
// alpha_x * alpha_w * (codes_x + z / alpha_x).
Tensor qlinear_forward_integer(const Tensor& x, const Tensor& w, const QuantizerState& sx,
                               const QuantizerState& sw);

/// A quantizer instance inside a model: configuration, state, and (learned
/// mode) the trainable alpha / zero-point tensors.
class Quantizer {
 public:
  Quantizer() : Quantizer(QuantizerConfig{kPassthroughBits}) {}
  explicit Quantizer(QuantizerConfig cfg);

  const QuantizerConfig& config() const { return cfg_; }
  bool passthrough() const { return cfg_.passthrough(); }

  // Uncalibrated quantizers initialize from the first batch they see. Static
  // quantizers fold every training batch into their EMA statistics.
  Tensor operator()(const Tensor& x, bool training);

  QuantizerState state() const;
  void set_state(const QuantizerState& s);
  // Learned mode: alpha, plus the zero point for asymmetric activations.
  std::vector<Tensor> parameters() const;
  // Re-applied after optimizer steps: alpha >= kAlphaFloor.
  void clamp_parameters();

 private:
  void calibrate(const Tensor& x);

  QuantizerConfig cfg_;
  QuantizerState state_;
  Tensor alpha_;
  Tensor zero_;
};

}  // namespace qvit
