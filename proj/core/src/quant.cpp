#include "qvit/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qvit/gemm.hpp"
#include "qvit/ops.hpp"

namespace qvit {
namespace {

thread_local QuantMode g_mode = QuantMode::Exact;
thread_local std::uint64_t g_clip_signature = 0;

// Folds the clip region (-1, 0, +1) of every surrogate evaluation into the
// running signature, in evaluation order.
void record_clip(double v, int q_n, int q_p) {
  const std::uint64_t region = v < -q_n ? 1 : (v > q_p ? 2 : 3);
  g_clip_signature = (g_clip_signature ^ region) * 0x100000001b3ULL;
}

// Pre-clip argument (x - z) / alpha.
inline double grid_arg(float x, double alpha, double z) { return (static_cast<double>(x) - z) / alpha; }

inline std::int32_t code_of(double v, int q_n, int q_p) {
  // Default FE_TONEAREST: nearbyint rounds ties to even.
  return static_cast<std::int32_t>(std::nearbyint(std::clamp(v, -double(q_n), double(q_p))));
}

inline float dequant(double code, double alpha, double z) {
  return static_cast<float>(code * alpha + z);
}

void require_alpha(const QuantizerState& s, const char* op) {
  if (!(s.alpha > 0.0f)) {
    throw ContractError(std::string(op) + ": alpha must be positive, got " +
                        std::to_string(s.alpha));
  }
}

QuantizedTensor quantize_impl(const Tensor& x, const QuantizerState& s, float z, const char* op) {
  require_alpha(s, op);
  QuantizedTensor q;
  q.shape = x.shape();
  q.alpha = s.alpha;
  q.zero_point = z;
  q.q_n = s.q_n;
  q.q_p = s.q_p;
  q.bits = static_cast<int>(std::lround(std::log2(double(s.q_n) + s.q_p + 1)));
  const auto xv = x.data();
  q.codes.resize(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i)
    q.codes[i] = code_of(grid_arg(xv[i], s.alpha, z), s.q_n, s.q_p);
  return q;
}

struct Extremes {
  float lo;
  float hi;
};

Extremes batch_extremes(const Tensor& x, QuantKind kind) {
  const auto xv = x.data();
  if (xv.empty()) throw ContractError("quantizer statistics of an empty tensor");
  auto [mn, mx] = std::minmax_element(xv.begin(), xv.end());
  if (kind == QuantKind::WeightSymmetric) {
    const float m = std::max(std::abs(*mn), std::abs(*mx));
    return {-m, m};
  }
  return {*mn, *mx};
}

void derive_alpha_zero(QuantizerState& s, QuantKind kind) {
  const double range = static_cast<double>(s.ema_max) - s.ema_min;
  s.alpha = std::max(kAlphaFloor, static_cast<float>(range / (s.q_p + s.q_n)));
  s.zero_point = kind == QuantKind::WeightSymmetric
                     ? 0.0f
                     : static_cast<float>(s.ema_min + double(s.alpha) * s.q_n);
}

}  // namespace

std::string to_string(QuantKind kind) {
  switch (kind) {
    case QuantKind::ActivationAsymmetric:
      return "activation-asymmetric";
    case QuantKind::WeightSymmetric:
      return "weight-symmetric";
    case QuantKind::ActivationUnsigned:
      return "activation-unsigned";
  }
  return "unknown";
}

std::string to_string(ScaleMode mode) {
  return mode == ScaleMode::StaticEma ? "static-ema" : "learned";
}

QuantKind quant_kind_from_string(const std::string& s) {
  if (s == "activation-asymmetric") return QuantKind::ActivationAsymmetric;
  if (s == "weight-symmetric") return QuantKind::WeightSymmetric;
  if (s == "activation-unsigned") return QuantKind::ActivationUnsigned;
  throw ConfigError("unknown quantizer kind '" + s + "'");
}

ScaleMode scale_mode_from_string(const std::string& s) {
  if (s == "static-ema") return ScaleMode::StaticEma;
  if (s == "learned") return ScaleMode::Learned;
  throw ConfigError("unknown scale mode '" + s + "'");
}

void QuantizerConfig::validate() const {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8 && bits != kPassthroughBits) {
    throw ConfigError("unsupported bit-width " + std::to_string(bits) +
                      " (expected 2, 3, 4, 8 or 32 for float)");
  }
  if (!(ema_decay >= 0.0f && ema_decay < 1.0f)) {
    throw ConfigError("ema_decay must lie in [0, 1)");
  }
}

std::pair<int, int> clip_bounds(int bits, QuantKind kind) {
  if (bits < 2 || bits > 16) throw ConfigError("clip_bounds: bit-width out of range");
  if (kind == QuantKind::ActivationUnsigned) return {0, (1 << bits) - 1};
  return {1 << (bits - 1), (1 << (bits - 1)) - 1};
}

QuantizerState make_quantizer_state(const QuantizerConfig& cfg, float alpha, float zero_point) {
  cfg.validate();
  QuantizerState s;
  if (!cfg.passthrough()) std::tie(s.q_n, s.q_p) = clip_bounds(cfg.bits, cfg.kind);
  s.alpha = alpha;
  s.zero_point = cfg.kind == QuantKind::WeightSymmetric ? 0.0f : zero_point;
  return s;
}

QuantizedTensor quantize_activation(const Tensor& x, const QuantizerState& s) {
  return quantize_impl(x, s, s.zero_point, "quantize_activation");
}

QuantizedTensor quantize_weight(const Tensor& w, const QuantizerState& s) {
  return quantize_impl(w, s, 0.0f, "quantize_weight");
}

Tensor dequantize(const QuantizedTensor& q) {
  std::vector<float> v(q.codes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = dequant(q.codes[i], q.alpha, q.zero_point);
  return Tensor::from(q.shape, std::move(v));
}

QuantMode quant_mode() { return g_mode; }
std::uint64_t clip_signature() { return g_clip_signature; }
void reset_clip_signature() { g_clip_signature = 0; }
void set_quant_mode(QuantMode mode) { g_mode = mode; }

QuantModeGuard::QuantModeGuard(QuantMode mode) : previous_(g_mode) { g_mode = mode; }
QuantModeGuard::~QuantModeGuard() { g_mode = previous_; }

Tensor fake_quant(const Tensor& x, const QuantizerState& s, const QuantizerConfig& cfg) {
  if (cfg.passthrough()) return x;
  require_alpha(s, "fake_quant");
  const double alpha = s.alpha;
  const double z = cfg.kind == QuantKind::WeightSymmetric ? 0.0 : s.zero_point;
  const bool surrogate = g_mode == QuantMode::Surrogate;
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = grid_arg(xv[i], alpha, z);
    if (surrogate) record_clip(v, s.q_n, s.q_p);
    const double c = surrogate ? std::clamp(v, -double(s.q_n), double(s.q_p))
                               : static_cast<double>(code_of(v, s.q_n, s.q_p));
    out[i] = dequant(c, alpha, z);
  }
  const int q_n = s.q_n, q_p = s.q_p;
  return make_op(
      "fake_quant", x.shape(), std::move(out), {x},
      [x, alpha, z, q_n, q_p](BackwardContext& ctx) {
        const auto g = ctx.grad_output();
        const auto xv = x.data();
        auto gx = ctx.grad_input(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = grid_arg(xv[i], alpha, z);
          if (v >= -q_n && v <= q_p) gx[i] += g[i];
        }
      },
      /*custom_grad=*/true);
}

Tensor fake_quant_learned(const Tensor& x, const Tensor& alpha, const Tensor& zero_point,
                          const QuantizerState& s) {
  if (alpha.numel() != 1) throw DimensionError("fake_quant_learned: alpha must hold one value");
  if (zero_point.defined() && zero_point.numel() != 1) {
    throw DimensionError("fake_quant_learned: zero point must hold one value");
  }
  const double a = alpha.item();
  if (!(a > 0.0)) throw ContractError("fake_quant_learned: alpha must be positive");
  const double z = zero_point.defined() ? zero_point.item() : 0.0;
  const bool surrogate = g_mode == QuantMode::Surrogate;
  const int q_n = s.q_n, q_p = s.q_p;
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = grid_arg(xv[i], a, z);
    if (surrogate) record_clip(v, q_n, q_p);
    const double c = surrogate ? std::clamp(v, -double(q_n), double(q_p))
                               : static_cast<double>(code_of(v, q_n, q_p));
    out[i] = dequant(c, a, z);
  }
  const double scale =
      surrogate ? 1.0 : 1.0 / std::sqrt(static_cast<double>(xv.size()) * std::max(q_p, 1));
  std::vector<Tensor> inputs{x, alpha};
  if (zero_point.defined()) inputs.push_back(zero_point);
  return make_op(
      "fake_quant_learned", x.shape(), std::move(out), std::move(inputs),
      [x, a, z, q_n, q_p, surrogate, scale](BackwardContext& ctx) {
        const auto g = ctx.grad_output();
        const auto xv = x.data();
        double d_alpha = 0.0, d_zero = 0.0;
        std::span<float> gx;
        if (ctx.needs_grad(0)) gx = ctx.grad_input(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = grid_arg(xv[i], a, z);
          if (v < -q_n) {
            d_alpha += g[i] * double(-q_n);
            d_zero += g[i];
          } else if (v > q_p) {
            d_alpha += g[i] * double(q_p);
            d_zero += g[i];
          } else {
            if (!gx.empty()) gx[i] += g[i];
            if (!surrogate) d_alpha += g[i] * (std::nearbyint(v) - v);
          }
        }
        if (ctx.needs_grad(1)) ctx.grad_input(1)[0] += static_cast<float>(d_alpha * scale);
        if (ctx.input_count() > 2 && ctx.needs_grad(2))
          ctx.grad_input(2)[0] += static_cast<float>(d_zero * scale);
      },
      /*custom_grad=*/true);
}

QuantizerState update_scale_statistics(QuantizerState s, const Tensor& x,
                                       const QuantizerConfig& cfg) {
  if (cfg.scale_mode != ScaleMode::StaticEma) {
    throw ContractError("update_scale_statistics called on a learned-scale quantizer");
  }
  if (cfg.passthrough()) return s;
  if (s.q_n == 0 && s.q_p == 0) std::tie(s.q_n, s.q_p) = clip_bounds(cfg.bits, cfg.kind);
  const auto [lo, hi] = batch_extremes(x, cfg.kind);
  if (!s.initialized) {
    s.ema_min = lo;
    s.ema_max = hi;
    s.initialized = true;
  } else {
    const float d = cfg.ema_decay;
    s.ema_min = d * s.ema_min + (1.0f - d) * lo;
    s.ema_max = d * s.ema_max + (1.0f - d) * hi;
  }
  derive_alpha_zero(s, cfg.kind);
  return s;
}

float lsq_scale_gradient(const QuantizerState& s, const QuantizerConfig& cfg, const Tensor& x,
                         const Tensor& upstream) {
  if (cfg.scale_mode != ScaleMode::Learned) {
    throw ContractError("lsq_scale_gradient called on a static-scale quantizer");
  }
  require_alpha(s, "lsq_scale_gradient");
  if (x.shape() != upstream.shape()) throw DimensionError("lsq_scale_gradient: shape mismatch");
  const double z = cfg.kind == QuantKind::WeightSymmetric ? 0.0 : s.zero_point;
  const auto xv = x.data();
  const auto gv = upstream.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = grid_arg(xv[i], s.alpha, z);
    double local;
    if (v < -s.q_n) {
      local = -s.q_n;
    } else if (v > s.q_p) {
      local = s.q_p;
    } else {
      local = std::nearbyint(v) - v;
    }
    acc += gv[i] * local;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(xv.size()) * std::max(s.q_p, 1));
  return static_cast<float>(acc * scale);
}

Tensor qlinear_forward(const Tensor& x, const Tensor& w, const QuantizerState& sx,
                       const QuantizerState& sw) {
  QuantizerConfig xc{4, QuantKind::ActivationAsymmetric, ScaleMode::StaticEma};
  QuantizerConfig wc{4, QuantKind::WeightSymmetric, ScaleMode::StaticEma};
  return linear(fake_quant(x, sx, xc), fake_quant(w, sw, wc), Tensor{});
}

Tensor qlinear_forward_integer(const Tensor& x, const Tensor& w, const QuantizerState& sx,
                               const QuantizerState& sw) {
  if (w.rank() != 2 || x.rank() == 0 || x.dim(-1) != w.dim(1)) {
    throw DimensionError("qlinear_forward_integer: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
  }
  const std::size_t din = w.dim(1), dout = w.dim(0);
  const std::size_t rows = x.numel() / din;
  const QuantizedTensor qx = quantize_activation(x, sx);
  const QuantizedTensor qw = quantize_weight(w, sw);
  // Codes of w^T so the kernel streams contiguous rows.
  std::vector<std::int32_t> wt(din * dout);
  std::vector<std::int64_t> col_sum(dout, 0);
  for (std::size_t o = 0; o < dout; ++o) {
    for (std::size_t i = 0; i < din; ++i) {
      wt[i * dout + o] = qw.codes[o * din + i];
      col_sum[o] += qw.codes[o * din + i];
    }
  }
  std::vector<std::int64_t> acc(rows * dout);
  kernels::gemm_int(rows, dout, din, qx.codes.data(), wt.data(), acc.data());
  const double ax = sx.alpha, aw = sw.alpha;
  const double z_over_a = static_cast<double>(sx.zero_point) / ax;
  std::vector<float> out(rows * dout);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o)
      out[r * dout + o] = static_cast<float>(
          ax * aw * (static_cast<double>(acc[r * dout + o]) + z_over_a * col_sum[o]));
  Shape shape = x.shape();
  shape.back() = dout;
  return Tensor::from(std::move(shape), std::move(out));
}

Quantizer::Quantizer(QuantizerConfig cfg) : cfg_(cfg), state_(make_quantizer_state(cfg)) {
  if (!cfg_.passthrough() && cfg_.scale_mode == ScaleMode::Learned) {
    alpha_ = Tensor::scalar(1.0f, true);
    if (cfg_.kind == QuantKind::ActivationAsymmetric) zero_ = Tensor::scalar(0.0f, true);
  }
}

void Quantizer::calibrate(const Tensor& x) {
  if (cfg_.scale_mode == ScaleMode::StaticEma) {
    state_ = update_scale_statistics(state_, x, cfg_);
    return;
  }
  const auto xv = x.data();
  if (xv.empty()) throw ContractError("quantizer calibration on an empty tensor");
  double alpha = 1.0, zero = 0.0;
  switch (cfg_.kind) {
    case QuantKind::WeightSymmetric: {
      double mean_abs = 0.0;
      for (float v : xv) mean_abs += std::abs(v);
      mean_abs /= static_cast<double>(xv.size());
      alpha = 2.0 * mean_abs / std::sqrt(double(state_.q_p));
      break;
    }
    case QuantKind::ActivationAsymmetric: {
      double mu = 0.0, ss = 0.0;
      for (float v : xv) mu += v;
      mu /= static_cast<double>(xv.size());
      for (float v : xv) ss += (v - mu) * (v - mu);
      const double sigma = std::sqrt(ss / static_cast<double>(xv.size()));
      auto [mn, mx] = std::minmax_element(xv.begin(), xv.end());
      const double lo = std::max<double>(*mn, mu - 3.0 * sigma);
      const double hi = std::min<double>(*mx, mu + 3.0 * sigma);
      alpha = (hi - lo) / (state_.q_n + state_.q_p);
      alpha = std::max(alpha, double(kAlphaFloor));
      zero = lo + alpha * state_.q_n;
      break;
    }
    case QuantKind::ActivationUnsigned: {
      const double mx = *std::max_element(xv.begin(), xv.end());
      alpha = mx > 0.0 ? mx / state_.q_p : 1.0 / state_.q_p;
      break;
    }
  }
  state_.alpha = std::max(kAlphaFloor, static_cast<float>(alpha));
  state_.zero_point = static_cast<float>(zero);
  state_.ema_min = static_cast<float>(*std::min_element(xv.begin(), xv.end()));
  state_.ema_max = static_cast<float>(*std::max_element(xv.begin(), xv.end()));
  state_.initialized = true;
  alpha_.mutable_data()[0] = state_.alpha;
  if (zero_.defined()) zero_.mutable_data()[0] = state_.zero_point;
}

Tensor Quantizer::operator()(const Tensor& x, bool training) {
  if (cfg_.passthrough()) return x;
  if (!state_.initialized) {
    calibrate(x);
  } else if (training && cfg_.scale_mode == ScaleMode::StaticEma) {
    state_ = update_scale_statistics(state_, x, cfg_);
  }
  if (cfg_.scale_mode == ScaleMode::StaticEma) return fake_quant(x, state_, cfg_);
  state_.grad_scale = static_cast<float>(
      1.0 / std::sqrt(static_cast<double>(x.numel()) * std::max(state_.q_p, 1)));
  return fake_quant_learned(x, alpha_, zero_, state_);
}

QuantizerState Quantizer::state() const {
  QuantizerState s = state_;
  if (alpha_.defined()) s.alpha = alpha_.item();
  if (zero_.defined()) s.zero_point = zero_.item();
  return s;
}

void Quantizer::set_state(const QuantizerState& s) {
  state_ = s;
  if (alpha_.defined()) alpha_.mutable_data()[0] = s.alpha;
  if (zero_.defined()) zero_.mutable_data()[0] = s.zero_point;
}

std::vector<Tensor> Quantizer::parameters() const {
  std::vector<Tensor> out;
  if (alpha_.defined()) out.push_back(alpha_);
  if (zero_.defined()) out.push_back(zero_);
  return out;
}

void Quantizer::clamp_parameters() {
  if (alpha_.defined()) {
    auto a = alpha_.mutable_data();
    a[0] = std::max(a[0], kAlphaFloor);
  }
}

}  // namespace qvit
