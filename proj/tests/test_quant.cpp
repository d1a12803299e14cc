#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "qvit/gradcheck.hpp"
#include "qvit/ops.hpp"
#include "qvit/quant.hpp"

using namespace qvit;

namespace {

QuantizerConfig act_cfg(int bits, ScaleMode mode = ScaleMode::StaticEma) {
  return {bits, QuantKind::ActivationAsymmetric, mode};
}
QuantizerConfig weight_cfg(int bits, ScaleMode mode = ScaleMode::StaticEma) {
  return {bits, QuantKind::WeightSymmetric, mode};
}

QuantizerState state(int bits, float alpha, float z = 0.0f,
                     QuantKind kind = QuantKind::ActivationAsymmetric) {
  return make_quantizer_state({bits, kind}, alpha, z);
}

Tensor random_tensor(Shape shape, std::uint64_t seed, float lo, float hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST(ClipBounds, MatchBitWidth) {
  EXPECT_EQ(clip_bounds(2, QuantKind::ActivationAsymmetric), std::make_pair(2, 1));
  EXPECT_EQ(clip_bounds(3, QuantKind::WeightSymmetric), std::make_pair(4, 3));
  EXPECT_EQ(clip_bounds(8, QuantKind::ActivationAsymmetric), std::make_pair(128, 127));
  EXPECT_EQ(clip_bounds(2, QuantKind::ActivationUnsigned), std::make_pair(0, 3));
  EXPECT_THROW((QuantizerConfig{1}.validate()), ConfigError);
  EXPECT_THROW((QuantizerConfig{5}.validate()), ConfigError);
}

TEST(QuantizeActivation, Examples) {
  const auto s = state(2, 0.5f);
  auto one = [&](float x) { return quantize_activation(Tensor::from({1}, {x}), s); };
  EXPECT_EQ(one(0.0f).codes[0], 0);
  EXPECT_EQ(dequantize(one(0.0f))[0], 0.0f);
  EXPECT_EQ(one(10.0f).codes[0], 1);
  EXPECT_EQ(dequantize(one(10.0f))[0], 0.5f);
  EXPECT_EQ(one(-10.0f).codes[0], -2);
  EXPECT_EQ(dequantize(one(-10.0f))[0], -1.0f);
  EXPECT_EQ(one(0.25f).codes[0], 0);  // 0.5 rounds to even
  EXPECT_EQ(one(0.75f).codes[0], 1);  // 1.5 -> 2, clipped to 1
  EXPECT_EQ(one(-0.75f).codes[0], -2);
  EXPECT_THROW(quantize_activation(Tensor::from({1}, {0}), state(2, 0.0f)), ContractError);
  EXPECT_THROW(quantize_activation(Tensor::from({1}, {0}), state(2, -1.0f)), ContractError);
}

TEST(QuantizeActivation, ZeroPointShiftsGrid) {
  const auto s = state(4, 0.25f, 1.0f);
  const auto q = quantize_activation(Tensor::from({3}, {1.0f, 1.5f, 0.0f}), s);
  EXPECT_EQ(q.codes, (std::vector<std::int32_t>{0, 2, -4}));
  const Tensor back = dequantize(q);
  EXPECT_EQ(back[1], 1.5f);
}

TEST(QuantizeWeight, Examples) {
  const auto s = state(3, 0.5f, 0.0f, QuantKind::WeightSymmetric);
  const auto q = quantize_weight(Tensor::from({3}, {0.0f, 0.74f, 3.0f}), s);
  EXPECT_EQ(q.codes, (std::vector<std::int32_t>{0, 1, 3}));
  const Tensor back = dequantize(q);
  EXPECT_EQ(back[1], 0.5f);
  EXPECT_EQ(back[2], 1.5f);
}

TEST(FakeQuant, IdempotentAndMatchesCodes) {
  const auto cfg = act_cfg(3);
  const auto s = state(3, 0.37f, 0.11f);
  const Tensor x = random_tensor({200}, 1, -3, 3);
  const Tensor once = fake_quant(x, s, cfg);
  EXPECT_EQ(fake_quant(once, s, cfg).to_vector(), once.to_vector());
  EXPECT_EQ(dequantize(quantize_activation(x, s)).to_vector(), once.to_vector());
}

TEST(FakeQuant, SteGradientExamples) {
  const auto cfg = act_cfg(2);
  const auto s = state(2, 0.5f);
  const Tensor in = Tensor::from({1}, {0.3f}, true);
  EXPECT_EQ(backward(sum(fake_quant(in, s, cfg))).at(in)[0], 1.0f);
  const Tensor out = Tensor::from({1}, {10.0f}, true);
  EXPECT_EQ(backward(sum(fake_quant(out, s, cfg))).at(out)[0], 0.0f);
  // Clip edges are inside the mask: v = q_p and v = -q_n.
  const Tensor edge = Tensor::from({2}, {0.5f, -1.0f}, true);
  const auto g = backward(sum(fake_quant(edge, s, cfg))).at(edge);
  EXPECT_EQ(g[0], 1.0f);
  EXPECT_EQ(g[1], 1.0f);
  EXPECT_TRUE(fake_quant(in, s, cfg).has_custom_grad());
}

TEST(FakeQuant, PassthroughIsIdentity) {
  const Tensor x = random_tensor({10}, 2, -5, 5);
  QuantizerConfig off{kPassthroughBits};
  EXPECT_EQ(fake_quant(x, QuantizerState{}, off).to_vector(), x.to_vector());
}

TEST(QLinear, Examples) {
  // z = 0 and all codes 0.
  const auto sx = state(4, 0.5f), sw = state(4, 0.5f, 0, QuantKind::WeightSymmetric);
  const Tensor zeros = Tensor::zeros({2, 3, 4});
  const Tensor w = random_tensor({5, 4}, 3, -1, 1);
  const Tensor yf = qlinear_forward(zeros, w, sx, sw);
  const Tensor yi = qlinear_forward_integer(zeros, w, sx, sw);
  for (float v : yf.data()) EXPECT_EQ(v, 0.0f);
  for (float v : yi.data()) EXPECT_EQ(v, 0.0f);

  // 1 x 1: x_hat = 0.5, w_hat = 1.5.
  const auto s1 = state(4, 0.5f), s2 = state(4, 0.5f, 0, QuantKind::WeightSymmetric);
  const Tensor x1 = Tensor::from({1, 1}, {0.5f}), w1 = Tensor::from({1, 1}, {1.5f});
  EXPECT_FLOAT_EQ(qlinear_forward(x1, w1, s1, s2).item(), 0.75f);
  EXPECT_FLOAT_EQ(qlinear_forward_integer(x1, w1, s1, s2).item(), 0.75f);
}

TEST(QLinear, FloatAndIntegerPathsAgree) {
  const Tensor x = random_tensor({4, 8}, 4, -2, 2);
  const Tensor w = random_tensor({4, 8}, 5, -1, 1);
  auto sx = update_scale_statistics(make_quantizer_state(act_cfg(4)), x, act_cfg(4));
  auto sw = update_scale_statistics(make_quantizer_state(weight_cfg(4)), w, weight_cfg(4));
  const Tensor f = qlinear_forward(x, w, sx, sw);
  const Tensor i = qlinear_forward_integer(x, w, sx, sw);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < f.numel(); ++k) {
    num += (f[k] - i[k]) * double(f[k] - i[k]);
    den += double(f[k]) * f[k];
  }
  EXPECT_LT(std::sqrt(num / den), 1e-4);
  EXPECT_THROW(qlinear_forward_integer(x, Tensor::zeros({4, 7}), sx, sw), DimensionError);
  EXPECT_THROW(qlinear_forward(x, Tensor::zeros({4, 7}), sx, sw), DimensionError);
}

TEST(ScaleStatistics, Examples) {
  QuantizerConfig cfg = act_cfg(2);
  cfg.ema_decay = 0.0f;
  const auto s = update_scale_statistics(make_quantizer_state(cfg),
                                         Tensor::from({3}, {-1.0f, 0.2f, 1.0f}), cfg);
  EXPECT_EQ(s.ema_min, -1.0f);
  EXPECT_EQ(s.ema_max, 1.0f);
  EXPECT_NEAR(s.alpha, 2.0 / 3.0, 1e-7);
  EXPECT_NEAR(s.zero_point, 1.0 / 3.0, 1e-7);

  const auto c = update_scale_statistics(make_quantizer_state(cfg), Tensor::full({4}, 2.5f), cfg);
  EXPECT_EQ(c.alpha, kAlphaFloor);
  const Tensor flat = fake_quant(Tensor::full({4}, 2.5f), c, cfg);
  for (float v : flat.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ScaleStatistics, EmaBlendsBatches) {
  QuantizerConfig cfg = act_cfg(4);
  cfg.ema_decay = 0.9f;
  auto s = update_scale_statistics(make_quantizer_state(cfg), Tensor::from({2}, {-1, 1}), cfg);
  s = update_scale_statistics(s, Tensor::from({2}, {-3, 3}), cfg);
  EXPECT_NEAR(s.ema_min, -1.2, 1e-6);
  EXPECT_NEAR(s.ema_max, 1.2, 1e-6);
  EXPECT_NEAR(s.alpha, 2.4 / 15.0, 1e-6);
  EXPECT_NEAR(s.zero_point, -1.2 + s.alpha * 8, 1e-6);
}

TEST(ScaleStatistics, WeightsStaySymmetric) {
  QuantizerConfig cfg = weight_cfg(4);
  const auto s = update_scale_statistics(make_quantizer_state(cfg),
                                         Tensor::from({3}, {-0.5f, 0.1f, 2.0f}), cfg);
  EXPECT_EQ(s.zero_point, 0.0f);
  EXPECT_GT(s.alpha, 0.0f);
}

TEST(ScaleStatistics, RejectsLearnedMode) {
  EXPECT_THROW(update_scale_statistics(QuantizerState{}, Tensor::zeros({1}),
                                       act_cfg(2, ScaleMode::Learned)),
               ContractError);
}

TEST(LsqGradient, Examples) {
  const auto cfg = act_cfg(2, ScaleMode::Learned);
  const auto s = state(2, 0.5f);
  // On-grid values in range.
  const Tensor grid = Tensor::from({3}, {0.0f, 0.5f, -1.0f});
  EXPECT_EQ(lsq_scale_gradient(s, cfg, grid, Tensor::full({3}, 1.0f)), 0.0f);
  // One value clipped above: q_p * 1 / sqrt(1 * q_p) = 1.
  EXPECT_FLOAT_EQ(lsq_scale_gradient(s, cfg, Tensor::from({1}, {10.0f}), Tensor::from({1}, {1.0f})),
                  1.0f);
  EXPECT_EQ(lsq_scale_gradient(s, cfg, Tensor::from({2}, {10.0f, 0.3f}), Tensor::zeros({2})), 0.0f);
  EXPECT_THROW(lsq_scale_gradient(s, act_cfg(2), grid, grid), ContractError);
}

TEST(LsqGradient, MatchesTapeGradientOfLearnedOp) {
  const auto cfg = act_cfg(3, ScaleMode::Learned);
  const Tensor x = random_tensor({50}, 6, -2, 2);
  const Tensor up = random_tensor({50}, 7, -1, 1);
  const Tensor alpha = Tensor::scalar(0.3f, true);
  const Tensor zero = Tensor::scalar(0.1f, true);
  QuantizerState s = state(3, 0.3f, 0.1f);
  const auto g = backward(sum(mul(fake_quant_learned(x, alpha, zero, s), up)));
  EXPECT_NEAR(g.at(alpha).item(), lsq_scale_gradient(s, cfg, x, up), 1e-6);
}

TEST(LearnedQuantizer, SurrogateGradientsMatchFiniteDifferences) {
  QuantModeGuard surrogate(QuantMode::Surrogate);
  const Tensor x = random_tensor({40}, 8, -1.5f, 1.5f);
  const Tensor up = random_tensor({40}, 9, -1, 1);
  Tensor alpha = Tensor::scalar(0.3f, true);
  Tensor zero = Tensor::scalar(0.05f, true);
  const QuantizerState s = state(2, 0.3f, 0.05f);
  Tensor params[] = {alpha, zero};
  const std::string names[] = {"alpha", "zero"};
  const auto checks = directional_grad_check(
      [&] { return sum(mul(fake_quant_learned(x, alpha, zero, s), up)); }, params, names, 1e-3f, 1);
  for (const auto& c : checks) EXPECT_LT(c.rel_error, 1e-2) << c.name;
}

TEST(QuantizerModule, CalibratesOnFirstBatch) {
  Quantizer q(act_cfg(4, ScaleMode::Learned));
  EXPECT_FALSE(q.state().initialized);
  const Tensor x = random_tensor({1000}, 10, -1, 3);
  const Tensor y = q(x, true);
  const auto s = q.state();
  EXPECT_TRUE(s.initialized);
  EXPECT_GT(s.alpha, 0.0f);
  std::set<float> levels(y.data().begin(), y.data().end());
  EXPECT_LE(levels.size(), 16u);
  EXPECT_EQ(q.parameters().size(), 2u);

  Quantizer w(weight_cfg(4, ScaleMode::Learned));
  w(x, true);
  EXPECT_EQ(w.parameters().size(), 1u);
  EXPECT_EQ(w.state().zero_point, 0.0f);

  Quantizer u({2, QuantKind::ActivationUnsigned, ScaleMode::Learned});
  const Tensor p = u(random_tensor({100}, 11, 0, 1), true);
  for (float v : p.data()) EXPECT_GE(v, 0.0f);
}

TEST(QuantizerModule, StaticModeUpdatesOnlyWhileTraining) {
  Quantizer q(act_cfg(4));
  q(Tensor::from({2}, {-1, 1}), true);
  const auto first = q.state();
  q(Tensor::from({2}, {-5, 5}), false);
  EXPECT_EQ(q.state(), first);
  q(Tensor::from({2}, {-5, 5}), true);
  EXPECT_NE(q.state().ema_max, first.ema_max);
  EXPECT_TRUE(q.parameters().empty());
}

TEST(QuantizerModule, StateRoundTrip) {
  Quantizer q(act_cfg(3, ScaleMode::Learned));
  q(random_tensor({64}, 12, -1, 1), true);
  Quantizer r(act_cfg(3, ScaleMode::Learned));
  r.set_state(q.state());
  EXPECT_EQ(r.state(), q.state());
  const Tensor x = random_tensor({64}, 13, -1, 1);
  EXPECT_EQ(q(x, false).to_vector(), r(x, false).to_vector());
}

TEST(QuantizerModule, ClampKeepsAlphaPositive) {
  Quantizer q(act_cfg(3, ScaleMode::Learned));
  q(random_tensor({64}, 14, -1, 1), true);
  Tensor alpha = q.parameters()[0];
  alpha.mutable_data()[0] = -0.5f;
  q.clamp_parameters();
  EXPECT_EQ(q.state().alpha, kAlphaFloor);
}

TEST(Enums, RoundTrip) {
  for (auto k : {QuantKind::ActivationAsymmetric, QuantKind::WeightSymmetric,
                 QuantKind::ActivationUnsigned})
    EXPECT_EQ(quant_kind_from_string(to_string(k)), k);
  for (auto m : {ScaleMode::StaticEma, ScaleMode::Learned})
    EXPECT_EQ(scale_mode_from_string(to_string(m)), m);
  EXPECT_THROW(scale_mode_from_string("nope"), ConfigError);
}
