#pragma once

#include <cmath>
#include <random>
#include <string>

#include "qvit/distill.hpp"
#include "qvit/model.hpp"

namespace qvit::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f,
                            bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline Tensor gaussian_tensor(Shape shape, std::uint64_t seed, double mu = 0.0,
                              double sigma = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(mu, sigma);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return Tensor::from(std::move(shape), std::move(v));
}

// Small multi-channel model, cheap enough for exhaustive checks.
inline ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 2;
  c.depth = 2;
  c.heads = 2;
  c.embed_dim = 16;
  c.mlp_ratio = 2;
  c.classes = 3;
  return c;
}

inline ModelConfig quantized(ModelConfig c, int w, int a, bool irm = false) {
  c.w_bits = w;
  c.a_bits = a;
  c.irm_enabled = irm;
  return c;
}

// Replaces every float parameter (not quantizer scales) with noise so that
// biases, norms and embeddings all take part in oracle comparisons.
inline void randomize_model(QViT& model, std::uint64_t seed, float scale = 0.3f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, scale);
  for (auto& p : model.parameters()) {
    if (p.name.find("_quant.") != std::string::npos || p.name.find("_act.") != std::string::npos ||
        p.name.find("qkv_input.") != std::string::npos)
      continue;
    const bool gain = p.name.find("gain") != std::string::npos ||
                      p.name.find("gamma") != std::string::npos;
    for (auto& v : p.tensor.mutable_data()) v = (gain ? 1.0f : 0.0f) + n(rng);
  }
}

inline bool is_scale_param(const std::string& name) {
  return name.find(".alpha") != std::string::npos || name.find(".zero_point") != std::string::npos;
}

// Calibrates every quantizer on `images`, then shrinks the learned step
// sizes so that some inputs clip and no clip boundary sits exactly on a
// calibration extreme (where the surrogate has a kink).
inline void calibrate_off_kinks(QViT& model, const Tensor& images, float shrink = 0.8f) {
  model.forward(images, true, false);
  for (auto& p : model.parameters())
    if (p.name.find(".alpha") != std::string::npos) p.tensor.mutable_data()[0] *= shrink;
}

// Student telemetry and teacher outputs for one layer from explicit q/k.
struct DgdPair {
  Telemetry student;
  TeacherOutputs teacher;
};

inline DgdPair dgd_pair(const Tensor& sq, const Tensor& sk, const Tensor& tq, const Tensor& tk) {
  DgdPair p;
  LayerTelemetry l;
  l.q = sq;
  l.k = sk;
  p.student.layers.push_back(l);
  p.teacher.q.push_back(tq);
  p.teacher.k.push_back(tk);
  return p;
}

// Random orthogonal d x d matrix from Gram-Schmidt.
inline Tensor random_rotation(std::size_t d, std::uint64_t seed) {
  const Tensor g = gaussian_tensor({d, d}, seed);
  std::vector<std::vector<double>> q(d, std::vector<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < d; ++c) q[i][c] = g[i * d + c];
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q[i][c] * q[j][c];
      for (std::size_t c = 0; c < d; ++c) q[i][c] -= dot * q[j][c];
    }
    double n = 0.0;
    for (double v : q[i]) n += v * v;
    for (auto& v : q[i]) v /= std::sqrt(n);
  }
  std::vector<float> out;
  for (auto& row : q)
    for (double v : row) out.push_back(static_cast<float>(v));
  return Tensor::from({d, d}, out);
}

}  // namespace qvit::testing
