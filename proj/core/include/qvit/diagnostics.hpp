#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qvit/model.hpp"
#include "qvit/quant.hpp"

namespace qvit {

// -sum p log p over occupied code levels, in nats.
double discrete_entropy(std::span<const std::int32_t> codes);
double discrete_entropy(const QuantizedTensor& codes);

inline constexpr double kNegativeInfinity = -std::numeric_limits<double>::infinity();

struct GaussianFit {
  double mu = 0.0;
  double sigma2 = 0.0;
  // 0.5 ln(2 pi e sigma2); kNegativeInfinity when sigma2 is 0.
  double diff_entropy = kNegativeInfinity;
};
GaussianFit gaussian_fit(std::span<const float> values);

struct Histogram {
  std::string tag;
  std::vector<double> edges;  // bins + 1
  std::vector<std::uint64_t> counts;
  double mu = 0.0;
  double sigma2 = 0.0;

  // bin_left,bin_right,count
  std::string to_csv() const;
};

// `bins` uniform bins over mu +- 4 sigma; values outside are clamped into the
// end bins so every sample is counted.
Histogram histogram(std::span<const float> values, int bins = 64, std::string tag = {});

// "0.4409 (1.2124 v.s. 1.6533)": |difference| followed by both variances.
std::string variance_comparison(double sigma2_a, double sigma2_b);

struct EntropyEntry {
  int layer = 0;
  int head = 0;
  std::string tensor;  // "q" or "k"
  int bits = 0;
  double entropy_nats = 0.0;
  double entropy_bits = 0.0;
  double max_nats = 0.0;  // bits * ln 2
  double mu = 0.0;
  double sigma2 = 0.0;
  double gaussian_entropy = 0.0;
  // 0.5 ln(2 pi e gamma^2 (sigma2 + eps)) evaluated on the pre-IRM
  // statistics, reported as written; it does not agree with the transform.
  double post_irm_formula_as_written = 0.0;
};

struct EntropyReport {
  std::vector<EntropyEntry> entries;
  std::string to_json() const;
};

/// Entries per (layer, head, q|k) on one evaluation batch. Codes come from
/// the model's own q/k activation quantizers; in float models they are
/// produced by a 2^bits-level quantizer calibrated per head on the batch
/// (bits = `fallback_bits`).
EntropyReport entropy_report(QViT& model, const Tensor& images, int fallback_bits = 4);

// Histograms of the post-IRM q and k per (layer, head) on one batch.
std::vector<Histogram> activation_histograms(QViT& model, const Tensor& images, int bins = 64);

struct AttentionDistanceMatrix {
  std::size_t layers = 0;
  std::vector<double> values;  // row-major L x L

  double at(std::size_t i, std::size_t j) const { return values[i * layers + j]; }
  std::string to_csv() const;
};

/// Entry (i, j): mean over samples and heads of the l2 distance between the
/// block-i and block-j attention probability maps. Throws ContractError
/// when a layer has no attention telemetry.
AttentionDistanceMatrix attention_distance(const Telemetry& telemetry);

double frobenius_distance(const AttentionDistanceMatrix& a, const AttentionDistanceMatrix& b);

}  // namespace qvit
