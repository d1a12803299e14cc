#include "qvit/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "qvit/tensor.hpp"

namespace qvit {
namespace {

// Values of one head of a [B, H, T, d] tensor.
std::vector<float> head_values(std::span<const float> v, const Shape& shape, std::size_t head) {
  const std::size_t b = shape[0], h = shape[1], slice = shape[2] * shape[3];
  std::vector<float> out;
  out.reserve(b * slice);
  for (std::size_t bb = 0; bb < b; ++bb) {
    const auto first = v.begin() + static_cast<std::ptrdiff_t>((bb * h + head) * slice);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(slice));
  }
  return out;
}

std::vector<std::int32_t> head_codes(const QuantizedTensor& q, std::size_t head) {
  const std::size_t b = q.shape[0], h = q.shape[1], slice = q.shape[2] * q.shape[3];
  std::vector<std::int32_t> out;
  out.reserve(b * slice);
  for (std::size_t bb = 0; bb < b; ++bb) {
    const auto first = q.codes.begin() + static_cast<std::ptrdiff_t>((bb * h + head) * slice);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(slice));
  }
  return out;
}

float find_param(const std::vector<NamedTensor>& params, const std::string& name, std::size_t i,
                 float fallback) {
  for (const auto& p : params)
    if (p.name == name) return p.tensor.data()[i];
  return fallback;
}

}  // namespace

double discrete_entropy(std::span<const std::int32_t> codes) {
  if (codes.empty()) throw ContractError("discrete_entropy of an empty code set");
  std::map<std::int32_t, std::size_t> counts;
  for (auto c : codes) ++counts[c];
  const double n = static_cast<double>(codes.size());
  double h = 0.0;
  for (const auto& [code, count] : counts) {
    const double p = count / n;
    h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

double discrete_entropy(const QuantizedTensor& codes) { return discrete_entropy(codes.codes); }

GaussianFit gaussian_fit(std::span<const float> values) {
  if (values.size() < 2) throw ContractError("gaussian_fit needs at least 2 values");
  double mu = 0.0;
  for (float v : values) mu += v;
  mu /= static_cast<double>(values.size());
  double ss = 0.0;
  for (float v : values) ss += (v - mu) * (v - mu);
  GaussianFit fit;
  fit.mu = mu;
  fit.sigma2 = ss / static_cast<double>(values.size());
  fit.diff_entropy = fit.sigma2 > 0.0
                         ? 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * fit.sigma2)
                         : kNegativeInfinity;
  return fit;
}

std::string Histogram::to_csv() const {
  std::ostringstream out;
  out << "bin_left,bin_right,count\n";
  char buf[96];
  for (std::size_t i = 0; i < counts.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%llu\n", edges[i], edges[i + 1],
                  static_cast<unsigned long long>(counts[i]));
    out << buf;
  }
  return out.str();
}

Histogram histogram(std::span<const float> values, int bins, std::string tag) {
  if (bins < 1) throw ContractError("histogram needs at least one bin");
  const GaussianFit fit = gaussian_fit(values);
  Histogram hist;
  hist.tag = std::move(tag);
  hist.mu = fit.mu;
  hist.sigma2 = fit.sigma2;
  double sigma = std::sqrt(fit.sigma2);
  if (sigma == 0.0) sigma = 1.0;
  const double lo = fit.mu - 4.0 * sigma, hi = fit.mu + 4.0 * sigma;
  const double width = (hi - lo) / bins;
  hist.edges.resize(static_cast<std::size_t>(bins) + 1);
  for (int i = 0; i <= bins; ++i) hist.edges[i] = lo + width * i;
  hist.counts.assign(static_cast<std::size_t>(bins), 0);
  for (float v : values) {
    long idx = static_cast<long>(std::floor((v - lo) / width));
    idx = std::clamp(idx, 0L, static_cast<long>(bins) - 1);
    ++hist.counts[static_cast<std::size_t>(idx)];
  }
  return hist;
}

std::string variance_comparison(double sigma2_a, double sigma2_b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.4f (%.4f v.s. %.4f)", std::abs(sigma2_a - sigma2_b), sigma2_a,
                sigma2_b);
  return buf;
}

std::string EntropyReport::to_json() const {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["layer"] = e.layer;
    j["head"] = e.head;
    j["tensor"] = e.tensor;
    j["bits"] = e.bits;
    j["entropy_nats"] = e.entropy_nats;
    j["entropy_bits"] = e.entropy_bits;
    j["max_nats"] = e.max_nats;
    j["mu"] = e.mu;
    j["sigma2"] = e.sigma2;
    j["gaussian_entropy"] = std::isfinite(e.gaussian_entropy)
                                ? nlohmann::ordered_json(e.gaussian_entropy)
                                : nlohmann::ordered_json("-inf");
    j["post_irm_formula_as_written"] = e.post_irm_formula_as_written;
    arr.push_back(std::move(j));
  }
  nlohmann::ordered_json root;
  root["entries"] = std::move(arr);
  return root.dump(2);
}

EntropyReport entropy_report(QViT& model, const Tensor& images, int fallback_bits) {
  NoGradGuard no_grad;
  const auto out = model.forward(images, false, true);
  const auto params = model.parameters();
  const auto& cfg = model.config();
  const QuantizerConfig fallback{fallback_bits, QuantKind::ActivationAsymmetric,
                                 ScaleMode::StaticEma};
  EntropyReport report;
  for (std::size_t l = 0; l < out.telemetry.layers.size(); ++l) {
    const auto& tel = out.telemetry.layers[l];
    const std::string prefix = "blocks." + std::to_string(l) + ".irm.gamma_";
    for (const char* which : {"q", "k"}) {
      const bool is_q = which[0] == 'q';
      const Tensor& act = is_q ? tel.q : tel.k;
      const Tensor& raw = is_q ? tel.raw_q : tel.raw_k;
      const QuantizedTensor& codes = is_q ? tel.q_codes : tel.k_codes;
      const auto values = act.data();
      const auto raw_values = raw.data();
      for (std::size_t h = 0; h < act.dim(1); ++h) {
        EntropyEntry e;
        e.layer = static_cast<int>(l);
        e.head = static_cast<int>(h);
        e.tensor = which;
        const auto hv = head_values(values, act.shape(), h);
        std::vector<std::int32_t> hc;
        if (!codes.codes.empty()) {
          e.bits = codes.bits;
          hc = head_codes(codes, h);
        } else {
          e.bits = fallback_bits;
          const Tensor t = Tensor::from({hv.size()}, hv);
          const auto st = update_scale_statistics(make_quantizer_state(fallback), t, fallback);
          hc = quantize_activation(t, st).codes;
        }
        e.entropy_nats = discrete_entropy(hc);
        e.entropy_bits = e.entropy_nats / std::numbers::ln2;
        e.max_nats = e.bits * std::numbers::ln2;
        const GaussianFit fit = gaussian_fit(hv);
        e.mu = fit.mu;
        e.sigma2 = fit.sigma2;
        e.gaussian_entropy = fit.diff_entropy;
        const GaussianFit raw_fit = gaussian_fit(head_values(raw_values, raw.shape(), h));
        const double gamma = find_param(params, prefix + which, h, 1.0f);
        e.post_irm_formula_as_written =
            0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * gamma * gamma *
                           (raw_fit.sigma2 + cfg.irm_eps));
        report.entries.push_back(e);
      }
    }
  }
  return report;
}

std::vector<Histogram> activation_histograms(QViT& model, const Tensor& images, int bins) {
  NoGradGuard no_grad;
  const auto out = model.forward(images, false, true);
  std::vector<Histogram> result;
  for (std::size_t l = 0; l < out.telemetry.layers.size(); ++l) {
    const auto& tel = out.telemetry.layers[l];
    for (const char* which : {"q", "k"}) {
      const Tensor& act = which[0] == 'q' ? tel.q : tel.k;
      for (std::size_t h = 0; h < act.dim(1); ++h) {
        const std::string tag =
            "layer" + std::to_string(l) + "_head" + std::to_string(h) + "_" + which;
        result.push_back(histogram(head_values(act.data(), act.shape(), h), bins, tag));
      }
    }
  }
  return result;
}

std::string AttentionDistanceMatrix::to_csv() const {
  std::ostringstream out;
  char buf[32];
  for (std::size_t i = 0; i < layers; ++i) {
    for (std::size_t j = 0; j < layers; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", at(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
  return out.str();
}

AttentionDistanceMatrix attention_distance(const Telemetry& telemetry) {
  AttentionDistanceMatrix m;
  m.layers = telemetry.layers.size();
  if (m.layers == 0) throw ContractError("attention_distance: no telemetry captured");
  for (std::size_t l = 0; l < m.layers; ++l) {
    const Tensor& a = telemetry.layers[l].attention;
    if (!a.defined() || a.rank() != 4 ||
        a.shape() != telemetry.layers[0].attention.shape()) {
      throw ContractError("attention_distance: layer " + std::to_string(l) +
                          " has no attention telemetry");
    }
  }
  const Shape& s = telemetry.layers[0].attention.shape();
  const std::size_t maps = s[0] * s[1], size = s[2] * s[3];
  m.values.assign(m.layers * m.layers, 0.0);
  for (std::size_t i = 0; i < m.layers; ++i) {
    const auto pi = telemetry.layers[i].attention.data();
    for (std::size_t j = i + 1; j < m.layers; ++j) {
      const auto pj = telemetry.layers[j].attention.data();
      double total = 0.0;
      for (std::size_t k = 0; k < maps; ++k) {
        double ss = 0.0;
        for (std::size_t e = 0; e < size; ++e) {
          const double d = double(pi[k * size + e]) - pj[k * size + e];
          ss += d * d;
        }
        total += std::sqrt(ss);
      }
      m.values[i * m.layers + j] = m.values[j * m.layers + i] = total / double(maps);
    }
  }
  return m;
}

double frobenius_distance(const AttentionDistanceMatrix& a, const AttentionDistanceMatrix& b) {
  if (a.layers != b.layers) throw DimensionError("attention distance matrices differ in size");
  double ss = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    ss += d * d;
  }
  return std::sqrt(ss);
}

}  // namespace qvit
