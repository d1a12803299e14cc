#include "qvit/gradcheck.hpp"

#include "qvit/quant.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace qvit {
namespace {

// Nearest power of two, so x +- h and x +- 2h are exact in float for
// moderate |x|.
double pow2_step(float h) { return std::exp2(std::round(std::log2(static_cast<double>(h)))); }

// Fourth-order central difference from f(x + j h), j = -2..2.
constexpr int kMaxRedraws = 32;

double stencil(double m2, double m1, double p1, double p2, double h) {
  return (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         float h) {
  if (h <= 0.0f) throw ContractError("finite_diff_check: step must be positive");
  Tensor leaf = x.clone(true);
  const GradientMap grads = backward(f(leaf));
  const Tensor* g = grads.find(leaf);
  std::vector<float> analytic = g ? g->to_vector() : std::vector<float>(x.numel(), 0.0f);

  double worst = 0.0;
  const double step = pow2_step(h);
  Tensor probe = x.clone(false);
  auto values = probe.mutable_data();
  NoGradGuard no_grad;
  auto at = [&](std::size_t i, float orig, int j) {
    values[i] = static_cast<float>(orig + j * step);
    return static_cast<double>(f(probe).item());
  };
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float orig = values[i];
    const double numeric = stencil(at(i, orig, -2), at(i, orig, -1), at(i, orig, 1),
                                   at(i, orig, 2), step);
    values[i] = orig;
    const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

std::vector<DirectionalCheck> directional_grad_check(const std::function<Tensor()>& loss,
                                                     std::span<Tensor> params,
                                                     std::span<const std::string> names, float h,
                                                     std::uint64_t seed) {
  const GradientMap grads = backward(loss());
  const double step = pow2_step(h);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<DirectionalCheck> out;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& param = params[p];
    auto values = param.mutable_data();
    std::vector<double> dir(values.size());
    double nrm = 0.0;
    for (auto& d : dir) {
      d = normal(rng);
      nrm += d * d;
    }
    nrm = std::sqrt(nrm);
    for (auto& d : dir) d /= nrm;

    DirectionalCheck check;
    check.name = p < names.size() ? names[p] : "param" + std::to_string(p);
    if (const Tensor* g = grads.find(param)) {
      const auto gv = g->data();
      for (std::size_t i = 0; i < dir.size(); ++i) check.analytic += gv[i] * dir[i];
    }
    const std::vector<float> orig(values.begin(), values.end());
    auto at = [&](int j) {
      for (std::size_t i = 0; i < dir.size(); ++i)
        values[i] = static_cast<float>(orig[i] + j * step * dir[i]);
      return static_cast<double>(loss().item());
    };
    check.numeric = stencil(at(-2), at(-1), at(1), at(2), step);
    std::copy(orig.begin(), orig.end(), values.begin());
    const double scale = std::max({std::abs(check.analytic), std::abs(check.numeric), 1e-12});
    check.rel_error = std::abs(check.analytic - check.numeric) / scale;
    out.push_back(std::move(check));
  }
  return out;
}

std::vector<DirectionalCheck> joint_grad_check(const std::function<Tensor()>& loss,
                                               std::span<Tensor> params, float h,
                                               std::uint64_t seed, int directions) {
  reset_clip_signature();
  const GradientMap grads = backward(loss());
  const std::uint64_t base_signature = clip_signature();
  const double step = pow2_step(h);
  std::vector<std::vector<float>> orig;
  for (auto& p : params) orig.push_back(p.to_vector());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<DirectionalCheck> out;
  NoGradGuard no_grad;

  std::vector<std::vector<double>> dir(params.size());
  auto draw = [&] {
    double nrm = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
      dir[p].resize(orig[p].size());
      for (auto& v : dir[p]) {
        v = normal(rng);
        nrm += v * v;
      }
    }
    nrm = std::sqrt(nrm);
    for (auto& d : dir)
      for (auto& v : d) v /= nrm;
  };
  bool smooth = true;
  auto at = [&](int j) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto values = params[p].mutable_data();
      for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = static_cast<float>(orig[p][i] + j * step * dir[p][i]);
    }
    reset_clip_signature();
    const double v = loss().item();
    smooth = smooth && clip_signature() == base_signature;
    return v;
  };

  for (int d = 0; d < directions; ++d) {
    DirectionalCheck check;
    check.name = "direction" + std::to_string(d);
    // Directions along which some quantizer input changes clip region are
    // redrawn: the surrogate is not differentiable across that boundary.
    for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
      draw();
      smooth = true;
      check.numeric = stencil(at(-2), at(-1), at(1), at(2), step);
      if (smooth) break;
      ++check.redraws;
    }
    check.smooth = smooth;
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto values = params[p].mutable_data();
      std::copy(orig[p].begin(), orig[p].end(), values.begin());
      if (const Tensor* g = grads.find(params[p])) {
        const auto gv = g->data();
        for (std::size_t i = 0; i < gv.size(); ++i) check.analytic += gv[i] * dir[p][i];
      }
    }
    const double scale = std::max({std::abs(check.analytic), std::abs(check.numeric), 1e-12});
    check.rel_error = std::abs(check.analytic - check.numeric) / scale;
    out.push_back(std::move(check));
  }
  return out;
}

double projected_rel_error(std::span<const DirectionalCheck> checks) {
  double diff = 0.0, ref = 0.0;
  for (const auto& c : checks) {
    diff += (c.analytic - c.numeric) * (c.analytic - c.numeric);
    ref += c.numeric * c.numeric;
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

}  // namespace qvit
