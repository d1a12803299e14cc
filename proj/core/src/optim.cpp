#include "qvit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace qvit {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Lamb ? "lamb" : "adam";
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "lamb") return OptimizerKind::Lamb;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected lamb or adam)");
}

Optimizer::Optimizer(std::vector<NamedTensor> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(cfg_.eps > 0.0)) throw ConfigError("optimizer eps must be positive");
  state_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    state_[i].m.assign(params_[i].tensor.numel(), 0.0);
    state_[i].v.assign(params_[i].tensor.numel(), 0.0);
  }
}

void Optimizer::step(const GradientMap& grads, double lr) {
  for (const auto& p : params_) {
    const Tensor* g = grads.find(p.tensor);
    if (!g) continue;
    std::size_t bad = 0;
    double norm = 0.0;
    for (float x : g->data()) {
      if (!std::isfinite(x)) {
        ++bad;
      } else {
        norm += double(x) * x;
      }
    }
    if (bad) {
      std::ostringstream msg;
      msg << "non-finite gradient in '" << p.name << "' at step " << t_ + 1 << ": " << bad
          << " of " << g->numel() << " entries; finite-part norm " << std::sqrt(norm)
          << "; shape " << shape_str(p.tensor.shape());
      throw NumericError(msg.str());
    }
  }

  ++t_;
  ratios_.clear();
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  std::vector<double> update;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor* g = grads.find(params_[i].tensor);
    if (!g) continue;
    Tensor w = params_[i].tensor;
    auto wv = w.mutable_data();
    const auto gv = g->data();
    auto& st = state_[i];
    update.resize(wv.size());
    double w_norm = 0.0, u_norm = 0.0;
    for (std::size_t j = 0; j < wv.size(); ++j) {
      st.m[j] = cfg_.beta1 * st.m[j] + (1.0 - cfg_.beta1) * gv[j];
      st.v[j] = cfg_.beta2 * st.v[j] + (1.0 - cfg_.beta2) * double(gv[j]) * gv[j];
      const double mhat = st.m[j] / bc1, vhat = st.v[j] / bc2;
      update[j] = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * wv[j];
      w_norm += double(wv[j]) * wv[j];
      u_norm += update[j] * update[j];
    }
    double ratio = 1.0;
    if (cfg_.kind == OptimizerKind::Lamb && !cfg_.force_unit_trust) {
      w_norm = std::sqrt(w_norm);
      u_norm = std::sqrt(u_norm);
      if (w_norm > 0.0 && u_norm > 0.0) {
        ratio = std::clamp(w_norm / u_norm, 0.0, cfg_.max_trust_ratio);
      }
      ratios_[params_[i].name] = ratio;
    }
    for (std::size_t j = 0; j < wv.size(); ++j) {
      wv[j] = static_cast<float>(wv[j] - lr * ratio * update[j]);
    }
  }
}

double clip_grad_norm(GradientMap& grads, const std::vector<NamedTensor>& params,
                      double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("grad clip max norm must be positive");
  double total = 0.0;
  for (const auto& p : params)
    if (const Tensor* g = grads.find(p.tensor))
      for (float x : g->data()) total += double(x) * x;
  total = std::sqrt(total);
  if (total > max_norm) {
    const double scale = max_norm / total;
    for (const auto& p : params) {
      if (const Tensor* g = grads.find(p.tensor)) {
        std::vector<float> v = g->to_vector();
        for (auto& x : v) x = static_cast<float>(x * scale);
        grads.insert(p.tensor, Tensor::from(g->shape(), std::move(v)));
      }
    }
  }
  return total;
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double progress = std::clamp(double(step) / double(total_steps), 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace qvit
