#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "qvit/model.hpp"
#include "qvit/tensor.hpp"

namespace qvit {

enum class OptimizerKind { Lamb, Adam };
std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Lamb;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.0;
  double max_trust_ratio = 10.0;
  // LAMB only: use a trust ratio of 1 everywhere (plain Adam step).
  bool force_unit_trust = false;
};

struct MomentState {
  std::vector<double> m;
  std::vector<double> v;
};

class Optimizer {
 public:
  Optimizer(std::vector<NamedTensor> params, OptimizerConfig cfg);

  /// One update of every parameter that has a gradient. Parameters without
  /// a gradient are left untouched. A non-finite gradient raises
  /// NumericError naming the parameter before anything is modified.
  void step(const GradientMap& grads, double lr);

  std::int64_t steps() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }
  // Trust ratios applied in the last step, by parameter name (LAMB).
  const std::unordered_map<std::string, double>& last_trust_ratios() const { return ratios_; }

 private:
  std::vector<NamedTensor> params_;
  OptimizerConfig cfg_;
  std::vector<MomentState> state_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, double> ratios_;
};

// Scales all gradients so their joint l2 norm is at most max_norm. Returns
// the norm before clipping.
double clip_grad_norm(GradientMap& grads, const std::vector<NamedTensor>& params, double max_norm);

// Cosine decay from base_lr to 0 over total_steps, no warm-up.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

}  // namespace qvit
