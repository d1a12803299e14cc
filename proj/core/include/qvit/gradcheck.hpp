#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qvit/tensor.hpp"

namespace qvit {

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)
/// for a scalar function of one tensor. Non-smooth nodes must already be in
/// their surrogate form (see QuantMode::Surrogate). The difference is the
/// fourth-order central stencil with h rounded to a power of two.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         float h);

struct DirectionalCheck {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  // |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)
  double rel_error = 0.0;
  // joint_grad_check: directions rejected for crossing a clip boundary, and
  // whether the accepted one stayed on one smooth piece.
  int redraws = 0;
  bool smooth = true;
};

/// Compares the directional derivative <grad, u> with a central difference
/// along u, separately for every parameter tensor. `u` is a unit-norm random
/// direction per tensor drawn from `seed`. Parameters are restored after use.
std::vector<DirectionalCheck> directional_grad_check(const std::function<Tensor()>& loss,
                                                     std::span<Tensor> params,
                                                     std::span<const std::string> names, float h,
                                                     std::uint64_t seed);

/// One random unit direction spanning all of `params` jointly, repeated for
/// `directions` independent draws. The directional derivative then scales
/// with the norm of the whole gradient rather than of one small tensor. In
/// surrogate mode a direction whose stencil moves any fake-quant input across
/// a clip boundary is redrawn (see clip_signature).
std::vector<DirectionalCheck> joint_grad_check(const std::function<Tensor()>& loss,
                                               std::span<Tensor> params, float h,
                                               std::uint64_t seed, int directions);

// ||analytic - numeric|| / ||numeric|| over a set of directions, i.e. the
// relative error of the gradient projected onto their span.
double projected_rel_error(std::span<const DirectionalCheck> checks);

}  // namespace qvit
