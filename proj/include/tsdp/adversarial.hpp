#pragma once

#include <span>

#include "tsdp/graph.hpp"
#include "tsdp/tensor.hpp"

namespace tsdp::nn {

struct PgdConfig {
  double eps = 0.03;
  std::size_t steps = 7;
  // Step size as a multiple of eps.
  double step_fraction = 0.25;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
};

// Gradient of the summed cross-entropy w.r.t. each input row, so row i is
// the gradient of sample i's own loss. Uses eval-mode BatchNorm.
Tensor grad_wrt_input(const ModelGraph& model, const Tensor& x,
                      std::span<const int> labels);

// L-inf PGD with sign-gradient ascent and no random start. Every output
// element satisfies |x'-x| <= eps exactly in floating point and lies inside
// [clamp_lo, clamp_hi].
Tensor pgd_attack(const ModelGraph& model, const Tensor& x,
                  std::span<const int> labels, const PgdConfig& cfg = {});

// Largest value in [lo, hi] whose distance to `center` is at most eps, as
// evaluated in double arithmetic.
double project_to_ball(double v, double center, double eps, double lo, double hi);

}  // namespace tsdp::nn
