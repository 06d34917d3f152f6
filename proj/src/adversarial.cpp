#include "tsdp/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tsdp/engine.hpp"

namespace tsdp::nn {

Tensor grad_wrt_input(const ModelGraph& model, const Tensor& x,
                      std::span<const int> labels) {
  Trace tr;
  const Tensor out = run(model, x, Mode::Eval, &tr);
  const std::size_t n = x.dim(0);
  Tensor g;
  softmax_cross_entropy(out.reshaped({n, out.row_size()}), labels, &g);
  // softmax_cross_entropy averages over the batch; undo it per row.
  for (auto& v : g.vec()) v *= static_cast<double>(n);
  return backward(model, tr, g.reshaped(out.shape()), nullptr, true);
}

double project_to_ball(double v, double center, double eps, double lo, double hi) {
  double top = std::min(center + eps, hi);
  while (top - center > eps) top = std::nextafter(top, center);
  double bottom = std::max(center - eps, lo);
  while (center - bottom > eps) bottom = std::nextafter(bottom, center);
  if (bottom > top) return center;
  return std::clamp(v, bottom, top);
}

Tensor pgd_attack(const ModelGraph& model, const Tensor& x,
                  std::span<const int> labels, const PgdConfig& cfg) {
  if (cfg.eps < 0.0) throw std::invalid_argument("pgd eps must be >= 0");
  if (labels.size() != x.dim(0)) throw std::invalid_argument("pgd label count mismatch");
  Tensor adv = x;
  if (cfg.steps == 0 || cfg.eps == 0.0) return adv;
  const double step = cfg.eps * cfg.step_fraction;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const Tensor g = grad_wrt_input(model, adv, labels);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const double dir = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      adv[i] = project_to_ball(adv[i] + step * dir, x[i], cfg.eps, cfg.clamp_lo,
                               cfg.clamp_hi);
    }
  }
  return adv;
}

}  // namespace tsdp::nn
