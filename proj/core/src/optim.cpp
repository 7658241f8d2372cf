#include "nextscale/optim.hpp"

#include <cmath>
#include <numbers>

namespace nextscale {

void OptimizerConfig::validate() const {
  require(beta1 >= 0.0 && beta1 < 1.0, "optimizer: beta1 must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "optimizer: beta2 must lie in [0, 1)");
  require(weight_decay >= 0.0, "optimizer: weight_decay must be non-negative");
  require(peak_lr >= 0.0, "optimizer: peak_lr must be non-negative");
  require(warmup_steps >= 0 && total_steps >= 0 && warmup_steps <= total_steps,
          "optimizer: need 0 <= warmup_steps <= total_steps");
  require(grad_clip_norm > 0.0, "optimizer: grad_clip_norm must be positive");
}

double lr_at(long step, const OptimizerConfig& cfg) {
  const double peak = cfg.peak_lr;
  const double floor = cfg.floor_lr();
  if (step < 0) {
    step = 0;
  }
  if (step > cfg.total_steps) {
    return floor;
  }
  if (step < cfg.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const long decay_steps = cfg.total_steps - cfg.warmup_steps;
  if (decay_steps == 0) {
    return peak;
  }
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay_steps);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double scaled_peak_lr(double base_lr, long batch_size, long reference_batch) {
  require(batch_size > 0 && reference_batch > 0, "scaled_peak_lr: batch sizes must be positive");
  return base_lr * static_cast<double>(batch_size) / static_cast<double>(reference_batch);
}

template <class T>
void adamw_update(Parameter<T>& p, double lr, const OptimizerConfig& cfg) {
  require(lr >= 0.0, "adamw_update: negative learning rate");
  auto& value = p.mutable_value().data;
  const std::vector<T> g = p.var.grad();
  p.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
  const double wd = p.decay ? cfg.weight_decay : 0.0;
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double gi = g[i];
    const double m = cfg.beta1 * static_cast<double>(p.m[i]) + (1.0 - cfg.beta1) * gi;
    const double v = cfg.beta2 * static_cast<double>(p.v[i]) + (1.0 - cfg.beta2) * gi * gi;
    p.m[i] = static_cast<T>(m);
    p.v[i] = static_cast<T>(v);
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    const double theta = value[i];
    value[i] = static_cast<T>(theta - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + wd * theta));
  }
}

template <class T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    for (T g : p->grad_buffer()) {
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sq);
  // The relative slack keeps a second application a no-op after rounding.
  if (norm <= max_norm * (1.0 + 1e-9) || norm == 0.0) {
    return 1.0;
  }
  const double factor = max_norm / norm;
  for (auto* p : params) {
    for (T& g : p->grad_buffer()) {
      g = static_cast<T>(g * factor);
    }
  }
  return factor;
}

template void adamw_update(Parameter<float>&, double, const OptimizerConfig&);
template void adamw_update(Parameter<double>&, double, const OptimizerConfig&);
template double clip_grad_norm(std::span<Parameter<float>* const>, double);
template double clip_grad_norm(std::span<Parameter<double>* const>, double);

}  // namespace nextscale
