#pragma once

#include <span>

#include "nextscale/autograd.hpp"

namespace nextscale {

/// AdamW hyper-parameters plus the warmup/cosine learning-rate schedule.
struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double eps = 1e-8;
  double peak_lr = 1e-3;
  long warmup_steps = 0;
  long total_steps = 1;
  double min_lr = -1.0;  // negative selects peak_lr / 100
  double grad_clip_norm = 1.0;

  void validate() const;
  [[nodiscard]] double floor_lr() const { return min_lr < 0.0 ? peak_lr / 100.0 : min_lr; }
};

/// Linear ramp 0 -> peak over the warmup, then cosine decay to the floor.
/// Steps past total_steps clamp to the floor.
double lr_at(long step, const OptimizerConfig& cfg);

/// Peak learning rate scaled linearly with batch size against a reference of 32.
double scaled_peak_lr(double base_lr, long batch_size, long reference_batch = 32);

/// One decoupled-weight-decay Adam step on `p` using its accumulated gradient.
/// Decay is skipped for parameters flagged decay == false.
template <class T>
void adamw_update(Parameter<T>& p, double lr, const OptimizerConfig& cfg);

/// Rescales all gradients so their global L2 norm is at most max_norm and
/// returns the factor applied (1 when already within bounds).
template <class T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm);

}  // namespace nextscale
