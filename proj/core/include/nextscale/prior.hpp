#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "nextscale/autograd.hpp"
#include "nextscale/checkpoint.hpp"
#include "nextscale/optim.hpp"
#include "nextscale/schedule.hpp"

namespace nextscale {

struct PriorConfig {
  std::size_t depth = 4;
  std::size_t width = 128;
  std::size_t heads = 4;
  std::size_t vocab = 64;
  ScaleSchedule schedule{1, 2, 3, 4};
  /// Number of real labels; the null condition is index num_labels.
  std::size_t num_labels = 4;
  /// Latent width of the frozen codebook the inputs are built from.
  std::size_t channels = 8;
  std::size_t mlp_ratio = 4;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] int null_label() const { return static_cast<int>(num_labels); }
};

/// allow[i * length + j] != 0 iff scale(j) <= scale(i).
struct BlockCausalMask {
  std::size_t length = 0;
  std::vector<std::uint8_t> allow;

  [[nodiscard]] bool at(std::size_t i, std::size_t j) const { return allow[i * length + j] != 0; }
  [[nodiscard]] std::size_t allowed_pairs() const;
};

/// Mask over the first `scales` scales (all of them when scales == 0).
BlockCausalMask build_mask(const ScaleSchedule& schedule, std::size_t scales = 0);

/// Block-causal transformer over the token pyramid with AdaLN conditioning.
template <class T>
class PriorModel {
 public:
  /// `codebook` is the frozen [V, C] table of the tokenizer.
  PriorModel(PriorConfig config, Tensor<T> codebook);

  [[nodiscard]] const PriorConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  [[nodiscard]] const ParameterSet<T>& params() const { return params_; }
  [[nodiscard]] const Tensor<T>& codebook() const { return codebook_; }

  /// Input sequence [B, L, D] for scales 0..scales-1. Each pyramid needs at
  /// least scales-1 grids; later grids are ignored.
  [[nodiscard]] Var<T> embed_inputs(std::span<const TokenPyramid> prefixes, std::span<const int> labels,
                                    std::size_t scales) const;
  /// Logits [B, L, V] over the positions of scales 0..scales-1.
  [[nodiscard]] Var<T> forward(std::span<const TokenPyramid> prefixes, std::span<const int> labels,
                               std::size_t scales) const;
  /// Per-token mean cross-entropy against all grids.
  [[nodiscard]] Var<T> loss(std::span<const TokenPyramid> pyramids, std::span<const int> labels) const;

 private:
  [[nodiscard]] const Var<T>& p(const std::string& name) const;

  PriorConfig config_;
  ParameterSet<T> params_;
  Tensor<T> codebook_;
};

extern template class PriorModel<float>;
extern template class PriorModel<double>;

/// Unit L2 norm per row of [n, d] values; zero rows stay zero.
std::vector<double> qk_normalize(std::span<const double> values, std::size_t d);

/// log p(pyramid | label): the sum over all positions of the log-softmax at
/// the realized index, from one full-length pass.
template <class T>
double joint_logprob(const PriorModel<T>& model, const TokenPyramid& pyramid, int label);

/// log p(r_k | r_<k, label) from a pass over the prefix through scale k.
template <class T>
double scale_logprob(const PriorModel<T>& model, const TokenPyramid& pyramid, int label, std::size_t k);

/// Held-out per-token cross-entropy (nats) under the true labels.
double prior_eval_loss(const PriorModel<float>& model, std::span<const TokenPyramid> pyramids,
                       std::span<const int> labels, std::size_t chunk = 64);

struct PriorTrainConfig {
  long steps = 1500;
  std::size_t batch = 32;
  std::uint64_t seed = 2;
  long log_every = 100;
};

struct PriorTrainState {
  long step = 0;
  std::vector<double> loss_curve;
};

struct PriorProgress {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Training labels after null-condition dropout for a step: a pure function
/// of (seed, step, slot).
std::vector<int> dropout_labels(std::span<const int> labels, double p, int null_label, std::uint64_t seed,
                                long step);

/// One AdamW step on the batch drawn for `state.step`; advances it.
PriorProgress prior_train_step(PriorModel<float>& model, std::span<const TokenPyramid> tokens,
                               std::span<const int> labels, const OptimizerConfig& opt,
                               const PriorTrainConfig& cfg, PriorTrainState& state);

/// Runs until state.step == cfg.steps; same callback contract as the
/// tokenizer trainer.
void train_prior(PriorModel<float>& model, std::span<const TokenPyramid> tokens, std::span<const int> labels,
                 const OptimizerConfig& opt, const PriorTrainConfig& cfg, PriorTrainState& state,
                 const std::function<bool(const PriorProgress&)>& on_progress = {});

Checkpoint prior_checkpoint(const PriorModel<float>& model, const PriorTrainState* state = nullptr);
PriorModel<float> prior_from_checkpoint(const Checkpoint& ckpt, PriorTrainState* state = nullptr);

}  // namespace nextscale
