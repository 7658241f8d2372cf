#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nextscale/datagen.hpp"
#include "nextscale/prior.hpp"
#include "nextscale/schedule.hpp"
#include "nextscale/tokenizer.hpp"

namespace nextscale {

struct SamplingConfig {
  double cfg_scale = 1.0;
  std::size_t top_k = 0;  // 0 disables
  double top_p = 1.0;     // 1 keeps the full distribution
  /// 0 selects argmax decoding.
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// Guidance grows linearly from 0 at the first scale to cfg_scale at the last.
  bool guidance_ramp = false;
  /// false skips the null-condition forward entirely (K passes instead of 2K).
  bool guidance = true;

  void validate(std::size_t vocab) const;
};

/// uncond + s * (cond - uncond); s == 1 returns cond and s == 0 uncond exactly.
std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double s);

/// Keeps the k largest masses (lower index first on ties) and renormalizes.
std::vector<double> top_k_filter(std::span<const double> probs, std::size_t k);

/// Keeps the smallest descending-mass prefix whose cumulative mass reaches p.
std::vector<double> top_p_filter(std::span<const double> probs, double p);

/// Temperature, softmax and both filters applied to one row of guided logits.
/// At temperature 0 the result is one-hot on the argmax.
std::vector<double> sampling_distribution(std::span<const double> logits, const SamplingConfig& cfg);

/// Inverse-CDF draw restricted to entries with positive mass.
std::size_t draw_categorical(std::span<const double> probs, double u);

/// The uniform consumed at (scale, position) of a sample with this seed.
double sampling_uniform(std::uint64_t seed, std::size_t scale, std::size_t position);

/// Guidance scale in effect at scale k.
double guidance_at(const SamplingConfig& cfg, std::size_t k, std::size_t scales);

/// Draws grid k given the grids of `prefix` before it. Evaluates the prior
/// under `label` and, with guidance on, under the null label; neither
/// evaluation consumes randomness. Adds the number of forward passes to *forwards when given.
std::vector<int> sample_scale(const PriorModel<float>& prior, const TokenPyramid& prefix, int label, std::size_t k,
                              const SamplingConfig& cfg, std::size_t* forwards = nullptr);

struct Generation {
  Slice image;
  TokenPyramid pyramid;
  std::size_t forward_passes = 0;
};

Generation generate(const PriorModel<float>& prior, const TokenizerModel<float>& tokenizer, int label,
                    const SamplingConfig& cfg);

/// Seed of sample `index` in a batch drawn with `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);

/// Sample i equals generate(labels[i]) with seed sample_seed(cfg.seed, i),
/// whatever the thread count.
std::vector<Generation> generate_batch(const PriorModel<float>& prior, const TokenizerModel<float>& tokenizer,
                                       std::span<const int> labels, const SamplingConfig& cfg, unsigned threads = 1);

}  // namespace nextscale
