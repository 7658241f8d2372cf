#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nextscale/datagen.hpp"
#include "nextscale/optim.hpp"
#include "nextscale/prior.hpp"
#include "nextscale/sampler.hpp"
#include "nextscale/tokenizer.hpp"

namespace nextscale {

struct CorpusConfig {
  int num_labels = 4;
  std::size_t per_label = 500;
  std::size_t resolution = 32;
  double noise_level = 0.02;
  SplitFractions split;
  std::uint64_t seed = 1234;

  void validate() const;
  [[nodiscard]] std::vector<PhantomSpec> specs() const { return default_specs(num_labels, noise_level); }
};

struct EvalConfig {
  double gamma = 0.1;
  /// Images timed by `bench measure`, the first `timing_warmup` excluded.
  std::size_t timing_images = 16;
  std::size_t timing_warmup = 2;
  /// Generated images per label for `bench measure`.
  std::size_t samples_per_label = 50;
};

/// Workdir-relative artifact locations.
struct PathConfig {
  std::string corpus = "corpus";
  std::string tokenizer = "tokenizer.mvckpt";
  std::string prior = "prior.mvckpt";
  std::string samples = "samples";
  std::string reports = "reports";
};

/// Everything a command needs, resolved. Serialized next to every artifact.
struct RunConfig {
  CorpusConfig corpus;
  TokenizerConfig tokenizer;
  OptimizerConfig tokenizer_optim;
  TokenizerTrainConfig tokenizer_train;
  PriorConfig prior;
  OptimizerConfig prior_optim;
  PriorTrainConfig prior_train;
  SamplingConfig sampling;
  EvalConfig eval;
  PathConfig paths;
  /// Training writes a checkpoint every this many steps (0: only at the end).
  long checkpoint_every = 500;

  /// Desk defaults: R=32, schedule (1,2,3,4), V=64, C=8, 4 labels x 500.
  RunConfig();

  /// Section checks plus cross-checks (prior vocab, channels, schedule and
  /// labels must agree with the tokenizer and corpus).
  void validate() const;
};

/// Pretty-printed JSON with every field present.
std::string run_config_json(const RunConfig& config);

/// Strict: unknown keys at any level throw ContractError. Missing keys keep
/// their defaults. The result is validated.
RunConfig parse_run_config(const std::string& json_text);

/// Overrides given as a JSON object merged over `base` with the same rules.
RunConfig merge_run_config(const RunConfig& base, const std::string& json_text);

}  // namespace nextscale
