#pragma once

#include "json_io.hpp"
#include "nextscale/optim.hpp"
#include "nextscale/prior.hpp"
#include "nextscale/sampler.hpp"
#include "nextscale/tokenizer.hpp"

namespace nextscale::detail {

ojson to_json(const TokenizerConfig& c);
void from_json(const ojson& j, TokenizerConfig& c);

ojson to_json(const OptimizerConfig& c);
void from_json(const ojson& j, OptimizerConfig& c);

ojson to_json(const TokenizerTrainConfig& c);
void from_json(const ojson& j, TokenizerTrainConfig& c);

ojson to_json(const PriorConfig& c);
void from_json(const ojson& j, PriorConfig& c);

ojson to_json(const PriorTrainConfig& c);
void from_json(const ojson& j, PriorTrainConfig& c);

ojson to_json(const SamplingConfig& c);
/// Vocabulary-dependent checks are left to the caller.
void from_json(const ojson& j, SamplingConfig& c);

}  // namespace nextscale::detail
