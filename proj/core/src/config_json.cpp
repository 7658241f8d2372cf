#include "config_json.hpp"

namespace nextscale::detail {

ojson to_json(const TokenizerConfig& c) {
  ojson j;
  j["resolution"] = c.resolution;
  j["schedule"] = c.schedule.sizes();
  j["vocab"] = c.vocab;
  j["channels"] = c.channels;
  j["widths"] = c.widths;
  j["commit_beta"] = c.commit_beta;
  j["ema_decay"] = c.ema_decay;
  j["dead_code_threshold"] = c.dead_code_threshold;
  j["dead_code_after"] = c.dead_code_after;
  j["seed"] = c.seed;
  return j;
}

void from_json(const ojson& j, TokenizerConfig& c) {
  StrictObject o(j, "tokenizer");
  o.get("resolution", c.resolution);
  std::vector<std::size_t> sizes = c.schedule.sizes();
  o.get("schedule", sizes);
  c.schedule = ScaleSchedule(sizes);
  o.get("vocab", c.vocab);
  o.get("channels", c.channels);
  o.get("widths", c.widths);
  o.get("commit_beta", c.commit_beta);
  o.get("ema_decay", c.ema_decay);
  o.get("dead_code_threshold", c.dead_code_threshold);
  o.get("dead_code_after", c.dead_code_after);
  o.get("seed", c.seed);
  o.finish();
  c.validate();
}

ojson to_json(const OptimizerConfig& c) {
  ojson j;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["weight_decay"] = c.weight_decay;
  j["eps"] = c.eps;
  j["peak_lr"] = c.peak_lr;
  j["warmup_steps"] = c.warmup_steps;
  j["total_steps"] = c.total_steps;
  j["min_lr"] = c.min_lr;
  j["grad_clip_norm"] = c.grad_clip_norm;
  return j;
}

void from_json(const ojson& j, OptimizerConfig& c) {
  StrictObject o(j, "optimizer");
  o.get("beta1", c.beta1);
  o.get("beta2", c.beta2);
  o.get("weight_decay", c.weight_decay);
  o.get("eps", c.eps);
  o.get("peak_lr", c.peak_lr);
  o.get("warmup_steps", c.warmup_steps);
  o.get("total_steps", c.total_steps);
  o.get("min_lr", c.min_lr);
  o.get("grad_clip_norm", c.grad_clip_norm);
  o.finish();
  c.validate();
}

ojson to_json(const TokenizerTrainConfig& c) {
  ojson j;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  j["log_every"] = c.log_every;
  j["data_init"] = c.data_init;
  return j;
}

void from_json(const ojson& j, TokenizerTrainConfig& c) {
  StrictObject o(j, "tokenizer_train");
  o.get("steps", c.steps);
  o.get("batch", c.batch);
  o.get("seed", c.seed);
  o.get("log_every", c.log_every);
  o.get("data_init", c.data_init);
  o.finish();
  require(c.steps >= 0 && c.batch >= 1, "tokenizer_train: steps must be >= 0 and batch >= 1");
}

ojson to_json(const PriorConfig& c) {
  ojson j;
  j["depth"] = c.depth;
  j["width"] = c.width;
  j["heads"] = c.heads;
  j["vocab"] = c.vocab;
  j["schedule"] = c.schedule.sizes();
  j["num_labels"] = c.num_labels;
  j["channels"] = c.channels;
  j["mlp_ratio"] = c.mlp_ratio;
  j["cond_dropout"] = c.cond_dropout;
  j["seed"] = c.seed;
  return j;
}

void from_json(const ojson& j, PriorConfig& c) {
  StrictObject o(j, "prior");
  o.get("depth", c.depth);
  o.get("width", c.width);
  o.get("heads", c.heads);
  o.get("vocab", c.vocab);
  std::vector<std::size_t> sizes = c.schedule.sizes();
  o.get("schedule", sizes);
  c.schedule = ScaleSchedule(sizes);
  o.get("num_labels", c.num_labels);
  o.get("channels", c.channels);
  o.get("mlp_ratio", c.mlp_ratio);
  o.get("cond_dropout", c.cond_dropout);
  o.get("seed", c.seed);
  o.finish();
  c.validate();
}

ojson to_json(const PriorTrainConfig& c) {
  ojson j;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  j["log_every"] = c.log_every;
  return j;
}

void from_json(const ojson& j, PriorTrainConfig& c) {
  StrictObject o(j, "prior_train");
  o.get("steps", c.steps);
  o.get("batch", c.batch);
  o.get("seed", c.seed);
  o.get("log_every", c.log_every);
  o.finish();
  require(c.steps >= 0 && c.batch >= 1, "prior_train: steps must be >= 0 and batch >= 1");
}

ojson to_json(const SamplingConfig& c) {
  ojson j;
  j["cfg_scale"] = c.cfg_scale;
  j["top_k"] = c.top_k;
  j["top_p"] = c.top_p;
  j["temperature"] = c.temperature;
  j["seed"] = c.seed;
  j["guidance_ramp"] = c.guidance_ramp;
  j["guidance"] = c.guidance;
  return j;
}

void from_json(const ojson& j, SamplingConfig& c) {
  StrictObject o(j, "sampling");
  o.get("cfg_scale", c.cfg_scale);
  o.get("top_k", c.top_k);
  o.get("top_p", c.top_p);
  o.get("temperature", c.temperature);
  o.get("seed", c.seed);
  o.get("guidance_ramp", c.guidance_ramp);
  o.get("guidance", c.guidance);
  o.finish();
}

}  // namespace nextscale::detail
