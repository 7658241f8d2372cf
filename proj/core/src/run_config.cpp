#include "nextscale/run_config.hpp"

#include <cmath>

#include "config_json.hpp"

namespace nextscale {

void CorpusConfig::validate() const {
  require(num_labels >= 1, "corpus: num_labels must be positive");
  require(per_label >= 1, "corpus: per_label must be positive");
  require(resolution >= 2, "corpus: resolution must be at least 2");
  require(noise_level >= 0.0, "corpus: noise_level must be non-negative");
  require(split.train >= 0.0 && split.val >= 0.0 && split.test >= 0.0 &&
              std::abs(split.train + split.val + split.test - 1.0) < 1e-9,
          "corpus: split fractions must be non-negative and sum to 1");
}

RunConfig::RunConfig() {
  tokenizer.seed = 7;
  tokenizer_optim.peak_lr = 2e-3;
  tokenizer_optim.weight_decay = 0.0;
  tokenizer_optim.warmup_steps = 150;
  tokenizer_optim.total_steps = tokenizer_train.steps;
  prior.seed = 3;
  prior_optim.peak_lr = 1e-3;
  prior_optim.warmup_steps = 75;
  prior_optim.total_steps = prior_train.steps;
}

void RunConfig::validate() const {
  corpus.validate();
  tokenizer.validate();
  tokenizer_optim.validate();
  prior.validate();
  prior_optim.validate();
  sampling.validate(prior.vocab);
  require(tokenizer.resolution == corpus.resolution, "config: tokenizer.resolution must equal corpus.resolution");
  require(prior.vocab == tokenizer.vocab, "config: prior.vocab must equal tokenizer.vocab");
  require(prior.channels == tokenizer.channels, "config: prior.channels must equal tokenizer.channels");
  require(prior.schedule == tokenizer.schedule, "config: prior.schedule must equal tokenizer.schedule");
  require(prior.num_labels == static_cast<std::size_t>(corpus.num_labels),
          "config: prior.num_labels must equal corpus.num_labels");
  require(tokenizer_train.steps >= 0 && prior_train.steps >= 0, "config: steps must be non-negative");
  require(checkpoint_every >= 0, "config: checkpoint_every must be non-negative");
  require(eval.gamma > 0.0, "config: eval.gamma must be positive");
  require(eval.timing_warmup < eval.timing_images, "config: eval.timing_warmup must be below timing_images");
  require(!paths.corpus.empty() && !paths.tokenizer.empty() && !paths.prior.empty() && !paths.samples.empty() &&
              !paths.reports.empty(),
          "config: paths must be non-empty");
}

namespace {

using detail::ojson;
using detail::StrictObject;

ojson to_tree(const RunConfig& c) {
  ojson j;
  ojson corpus;
  corpus["num_labels"] = c.corpus.num_labels;
  corpus["per_label"] = c.corpus.per_label;
  corpus["resolution"] = c.corpus.resolution;
  corpus["noise_level"] = c.corpus.noise_level;
  corpus["split"] = ojson{{"train", c.corpus.split.train}, {"val", c.corpus.split.val}, {"test", c.corpus.split.test}};
  corpus["seed"] = c.corpus.seed;
  j["corpus"] = corpus;
  j["tokenizer"] = detail::to_json(c.tokenizer);
  j["tokenizer_optim"] = detail::to_json(c.tokenizer_optim);
  j["tokenizer_train"] = detail::to_json(c.tokenizer_train);
  j["prior"] = detail::to_json(c.prior);
  j["prior_optim"] = detail::to_json(c.prior_optim);
  j["prior_train"] = detail::to_json(c.prior_train);
  j["sampling"] = detail::to_json(c.sampling);
  j["eval"] = ojson{{"gamma", c.eval.gamma},
                    {"timing_images", c.eval.timing_images},
                    {"timing_warmup", c.eval.timing_warmup},
                    {"samples_per_label", c.eval.samples_per_label}};
  j["paths"] = ojson{{"corpus", c.paths.corpus},
                     {"tokenizer", c.paths.tokenizer},
                     {"prior", c.paths.prior},
                     {"samples", c.paths.samples},
                     {"reports", c.paths.reports}};
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

void merge_tree(const ojson& j, RunConfig& c) {
  StrictObject o(j, "config");
  if (o.has("corpus")) {
    StrictObject s(o.child("corpus"), "corpus");
    s.get("num_labels", c.corpus.num_labels);
    s.get("per_label", c.corpus.per_label);
    s.get("resolution", c.corpus.resolution);
    s.get("noise_level", c.corpus.noise_level);
    if (s.has("split")) {
      StrictObject f(s.child("split"), "corpus.split");
      f.get("train", c.corpus.split.train);
      f.get("val", c.corpus.split.val);
      f.get("test", c.corpus.split.test);
      f.finish();
    }
    s.get("seed", c.corpus.seed);
    s.finish();
  }
  if (o.has("tokenizer")) detail::from_json(o.child("tokenizer"), c.tokenizer);
  if (o.has("tokenizer_optim")) detail::from_json(o.child("tokenizer_optim"), c.tokenizer_optim);
  if (o.has("tokenizer_train")) detail::from_json(o.child("tokenizer_train"), c.tokenizer_train);
  if (o.has("prior")) detail::from_json(o.child("prior"), c.prior);
  if (o.has("prior_optim")) detail::from_json(o.child("prior_optim"), c.prior_optim);
  if (o.has("prior_train")) detail::from_json(o.child("prior_train"), c.prior_train);
  if (o.has("sampling")) detail::from_json(o.child("sampling"), c.sampling);
  if (o.has("eval")) {
    StrictObject s(o.child("eval"), "eval");
    s.get("gamma", c.eval.gamma);
    s.get("timing_images", c.eval.timing_images);
    s.get("timing_warmup", c.eval.timing_warmup);
    s.get("samples_per_label", c.eval.samples_per_label);
    s.finish();
  }
  if (o.has("paths")) {
    StrictObject s(o.child("paths"), "paths");
    s.get("corpus", c.paths.corpus);
    s.get("tokenizer", c.paths.tokenizer);
    s.get("prior", c.paths.prior);
    s.get("samples", c.paths.samples);
    s.get("reports", c.paths.reports);
    s.finish();
  }
  o.get("checkpoint_every", c.checkpoint_every);
  o.finish();
}

ojson parse_text(const std::string& text) {
  try {
    return ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError(std::string("config: malformed JSON: ") + e.what());
  }
}

}  // namespace

std::string run_config_json(const RunConfig& config) { return to_tree(config).dump(2) + "\n"; }

RunConfig merge_run_config(const RunConfig& base, const std::string& json_text) {
  RunConfig c = base;
  merge_tree(parse_text(json_text), c);
  c.validate();
  return c;
}

RunConfig parse_run_config(const std::string& json_text) { return merge_run_config(RunConfig{}, json_text); }

}  // namespace nextscale
