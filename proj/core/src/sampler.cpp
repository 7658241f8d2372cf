#include "nextscale/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nextscale/error.hpp"
#include "nextscale/parallel.hpp"
#include "nextscale/rng.hpp"

namespace nextscale {

void SamplingConfig::validate(std::size_t vocab) const {
  require(std::isfinite(cfg_scale) && cfg_scale >= 0.0, "sampling: cfg_scale must be >= 0");
  require(top_k <= vocab, "sampling: top_k " + std::to_string(top_k) + " exceeds the vocabulary " +
                              std::to_string(vocab));
  require(top_p > 0.0 && top_p <= 1.0, "sampling: top_p must be in (0, 1]");
  require(std::isfinite(temperature) && temperature >= 0.0, "sampling: temperature must be >= 0");
}

std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double s) {
  require(cond.size() == uncond.size(), "cfg_combine: length mismatch");
  if (s == 1.0) return {cond.begin(), cond.end()};
  if (s == 0.0) return {uncond.begin(), uncond.end()};
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + s * (cond[i] - uncond[i]);
  return out;
}

namespace {

// Indices by descending mass, lower index first among equals.
std::vector<std::size_t> rank_desc(std::span<const double> probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}

std::vector<double> keep(std::span<const double> probs, std::span<const std::size_t> which) {
  std::vector<double> out(probs.size(), 0.0);
  double total = 0.0;
  for (std::size_t i : which) total += probs[i];
  require(total > 0.0, "sampling: filter removed all probability mass");
  for (std::size_t i : which) out[i] = probs[i] / total;
  return out;
}

}  // namespace

std::vector<double> top_k_filter(std::span<const double> probs, std::size_t k) {
  require(k >= 1, "top_k_filter: k must be positive");
  if (k >= probs.size()) return {probs.begin(), probs.end()};
  const auto order = rank_desc(probs);
  return keep(probs, std::span(order).first(k));
}

std::vector<double> top_p_filter(std::span<const double> probs, double p) {
  require(p > 0.0 && p <= 1.0, "top_p_filter: p must be in (0, 1]");
  if (p >= 1.0) return {probs.begin(), probs.end()};
  const auto order = rank_desc(probs);
  double cum = 0.0;
  std::size_t n = 0;
  while (n < order.size() && probs[order[n]] > 0.0) {
    cum += probs[order[n++]];
    if (cum >= p) break;
  }
  return keep(probs, std::span(order).first(std::max<std::size_t>(n, 1)));
}

std::vector<double> sampling_distribution(std::span<const double> logits, const SamplingConfig& cfg) {
  require(!logits.empty(), "sampling: empty logit row");
  std::vector<double> probs(logits.size(), 0.0);
  if (cfg.temperature == 0.0) {
    probs[static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin())] = 1.0;
    return probs;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp((logits[i] - mx) / cfg.temperature);
    total += probs[i];
  }
  for (auto& v : probs) v /= total;
  if (cfg.top_k > 0) probs = top_k_filter(probs, cfg.top_k);
  if (cfg.top_p < 1.0) probs = top_p_filter(probs, cfg.top_p);
  return probs;
}

std::size_t draw_categorical(std::span<const double> probs, double u) {
  std::size_t last = probs.size();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cum += probs[i];
    last = i;
    if (u < cum) return i;
  }
  require(last < probs.size(), "draw_categorical: no positive mass");
  return last;  // u beyond the accumulated mass through round-off
}

double sampling_uniform(std::uint64_t seed, std::size_t scale, std::size_t position) {
  return keyed_uniform(seed, {0x73616D70ULL, scale, position});
}

double guidance_at(const SamplingConfig& cfg, std::size_t k, std::size_t scales) {
  if (!cfg.guidance_ramp || scales <= 1) return cfg.cfg_scale;
  return cfg.cfg_scale * static_cast<double>(k) / static_cast<double>(scales - 1);
}

std::vector<int> sample_scale(const PriorModel<float>& prior, const TokenPyramid& prefix, int label, std::size_t k,
                              const SamplingConfig& cfg, std::size_t* forwards) {
  const auto& pc = prior.config();
  cfg.validate(pc.vocab);
  require(k < pc.schedule.scales(), "sample_scale: scale outside the schedule");
  require(label >= 0 && label <= pc.null_label(), "sample_scale: label outside the condition table");
  const int null_label = pc.null_label();
  const Tensor<float> cond = prior.forward(std::span(&prefix, 1), std::span(&label, 1), k + 1).value();
  const Tensor<float> uncond =
      cfg.guidance ? prior.forward(std::span(&prefix, 1), std::span(&null_label, 1), k + 1).value() : Tensor<float>{};
  if (forwards) *forwards += cfg.guidance ? 2 : 1;
  const std::size_t V = pc.vocab, begin = pc.schedule.offset(k), n = pc.schedule.tokens(k);
  const double s = guidance_at(cfg, k, pc.schedule.scales());
  std::vector<int> grid(n);
  for (std::size_t pos = 0; pos < n; ++pos) {
    const float* c = cond.data.data() + (begin + pos) * V;
    const std::vector<double> cd(c, c + V);
    std::vector<double> logits = cd;
    if (cfg.guidance) {
      const float* u = uncond.data.data() + (begin + pos) * V;
      logits = cfg_combine(cd, std::vector<double>(u, u + V), s);
    }
    const auto probs = sampling_distribution(logits, cfg);
    grid[pos] = static_cast<int>(draw_categorical(probs, sampling_uniform(cfg.seed, k, pos)));
  }
  return grid;
}

Generation generate(const PriorModel<float>& prior, const TokenizerModel<float>& tokenizer, int label,
                    const SamplingConfig& cfg) {
  const auto& pc = prior.config();
  const auto& tc = tokenizer.config();
  require(pc.schedule == tc.schedule && pc.vocab == tc.vocab,
          "generate: prior and tokenizer disagree on schedule or vocabulary");
  Generation g;
  for (std::size_t k = 0; k < pc.schedule.scales(); ++k) {
    g.pyramid.grids.push_back(sample_scale(prior, g.pyramid, label, k, cfg, &g.forward_passes));
  }
  const Image img = decode(g.pyramid, tokenizer);
  g.image = Slice{img.height, img.width, img.values, DatasetLabel{label, {}}};
  return g;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(seed, {0x696D67ULL, index});
}

std::vector<Generation> generate_batch(const PriorModel<float>& prior, const TokenizerModel<float>& tokenizer,
                                       std::span<const int> labels, const SamplingConfig& cfg, unsigned threads) {
  std::vector<Generation> out(labels.size());
  parallel_for(labels.size(), threads, [&](std::size_t i) {
    SamplingConfig c = cfg;
    c.seed = sample_seed(cfg.seed, i);
    out[i] = generate(prior, tokenizer, labels[i], c);
  });
  return out;
}

}  // namespace nextscale
