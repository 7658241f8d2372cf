#include <benchmark/benchmark.h>

#include <random>

#include "nextscale/datagen.hpp"
#include "nextscale/metrics.hpp"
#include "nextscale/prior.hpp"
#include "nextscale/sampler.hpp"
#include "nextscale/tokenizer.hpp"

using namespace nextscale;

namespace {

// Untrained default-size models; cost does not depend on the weights.
struct Models {
  TokenizerModel<float> tok{TokenizerConfig{}};
  PriorModel<float> prior{PriorConfig{}, tok.codebook().embeddings};
  Corpus corpus = build_corpus(default_specs(4), 16, 32, SplitFractions{1.0, 0.0, 0.0}, 11, 1);
};

const Models& models() {
  static const Models m;
  return m;
}

void BM_Datagen(benchmark::State& state) {
  for (auto _ : state) {
    Corpus c = build_corpus(default_specs(4), static_cast<std::size_t>(state.range(0)), 32,
                            SplitFractions{1.0, 0.0, 0.0}, 5, 1);
    benchmark::DoNotOptimize(c.train.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * 4);
}
BENCHMARK(BM_Datagen)->Arg(8)->Arg(64);

void BM_TokenizerEncode(benchmark::State& state) {
  const Models& m = models();
  std::size_t i = 0;
  for (auto _ : state) {
    TokenPyramid p = encode(m.corpus.train[i++ % m.corpus.train.size()], m.tok);
    benchmark::DoNotOptimize(p.grids.data());
  }
}
BENCHMARK(BM_TokenizerEncode);

void BM_PriorForward(benchmark::State& state) {
  const Models& m = models();
  const ScaleSchedule& s = m.prior.config().schedule;
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  std::vector<TokenPyramid> prefixes;
  std::vector<int> labels;
  for (std::size_t b = 0; b < batch; ++b) {
    prefixes.push_back(encode(m.corpus.train[b], m.tok));
    labels.push_back(static_cast<int>(b % 4));
  }
  for (auto _ : state) {
    auto logits = m.prior.forward(prefixes, labels, s.scales());
    benchmark::DoNotOptimize(logits.value().data.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PriorForward)->Arg(1)->Arg(16);

void BM_Generate(benchmark::State& state) {
  const Models& m = models();
  SamplingConfig cfg;
  cfg.guidance = state.range(0) != 0;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    cfg.seed = seed++;
    Generation g = generate(m.prior, m.tok, 0, cfg);
    benchmark::DoNotOptimize(g.image.values.data());
  }
}
BENCHMARK(BM_Generate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_FeatureMetrics(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  Features a(n, 8), b(n, 8);
  for (auto& v : a.values) v = g(rng);
  for (auto& v : b.values) v = g(rng) + 0.1;
  for (auto _ : state) {
    const double fid = frechet_distance(fit_gaussian(a), fit_gaussian(b));
    const double k = kid(a, b);
    benchmark::DoNotOptimize(fid + k);
  }
}
BENCHMARK(BM_FeatureMetrics)->Arg(200)->Arg(800)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
