#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "nextscale/datagen.hpp"
#include "nextscale/error.hpp"
#include "nextscale/ops.hpp"
#include "nextscale/tokenizer.hpp"
#include "support/gradcheck.hpp"

using namespace nextscale;
using nextscale::testing::gradcheck;
using nextscale::testing::random_tensor;

namespace {

TokenizerConfig tiny_config() {
  TokenizerConfig c;
  c.resolution = 8;
  c.schedule = ScaleSchedule{1, 2};
  c.vocab = 4;
  c.channels = 2;
  c.widths = {3};
  c.seed = 3;
  return c;
}

Tensor<double> random_images(std::size_t b, std::size_t r, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> t({b, 1, r, r});
  for (auto& v : t.data) v = u(rng);
  return t;
}

template <class T>
void perturb_params(TokenizerModel<T>& model, unsigned seed, double sd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (auto* p : model.params().all()) {
    for (auto& v : p->mutable_value().data) v += static_cast<T>(n(rng));
  }
}

std::vector<Slice> small_corpus() {
  return build_corpus(default_specs(4), 6, 32, SplitFractions{}, 11, 1).train;
}

}  // namespace

TEST_CASE("schedule token counts") {
  CHECK(ScaleSchedule({1, 2, 3, 4, 5, 6, 8, 10, 13, 16}).token_count() == 680);
  CHECK(ScaleSchedule({1, 2, 3, 4}).token_count() == 30);
  for (std::size_t K = 1; K <= 8; ++K) {
    std::vector<std::size_t> sizes;
    std::size_t expect = 0;
    for (std::size_t k = 0; k < K; ++k) {
      sizes.push_back(2 * k + 1);
      expect += (2 * k + 1) * (2 * k + 1);
    }
    const ScaleSchedule s(sizes);
    CHECK(s.token_count() == expect);
    for (std::size_t pos = 0; pos < expect; ++pos) {
      const std::size_t k = s.scale_of(pos);
      CHECK(pos >= s.offset(k));
      CHECK(pos < s.offset(k + 1));
    }
  }
  CHECK_THROWS_AS(ScaleSchedule({2, 2}), ContractError);
  CHECK_THROWS_AS(ScaleSchedule({3, 1}), ContractError);
  CHECK_THROWS_AS(ScaleSchedule(std::vector<std::size_t>{}), ContractError);
}

TEST_CASE("interpolate examples") {
  std::mt19937_64 rng(1);
  const auto g = Var<double>::constant(random_tensor({2, 3, 4, 4}, rng));
  CHECK(interpolate(g, 4).value().data == g.value().data);

  const auto c = Var<double>::constant(Tensor<double>({1, 2, 3, 3}, 0.7));
  for (std::size_t b : {1u, 2u, 5u, 9u}) {
    const auto up = interpolate(c, b).value();
    for (double v : up.data) CHECK(v == doctest::Approx(0.7));
  }
  const auto two = Var<double>::constant(Tensor<double>({1, 2, 2, 2}, {0, 0, 1, 1, 0, 0, 1, 1}));
  const auto one = interpolate(two, 1).value();
  CHECK(one.data[0] == doctest::Approx(0.5));
  CHECK(one.data[1] == doctest::Approx(0.5));
}

TEST_CASE("quantize examples") {
  Codebook<double> cb;
  cb.embeddings = Tensor<double>({2, 2}, {0, 0, 1, 1});
  CHECK(quantize<double>(std::vector<double>{0.2, 0.1}, cb) == 0);
  CHECK(quantize<double>(std::vector<double>{0.5, 0.5}, cb) == 0);
  CHECK(quantize<double>(std::vector<double>{1, 1}, cb) == 1);
  CHECK_THROWS_AS(quantize<double>(std::vector<double>{NAN, 0}, cb), NumericError);
  CHECK_THROWS_AS(quantize<double>(std::vector<double>{0, 0, 0}, cb), ContractError);

  std::mt19937_64 rng(4);
  Codebook<double> big;
  big.embeddings = random_tensor({50, 6}, rng);
  for (std::size_t j = 0; j < 50; ++j) {
    const std::span<const double> row(big.embeddings.data.data() + j * 6, 6);
    CHECK(quantize<double>(row, big) == j);
  }
}

TEST_CASE("tokenizer config validation") {
  TokenizerConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.stages() == 3);
  CHECK(c.stage_widths() == std::vector<std::size_t>{32, 64, 8});
  c.resolution = 24;
  CHECK_THROWS_AS(c.validate(), ContractError);
  TokenizerConfig full;
  full.resolution = 256;
  full.schedule = ScaleSchedule{1, 2, 3, 4, 5, 6, 8, 10, 13, 16};
  full.vocab = 4096;
  full.channels = 32;
  CHECK_NOTHROW(full.validate());
  CHECK(full.stages() == 4);
  TokenizerConfig w;
  w.widths = {16};
  CHECK_THROWS_AS(w.validate(), ContractError);
}

TEST_CASE("encoder and decoder shapes") {
  TokenizerModel<double> m(tiny_config());
  const auto x = Var<double>::constant(random_images(3, 8, 1));
  const auto f = m.encode_features(x);
  CHECK(f.shape() == Shape{3, 2, 2, 2});
  CHECK(m.decode_features(f).shape() == Shape{3, 1, 8, 8});
  CHECK_THROWS_AS(m.encode_features(Var<double>::constant(Tensor<double>({1, 1, 4, 4}))), ContractError);
}

TEST_CASE("single exact-match scale leaves zero residual") {
  TokenizerConfig c;
  c.resolution = 8;
  c.schedule = ScaleSchedule{4};
  c.vocab = 16;
  c.channels = 3;
  TokenizerModel<double> m(c);
  const Tensor<double> x = random_images(1, 8, 9);
  const auto f = m.encode_features(Var<double>::constant(x)).value();
  for (std::size_t p = 0; p < 16; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) m.codebook().embeddings.data[p * 3 + ch] = f.data[ch * 16 + p];
  }
  const auto fr = m.forward(x, false);
  REQUIRE(fr.residual_energy.size() == 1);
  CHECK(fr.residual_energy[0] == 0.0);
  std::vector<int> expect(16);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(fr.indices[0] == expect);
}

TEST_CASE("realizable optimum with identity encoder/decoder and beta 0") {
  TokenizerConfig c;
  c.resolution = 2;
  c.schedule = ScaleSchedule{1};
  c.channels = 4;
  c.vocab = 3;
  c.commit_beta = 0.0;
  TokenizerModel<double> m(c);
  auto* ew = m.params().find("enc.0.w");
  auto* dw = m.params().find("dec.0.w");
  std::fill(ew->mutable_value().data.begin(), ew->mutable_value().data.end(), 0.0);
  std::fill(dw->mutable_value().data.begin(), dw->mutable_value().data.end(), 0.0);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t col = 0; col < 2; ++col) {
      const std::size_t ch = 2 * r + col;
      ew->mutable_value().data[((ch * 1) * 4 + (r + 1)) * 4 + (col + 1)] = 1.0;  // [Co, Ci, 4, 4]
      dw->mutable_value().data[((ch * 1) * 4 + (r + 1)) * 4 + (col + 1)] = 1.0;  // [Ci, Co, 4, 4]
    }
  }
  const Tensor<double> x({3, 1, 2, 2}, {0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6, 0.5, 0.5, 0.0, 1.0});
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t p = 0; p < 4; ++p) m.codebook().embeddings.data[b * 4 + p] = x.data[b * 4 + p];
  }
  const auto fr = m.forward(x, true);
  CHECK(fr.loss.value()[0] < 1e-24);
  CHECK(fr.indices[0] == std::vector<int>{0, 1, 2});
}

TEST_CASE("straight-through gradient equals identity-replacement gradient") {
  std::mt19937_64 rng(2);
  const Tensor<double> w = random_tensor({1, 2, 2, 2}, rng);
  const Tensor<double> q = random_tensor({1, 2, 2, 2}, rng);
  const auto downstream = [&](const Var<double>& z) {
    return sum(mul(silu(z), Var<double>::constant(w)));
  };
  auto f = Var<double>::leaf(random_tensor({1, 2, 2, 2}, rng));
  Tensor<double> offset(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i) offset.data[i] = q.data[i] - f.value().data[i];
  backward(downstream(add_constant(f, offset)));
  auto z = Var<double>::leaf(q);
  backward(downstream(z));
  const auto gf = f.grad(), gz = z.grad();
  for (std::size_t i = 0; i < gf.size(); ++i) CHECK(gf[i] == doctest::Approx(gz[i]).epsilon(1e-14));
}

TEST_CASE("tokenizer loss gradients match finite differences of the replayed surrogate") {
  TokenizerModel<double> m(tiny_config());
  perturb_params(m, 5, 0.2);
  const Tensor<double> x = random_images(2, 8, 6);
  QuantizationTrace<double> trace;
  m.forward(x, true, &trace, TraceMode::Record);
  std::vector<Var<double>> leaves;
  for (auto* p : m.params().all()) leaves.push_back(p->var);
  const auto r = gradcheck([&] { return m.forward(x, true, &trace, TraceMode::Replay).loss; }, leaves, 1e-6, 6);
  CHECK(r.checked > 40);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("untrained encode/decode is shape-correct and in range") {
  const auto corpus = small_corpus();
  TokenizerConfig c;
  c.seed = 12;
  TokenizerModel<float> m(c);
  for (const auto& s : std::span(corpus).first(4)) {
    const TokenPyramid p = encode(s, m);
    p.validate(c.schedule, c.vocab);
    const Image img = decode(p, m);
    CHECK(img.height == 32);
    for (double v : img.values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK_THROWS_AS(encode(Slice{16, 16, std::vector<double>(256), {}}, m), ContractError);
}

TEST_CASE("decode determinism and scale sensitivity") {
  TokenizerConfig c;
  c.seed = 4;
  TokenizerModel<float> m(c);
  perturb_params(m, 8, 0.3f);
  TokenPyramid same;
  for (std::size_t k = 0; k < 4; ++k) same.grids.emplace_back(c.schedule.tokens(k), 5);
  const Image a = decode(same, m), b = decode(same, m);
  CHECK(a.values == b.values);

  TokenPyramid p1 = same, p2 = same;
  std::fill(p1.grids[1].begin(), p1.grids[1].end(), 7);
  std::fill(p1.grids[2].begin(), p1.grids[2].end(), 9);
  std::fill(p2.grids[1].begin(), p2.grids[1].end(), 9);
  std::fill(p2.grids[2].begin(), p2.grids[2].end(), 7);
  CHECK(decode(p1, m).values != decode(p2, m).values);

  TokenPyramid bad = same;
  bad.grids[0][0] = 64;
  CHECK_THROWS_AS(decode(bad, m), ContractError);
  bad.grids.pop_back();
  CHECK_THROWS_AS(decode(bad, m), ContractError);
}

TEST_CASE("EMA update matches a direct computation") {
  Codebook<double> cb;
  cb.embeddings = Tensor<double>({2, 1}, {0.0, 10.0});
  cb.ema_counts = Tensor<double>({2}, {1.0, 1.0});
  cb.ema_sums = Tensor<double>({2, 1}, {0.0, 10.0});
  // One scale, one image, 2x2 grid: three cells to code 0, one to code 1.
  const std::vector<std::vector<int>> idx = {{0, 0, 0, 1}};
  const std::vector<Tensor<double>> feats = {Tensor<double>({1, 1, 2, 2}, {1.0, 2.0, 3.0, 8.0})};
  ema_update(cb, idx, feats, 0.5);
  const double n0 = 0.5 * 1 + 0.5 * 3, n1 = 0.5 * 1 + 0.5 * 1;
  const double s0 = 0.5 * 0 + 0.5 * 6, s1 = 0.5 * 10 + 0.5 * 8;
  const double total = n0 + n1, eps = 1e-5;
  CHECK(cb.ema_counts.data[0] == doctest::Approx(n0));
  CHECK(cb.embeddings.data[0] == doctest::Approx(s0 / ((n0 + eps) / (total + 2 * eps) * total)).epsilon(1e-12));
  CHECK(cb.embeddings.data[1] == doctest::Approx(s1 / ((n1 + eps) / (total + 2 * eps) * total)).epsilon(1e-12));

  const Codebook<double> before = cb;
  ema_update(cb, idx, feats, 1.0);
  CHECK(cb.embeddings.data == before.embeddings.data);
  CHECK(cb.ema_counts.data == before.ema_counts.data);
}

TEST_CASE("codebook usage histogram") {
  TokenPyramid one;
  one.grids = {{3}};
  const auto u = usage_from_pyramids({one}, 64);
  CHECK(u.utilization == doctest::Approx(1.0 / 64));
  CHECK(std::count_if(u.histogram.begin(), u.histogram.end(), [](double h) { return h > 0; }) == 1);

  std::mt19937_64 rng(3);
  std::vector<TokenPyramid> many(17);
  for (auto& p : many) {
    for (std::size_t k = 1; k <= 4; ++k) {
      std::vector<int> g(k * k);
      for (auto& v : g) v = static_cast<int>(rng() % 40);
      p.grids.push_back(g);
    }
  }
  const auto u2 = usage_from_pyramids(many, 64);
  CHECK(std::abs(std::accumulate(u2.histogram.begin(), u2.histogram.end(), 0.0) - 1.0) < 1e-12);
  CHECK(u2.utilization <= 40.0 / 64);
  CHECK(usage_heatmap(u2).height == 8);
  CodebookUsage ten;
  ten.histogram.assign(10, 0.1);
  CHECK(usage_heatmap(ten).width == 4);
  CHECK_THROWS_AS(usage_from_pyramids({}, 64), ContractError);
}

TEST_CASE("MVTK round trip is bit-exact") {
  const ScaleSchedule s{1, 2, 3};
  TokenPyramid p;
  p.grids = {{4095}, {0, 1, 2, 300}, {9, 8, 7, 6, 5, 4, 3, 2, 1}};
  const auto bytes = encode_tokens(p, s, 4096);
  CHECK(bytes.size() == 4 + 4 + 4 + 3 * 4 + 4 + 2 * 14);
  CHECK(bytes[0] == 'M');
  CHECK(bytes[3] == 'K');
  // First index (4095) little-endian right after the header.
  CHECK(bytes[28] == 0xFF);
  CHECK(bytes[29] == 0x0F);
  ScaleSchedule s2;
  std::size_t v = 0;
  const TokenPyramid back = decode_tokens(bytes, &s2, &v);
  CHECK(back == p);
  CHECK(s2 == s);
  CHECK(v == 4096);
  CHECK(encode_tokens(back, s2, v) == bytes);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tokens(bad), ContractError);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(decode_tokens(bad), ContractError);
}

TEST_CASE("tokenizer checkpoint round trip and exact resume") {
  const auto corpus = small_corpus();
  TokenizerConfig c;
  c.seed = 21;
  c.dead_code_after = 2;
  OptimizerConfig opt;
  opt.peak_lr = 2e-3;
  opt.total_steps = 6;
  TokenizerTrainConfig tc;
  tc.steps = 6;
  tc.batch = 4;
  tc.log_every = 0;

  TokenizerModel<float> straight(c);
  TokenizerTrainState s1;
  train_tokenizer(straight, corpus, opt, tc, s1);

  TokenizerModel<float> first(c);
  TokenizerTrainState s2;
  TokenizerTrainConfig half = tc;
  half.steps = 3;
  train_tokenizer(first, corpus, opt, half, s2);
  const auto bytes = encode_checkpoint(tokenizer_checkpoint(first, &s2));
  TokenizerTrainState s3;
  TokenizerModel<float> resumed = tokenizer_from_checkpoint(decode_checkpoint(bytes), &s3);
  CHECK(s3.step == 3);
  train_tokenizer(resumed, corpus, opt, tc, s3);

  CHECK(s3.loss_curve == s1.loss_curve);
  CHECK(s3.dead_code_resets == s1.dead_code_resets);
  const auto pa = straight.params().all(), pb = resumed.params().all();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value().data == pb[i]->value().data);
  CHECK(straight.codebook().embeddings.data == resumed.codebook().embeddings.data);

  const auto plain = tokenizer_from_checkpoint(decode_checkpoint(encode_checkpoint(tokenizer_checkpoint(straight))));
  CHECK(plain.codebook().embeddings.data == straight.codebook().embeddings.data);
  TokenizerTrainState none;
  CHECK_THROWS_AS(tokenizer_from_checkpoint(decode_checkpoint(encode_checkpoint(tokenizer_checkpoint(straight))), &none),
                  ContractError);
}

TEST_CASE("short training lowers held-out loss") {
  const Corpus corpus = build_corpus(default_specs(4), 20, 32, SplitFractions{}, 12, 1);
  TokenizerConfig c;
  c.seed = 2;
  TokenizerModel<float> m(c);
  OptimizerConfig opt;
  opt.peak_lr = 2e-3;
  opt.total_steps = 40;
  TokenizerTrainConfig tc;
  tc.steps = 40;
  tc.batch = 8;
  tc.log_every = 0;
  const auto heldout_loss = [&] {
    std::vector<const Slice*> ptrs;
    for (const auto& s : corpus.test) ptrs.push_back(&s);
    return m.forward(slices_to_tensor<float>(ptrs, 32), false).recon_loss.value()[0];
  };
  TokenizerTrainState st;
  // The first step initializes the codebook from data; compare from there.
  tokenizer_train_step(m, corpus.train, opt, tc, st);
  const float before = heldout_loss();
  train_tokenizer(m, corpus.train, opt, tc, st);
  CHECK(heldout_loss() < before);
  CHECK(st.loss_curve.size() == 40);
}

TEST_CASE("checkpoint format basics") {
  Checkpoint ck;
  ck.kind = "test";
  ck.add("a", {2, 2}, {1.f, -2.f, 3.5f, 0.f});
  const auto bytes = encode_checkpoint(ck);
  CHECK(std::string(bytes.begin(), bytes.begin() + 6) == "MVCKPT");
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.section("a").data == ck.section("a").data);
  CHECK(back.section("a").shape == Shape{2, 2});
  CHECK_THROWS_AS(back.section("b"), ContractError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated), ContractError);
  CHECK_THROWS_AS(ck.add("a", {1}, {1.f}), ContractError);
}
