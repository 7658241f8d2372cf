#include <doctest.h>

#include <cmath>
#include <random>

#include "nextscale/error.hpp"
#include "nextscale/ops.hpp"
#include "nextscale/prior.hpp"
#include "support/gradcheck.hpp"

using namespace nextscale;
using nextscale::testing::gradcheck;
using nextscale::testing::random_tensor;

namespace {

PriorConfig small_config(std::size_t depth = 2, std::size_t width = 16) {
  PriorConfig c;
  c.depth = depth;
  c.width = width;
  c.heads = 2;
  c.vocab = 8;
  c.schedule = ScaleSchedule{1, 2, 3};
  c.num_labels = 3;
  c.channels = 3;
  c.seed = 5;
  return c;
}

template <class T>
PriorModel<T> random_model(const PriorConfig& c, unsigned seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> cb = random_tensor({c.vocab, c.channels}, rng);
  PriorModel<T> m(c, cb.cast<T>());
  // Zero-initialized modulation and head would hide most of the network.
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto* p : m.params().all()) {
    for (auto& v : p->mutable_value().data) v += static_cast<T>(n(rng));
  }
  return m;
}

TokenPyramid random_pyramid(const ScaleSchedule& s, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
  TokenPyramid p;
  for (std::size_t k = 0; k < s.scales(); ++k) {
    std::vector<int> g(s.tokens(k));
    for (auto& v : g) v = d(rng);
    p.grids.push_back(std::move(g));
  }
  return p;
}

}  // namespace

TEST_CASE("block-causal mask") {
  const auto m12 = build_mask(ScaleSchedule{1, 2});
  CHECK(m12.length == 5);
  CHECK(m12.allowed_pairs() == 21);
  const auto m1 = build_mask(ScaleSchedule{1});
  CHECK(m1.length == 1);
  CHECK(m1.at(0, 0));

  const ScaleSchedule s{1, 2, 3, 4};
  const auto m = build_mask(s);
  // Oracle: scale of each position by walking the grids.
  std::vector<std::size_t> scale_of;
  for (std::size_t k = 0; k < s.scales(); ++k) scale_of.insert(scale_of.end(), s.tokens(k), k);
  REQUIRE(m.length == scale_of.size());
  for (std::size_t i = 0; i < m.length; ++i) {
    CHECK(m.at(i, i));
    for (std::size_t j = 0; j < m.length; ++j) {
      CHECK(m.at(i, j) == (scale_of[j] <= scale_of[i]));
      for (std::size_t l = 0; l < m.length; ++l) {
        if (m.at(i, j) && m.at(j, l)) CHECK(m.at(i, l));
      }
    }
  }
  const auto prefix = build_mask(s, 2);
  CHECK(prefix.length == 5);
  CHECK(prefix.allowed_pairs() == 21);
  CHECK_THROWS_AS(build_mask(s, 5), ContractError);
}

TEST_CASE("qk normalization") {
  const auto v = qk_normalize(std::vector<double>{3, 4}, 2);
  CHECK(v[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(v[1] == doctest::Approx(0.8).epsilon(1e-15));
  const auto u = qk_normalize(std::vector<double>{0.6, 0.8, 0, 0}, 2);
  CHECK(u[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(u[2] == 0.0);
  CHECK(u[3] == 0.0);

  std::mt19937_64 rng(3);
  const auto raw = random_tensor({40, 6}, rng);
  const auto n = qk_normalize(raw.data, 6);
  for (std::size_t a = 0; a < 40; ++a) {
    for (std::size_t b = 0; b < 40; ++b) {
      double dot = 0;
      for (std::size_t j = 0; j < 6; ++j) dot += n[a * 6 + j] * n[b * 6 + j];
      CHECK(std::abs(dot) <= 1.0 + 1e-12);
    }
  }
  CHECK_THROWS_AS(qk_normalize(std::vector<double>{1, 2, 3}, 2), ContractError);
}

TEST_CASE("prior config validation") {
  PriorConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.null_label() == 4);
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ContractError);
  PriorConfig d;
  d.cond_dropout = 1.5;
  CHECK_THROWS_AS(d.validate(), ContractError);
  CHECK_THROWS_AS(PriorModel<float>(PriorConfig{}, Tensor<float>({3, 8})), ContractError);
}

TEST_CASE("input embedding lengths and condition rows") {
  const auto c = small_config();
  const auto m = random_model<double>(c, 1);
  std::mt19937_64 rng(2);
  const TokenPyramid pyr = random_pyramid(c.schedule, c.vocab, rng);
  const std::vector<TokenPyramid> one{pyr};
  const std::vector<int> l0{0}, l1{1};
  CHECK(m.embed_inputs(one, l0, 1).shape() == Shape{1, 1, 16});
  CHECK(m.embed_inputs(one, l0, 2).shape() == Shape{1, 5, 16});
  CHECK(m.embed_inputs(one, l0, 3).shape() == Shape{1, 14, 16});
  const TokenPyramid empty;
  CHECK(m.embed_inputs(std::vector<TokenPyramid>{empty}, l0, 1).shape() == Shape{1, 1, 16});
  CHECK_THROWS_AS((void)m.embed_inputs(std::vector<TokenPyramid>{empty}, l0, 2), ContractError);

  const auto a = m.embed_inputs(one, l0, 3).value();
  const auto b = m.embed_inputs(one, l1, 3).value();
  bool differs = false;
  for (std::size_t j = 0; j < 16; ++j) differs |= a.data[j] != b.data[j];
  CHECK(differs);
  // Later positions depend on tokens only.
  for (std::size_t j = 16; j < a.size(); ++j) CHECK(a.data[j] == b.data[j]);

  CHECK_THROWS_AS((void)m.embed_inputs(one, std::vector<int>{4}, 1), ContractError);
  CHECK_THROWS_AS((void)m.embed_inputs(one, std::vector<int>{-1}, 1), ContractError);
  CHECK_NOTHROW((void)m.embed_inputs(one, std::vector<int>{3}, 1));  // null row
}

TEST_CASE("logits at scale k ignore grids k and later") {
  const auto c = small_config();
  const auto m = random_model<double>(c, 7);
  std::mt19937_64 rng(8);
  const std::size_t K = c.schedule.scales();
  for (int trial = 0; trial < 5; ++trial) {
    const TokenPyramid base = random_pyramid(c.schedule, c.vocab, rng);
    const int label = trial % 4;
    const auto ref = m.forward(std::vector<TokenPyramid>{base}, std::vector<int>{label}, K).value();
    for (std::size_t k = 0; k < K; ++k) {
      TokenPyramid pert = base;
      const TokenPyramid noise = random_pyramid(c.schedule, c.vocab, rng);
      for (std::size_t j = k; j < K; ++j) pert.grids[j] = noise.grids[j];
      const auto out = m.forward(std::vector<TokenPyramid>{pert}, std::vector<int>{label}, K).value();
      const std::size_t end = c.schedule.offset(k + 1) * c.vocab;
      for (std::size_t i = 0; i < end; ++i) REQUIRE(out.data[i] == ref.data[i]);
    }
  }
  // Grid 0 does reach scale 1.
  TokenPyramid a = random_pyramid(c.schedule, c.vocab, rng), b = a;
  b.grids[0][0] = (a.grids[0][0] + 1) % static_cast<int>(c.vocab);
  const auto la = m.forward(std::vector<TokenPyramid>{a}, std::vector<int>{0}, K).value();
  const auto lb = m.forward(std::vector<TokenPyramid>{b}, std::vector<int>{0}, K).value();
  double diff = 0;
  for (std::size_t i = c.schedule.offset(1) * c.vocab; i < c.schedule.offset(2) * c.vocab; ++i) {
    diff += std::abs(la.data[i] - lb.data[i]);
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("joint log-probability factorizes over scales") {
  const auto c = small_config();
  const auto m = random_model<double>(c, 11);
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 6; ++trial) {
    const TokenPyramid p = random_pyramid(c.schedule, c.vocab, rng);
    const int label = trial % 4;
    const double joint = joint_logprob(m, p, label);
    double parts = 0;
    for (std::size_t k = 0; k < c.schedule.scales(); ++k) {
      const double lp = scale_logprob(m, p, label, k);
      CHECK(std::exp(lp) <= 1.0);
      parts += lp;
    }
    CHECK(std::abs(joint - parts) <= 1e-9 * std::abs(joint));
  }

  // One factor: log softmax of the single logit row.
  PriorConfig one = small_config(1, 8);
  one.schedule = ScaleSchedule{1};
  const auto m1 = random_model<double>(one, 13);
  const TokenPyramid p{{{5}}};
  const auto row = m1.forward(std::vector<TokenPyramid>{p}, std::vector<int>{2}, 1).value();
  double mx = row.data[0];
  for (double v : row.data) mx = std::max(mx, v);
  double z = 0;
  for (double v : row.data) z += std::exp(v - mx);
  double total = 0;
  for (double v : row.data) total += std::exp(v - mx) / z;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(joint_logprob(m1, p, 2) == doctest::Approx(row.data[5] - mx - std::log(z)).epsilon(1e-12));
}

TEST_CASE("untrained prior predicts uniformly") {
  PriorConfig c;
  std::mt19937_64 rng(1);
  PriorModel<float> m(c, random_tensor({c.vocab, c.channels}, rng).cast<float>());
  std::vector<TokenPyramid> pyrs;
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) {
    pyrs.push_back(random_pyramid(c.schedule, c.vocab, rng));
    labels.push_back(i % 4);
  }
  const double lnv = std::log(64.0);
  CHECK(std::abs(m.loss(pyrs, labels).value()[0] - lnv) <= 0.05 * lnv);
  CHECK(prior_eval_loss(m, pyrs, labels) == doctest::Approx(lnv).epsilon(1e-6));
}

TEST_CASE("prior loss gradients match finite differences") {
  const auto c = small_config(1, 8);
  auto m = random_model<double>(c, 21);
  std::mt19937_64 rng(22);
  const std::vector<TokenPyramid> pyrs{random_pyramid(c.schedule, c.vocab, rng),
                                       random_pyramid(c.schedule, c.vocab, rng)};
  const std::vector<int> labels{0, 3};
  std::vector<Var<double>> leaves;
  for (auto* p : m.params().all()) leaves.push_back(p->var);
  const auto r = gradcheck([&] { return m.loss(pyrs, labels); }, leaves, 1e-5, 10);
  CHECK(r.checked >= 200);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("null-condition dropout") {
  const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3};
  CHECK(dropout_labels(labels, 0.0, 4, 9, 0) == labels);
  for (int v : dropout_labels(labels, 1.0, 4, 9, 0)) CHECK(v == 4);
  CHECK(dropout_labels(labels, 0.5, 4, 9, 3) == dropout_labels(labels, 0.5, 4, 9, 3));

  std::size_t dropped = 0, total = 0;
  std::vector<int> many(64, 1);
  for (long step = 0; step < 200; ++step) {
    for (int v : dropout_labels(many, 0.1, 4, 1, step)) dropped += v == 4;
    total += many.size();
  }
  CHECK(static_cast<double>(dropped) / static_cast<double>(total) == doctest::Approx(0.1).epsilon(0.1));
}

TEST_CASE("cond_dropout 1 leaves real condition rows untouched") {
  PriorConfig c = small_config(1, 8);
  c.cond_dropout = 1.0;
  auto m = random_model<float>(c, 31);
  std::mt19937_64 rng(32);
  std::vector<TokenPyramid> pyrs;
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) {
    pyrs.push_back(random_pyramid(c.schedule, c.vocab, rng));
    labels.push_back(i % 3);
  }
  const auto before = m.params().find("cond")->value();
  OptimizerConfig opt;
  opt.weight_decay = 0.0;
  opt.total_steps = 3;
  PriorTrainConfig tc;
  tc.steps = 3;
  tc.batch = 4;
  PriorTrainState st;
  train_prior(m, pyrs, labels, opt, tc, st);
  const auto& after = m.params().find("cond")->value();
  const std::size_t D = c.width;
  for (std::size_t i = 0; i < 3 * D; ++i) CHECK(after.data[i] == before.data[i]);
  bool null_moved = false;
  for (std::size_t i = 3 * D; i < 4 * D; ++i) null_moved |= after.data[i] != before.data[i];
  CHECK(null_moved);
}

TEST_CASE("out-of-range tokens are rejected") {
  const auto c = small_config(1, 8);
  auto m = random_model<float>(c, 41);
  std::mt19937_64 rng(42);
  std::vector<TokenPyramid> pyrs{random_pyramid(c.schedule, c.vocab, rng)};
  pyrs[0].grids[2][0] = 8;
  const std::vector<int> labels{0};
  CHECK_THROWS_AS((void)m.loss(pyrs, labels), ContractError);
  PriorTrainState st;
  CHECK_THROWS_AS(train_prior(m, pyrs, labels, OptimizerConfig{}, PriorTrainConfig{}, st), ContractError);
  CHECK(st.step == 0);
  pyrs[0].grids[2][0] = 0;
  CHECK_THROWS_AS(train_prior(m, pyrs, std::vector<int>{3}, OptimizerConfig{}, PriorTrainConfig{}, st),
                  ContractError);
}

TEST_CASE("prior training reduces the loss and resumes exactly") {
  PriorConfig c = small_config(2, 16);
  std::mt19937_64 rng(51);
  const Tensor<float> cb = random_tensor({c.vocab, c.channels}, rng).cast<float>();
  // Label-dependent token statistics so there is something to learn.
  std::vector<TokenPyramid> pyrs;
  std::vector<int> labels;
  for (int i = 0; i < 48; ++i) {
    TokenPyramid p = random_pyramid(c.schedule, c.vocab, rng);
    const int label = i % 3;
    for (auto& g : p.grids) {
      for (std::size_t j = 0; j < g.size(); j += 2) g[j] = label + static_cast<int>(j % 2);
    }
    pyrs.push_back(std::move(p));
    labels.push_back(label);
  }
  OptimizerConfig opt;
  opt.peak_lr = 3e-3;
  opt.total_steps = 60;
  PriorTrainConfig tc;
  tc.steps = 60;
  tc.batch = 8;

  PriorModel<float> straight(c, cb);
  PriorTrainState s1;
  train_prior(straight, pyrs, labels, opt, tc, s1);
  REQUIRE(s1.loss_curve.size() == 60);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += s1.loss_curve[static_cast<std::size_t>(i)];
    tail += s1.loss_curve[static_cast<std::size_t>(50 + i)];
  }
  CHECK(tail < head - 1.0);

  PriorModel<float> first(c, cb);
  PriorTrainState s2;
  PriorTrainConfig half = tc;
  half.steps = 25;
  train_prior(first, pyrs, labels, opt, half, s2);
  const auto bytes = encode_checkpoint(prior_checkpoint(first, &s2));
  PriorTrainState s3;
  auto resumed = prior_from_checkpoint(decode_checkpoint(bytes), &s3);
  CHECK(s3.step == 25);
  train_prior(resumed, pyrs, labels, opt, tc, s3);
  CHECK(s3.loss_curve == s1.loss_curve);
  for (auto* p : straight.params().all()) {
    CHECK(resumed.params().find(p->name)->value().data == p->value().data);
  }
  CHECK(resumed.codebook().data == cb.data);

  const auto frozen = prior_from_checkpoint(decode_checkpoint(encode_checkpoint(prior_checkpoint(straight))));
  PriorTrainState none;
  CHECK_THROWS_AS(prior_from_checkpoint(decode_checkpoint(encode_checkpoint(prior_checkpoint(straight))), &none),
                  ContractError);
  CHECK(joint_logprob(frozen, pyrs[0], 0) == joint_logprob(straight, pyrs[0], 0));
  Checkpoint wrong;
  wrong.kind = "tokenizer";
  CHECK_THROWS_AS(prior_from_checkpoint(wrong), ContractError);
}
