#include "nextscale/prior.hpp"

#include <algorithm>
#include <cmath>

#include "config_json.hpp"
#include "nextscale/error.hpp"
#include "nextscale/ops.hpp"
#include "nextscale/rng.hpp"
#include "nextscale/tokenizer.hpp"

namespace nextscale {

void PriorConfig::validate() const {
  require(depth >= 1, "prior: depth must be positive");
  require(width >= 1 && heads >= 1 && width % heads == 0, "prior: width must be a positive multiple of heads");
  require(vocab >= 1, "prior: vocab must be positive");
  require(schedule.scales() >= 1, "prior: empty schedule");
  require(num_labels >= 1, "prior: need at least one label");
  require(channels >= 1, "prior: channels must be positive");
  require(mlp_ratio >= 1, "prior: mlp_ratio must be positive");
  require(cond_dropout >= 0.0 && cond_dropout <= 1.0, "prior: cond_dropout must be in [0, 1]");
}

std::size_t BlockCausalMask::allowed_pairs() const {
  return static_cast<std::size_t>(std::count_if(allow.begin(), allow.end(), [](std::uint8_t a) { return a != 0; }));
}

BlockCausalMask build_mask(const ScaleSchedule& schedule, std::size_t scales) {
  if (scales == 0) scales = schedule.scales();
  require(scales <= schedule.scales(), "build_mask: more scales than the schedule holds");
  BlockCausalMask m;
  m.length = schedule.offset(scales);
  m.allow.assign(m.length * m.length, 0);
  for (std::size_t i = 0; i < m.length; ++i) {
    // scale(j) <= scale(i) is exactly j < offset(scale(i) + 1).
    const std::size_t end = schedule.offset(schedule.scale_of(i) + 1);
    std::fill_n(m.allow.begin() + static_cast<std::ptrdiff_t>(i * m.length), end, std::uint8_t{1});
  }
  return m;
}

std::vector<double> qk_normalize(std::span<const double> values, std::size_t d) {
  require(d >= 1 && values.size() % d == 0, "qk_normalize: length is not a multiple of the head width");
  const auto v = Var<double>::constant(
      Tensor<double>({values.size() / d, d}, std::vector<double>(values.begin(), values.end())));
  return l2_normalize(v).value().data;
}

namespace {

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, SplitMixStream& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(stddev * rng.normal());
  return t;
}

}  // namespace

template <class T>
PriorModel<T>::PriorModel(PriorConfig config, Tensor<T> codebook)
    : config_(std::move(config)), codebook_(std::move(codebook)) {
  config_.validate();
  require(codebook_.shape == Shape{config_.vocab, config_.channels},
          "prior: codebook shape " + shape_str(codebook_.shape) + " does not match vocab x channels");
  const std::size_t D = config_.width, C = config_.channels, V = config_.vocab, F = D * config_.mlp_ratio;
  const std::size_t L = config_.schedule.token_count(), K = config_.schedule.scales();
  SplitMixStream rng(derive_seed(config_.seed, {0x7072696F72ULL}));
  const double wd = 1.0 / std::sqrt(static_cast<double>(D));
  params_.add("cond", normal_init<T>({config_.num_labels + 1, D}, 1.0, rng), true);
  params_.add("in.w", normal_init<T>({C, D}, 1.0 / std::sqrt(static_cast<double>(C)), rng), true);
  params_.add("in.b", Tensor<T>({D}), false);
  params_.add("pos", normal_init<T>({L, D}, 0.5, rng), true);
  params_.add("level", normal_init<T>({K, D}, 0.5, rng), true);
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string b = "blk." + std::to_string(i) + ".";
    params_.add(b + "ada.w", Tensor<T>({D, 6 * D}), true);
    params_.add(b + "ada.b", Tensor<T>({6 * D}), false);
    for (const char* name : {"q", "k", "v"}) {
      params_.add(b + name + ".w", normal_init<T>({D, D}, wd, rng), true);
      params_.add(b + name + ".b", Tensor<T>({D}), false);
    }
    params_.add(b + "temp", Tensor<T>({config_.heads}), false);  // log temperature, exp(0) = 1
    params_.add(b + "proj.w", normal_init<T>({D, D}, wd, rng), true);
    params_.add(b + "proj.b", Tensor<T>({D}), false);
    params_.add(b + "fc1.w", normal_init<T>({D, F}, wd, rng), true);
    params_.add(b + "fc1.b", Tensor<T>({F}), false);
    params_.add(b + "fc2.w", normal_init<T>({F, D}, 1.0 / std::sqrt(static_cast<double>(F)), rng), true);
    params_.add(b + "fc2.b", Tensor<T>({D}), false);
  }
  params_.add("head.ada.w", Tensor<T>({D, 2 * D}), true);
  params_.add("head.ada.b", Tensor<T>({2 * D}), false);
  params_.add("head.w", Tensor<T>({D, V}), true);
  params_.add("head.b", Tensor<T>({V}), false);
}

template <class T>
const Var<T>& PriorModel<T>::p(const std::string& name) const {
  const auto* param = params_.find(name);
  require(param != nullptr, "prior: no parameter " + name);
  return param->var;
}

template <class T>
Var<T> PriorModel<T>::embed_inputs(std::span<const TokenPyramid> prefixes, std::span<const int> labels,
                                   std::size_t scales) const {
  const auto& sched = config_.schedule;
  const std::size_t B = prefixes.size(), D = config_.width, C = config_.channels;
  require(B >= 1 && labels.size() == B, "prior: need one label per pyramid");
  require(scales >= 1 && scales <= sched.scales(), "prior: scale count outside the schedule");
  for (int c : labels) {
    require(c >= 0 && c <= config_.null_label(),
            "prior: condition " + std::to_string(c) + " outside [0, " + std::to_string(config_.null_label()) + "]");
  }
  for (const auto& pyr : prefixes) {
    require(pyr.grids.size() + 1 >= scales, "prior: prefix is missing grids");
    for (std::size_t k = 0; k + 1 < scales; ++k) {
      require(pyr.grids[k].size() == sched.tokens(k), "prior: prefix grid " + std::to_string(k) +
                                                          " does not match the schedule");
      for (int v : pyr.grids[k]) {
        require(v >= 0 && static_cast<std::size_t>(v) < config_.vocab,
                "prior: token index " + std::to_string(v) + " outside the vocabulary");
      }
    }
  }

  const Var<T> cond = embedding(p("cond"), std::vector<int>(labels.begin(), labels.end()));
  std::vector<Var<T>> parts;
  parts.push_back(mul_rows(Var<T>::constant(Tensor<T>({B, sched.tokens(0), D}, T(1))), cond));
  for (std::size_t k = 1; k < scales; ++k) {
    const std::size_t prev = sched.size(k - 1), n = sched.size(k);
    Tensor<T> z({B, C, prev, prev});
    for (std::size_t b = 0; b < B; ++b) {
      const auto& g = prefixes[b].grids[k - 1];
      for (std::size_t pos = 0; pos < g.size(); ++pos) {
        const T* e = codebook_.data.data() + static_cast<std::size_t>(g[pos]) * C;
        for (std::size_t c = 0; c < C; ++c) z.data[(b * C + c) * prev * prev + pos] = e[c];
      }
    }
    const Tensor<T> up = resize_bilinear(Var<T>::constant(std::move(z)), n, n).value();
    Tensor<T> seq({B, n * n, C});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t pos = 0; pos < n * n; ++pos) {
          seq.data[(b * n * n + pos) * C + c] = up.data[(b * C + c) * n * n + pos];
        }
      }
    }
    parts.push_back(linear(Var<T>::constant(std::move(seq)), p("in.w"), p("in.b")));
  }
  const std::size_t L = sched.offset(scales);
  std::vector<int> level(L);
  for (std::size_t i = 0; i < L; ++i) level[i] = static_cast<int>(sched.scale_of(i));
  const Var<T> where = add(slice_rows(p("pos"), 0, L), embedding(p("level"), level));
  return add_broadcast(parts.size() == 1 ? parts[0] : concat_seq(parts), where);
}

template <class T>
Var<T> PriorModel<T>::forward(std::span<const TokenPyramid> prefixes, std::span<const int> labels,
                              std::size_t scales) const {
  Var<T> x = embed_inputs(prefixes, labels, scales);
  const std::size_t B = prefixes.size(), L = x.shape()[1], D = config_.width, H = config_.heads, dh = D / H;
  const BlockCausalMask mask = build_mask(config_.schedule, scales);
  const Var<T> cond = silu(embedding(p("cond"), std::vector<int>(labels.begin(), labels.end())));
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string b = "blk." + std::to_string(i) + ".";
    const Var<T> ada = linear(cond, p(b + "ada.w"), p(b + "ada.b"));
    Var<T> h = modulate(layer_norm(x), chunk(ada, 0, 6), chunk(ada, 1, 6));
    const Var<T> q = l2_normalize(split_heads(linear(h, p(b + "q.w"), p(b + "q.b")), H));
    const Var<T> k = l2_normalize(split_heads(linear(h, p(b + "k.w"), p(b + "k.b")), H));
    const Var<T> v = split_heads(linear(h, p(b + "v.w"), p(b + "v.b")), H);
    Var<T> scores = bmm(reshape(q, {B * H, L, dh}), reshape(k, {B * H, L, dh}), false, true);
    scores = scale_heads(reshape(scores, {B, H, L, L}), exp(p(b + "temp")));
    const Var<T> att = masked_softmax(scores, mask.allow);
    const Var<T> o = merge_heads(reshape(bmm(reshape(att, {B * H, L, L}), reshape(v, {B * H, L, dh}), false, false),
                                         {B, H, L, dh}));
    x = add(x, mul_rows(linear(o, p(b + "proj.w"), p(b + "proj.b")), chunk(ada, 2, 6)));
    h = modulate(layer_norm(x), chunk(ada, 3, 6), chunk(ada, 4, 6));
    h = linear(gelu(linear(h, p(b + "fc1.w"), p(b + "fc1.b"))), p(b + "fc2.w"), p(b + "fc2.b"));
    x = add(x, mul_rows(h, chunk(ada, 5, 6)));
  }
  const Var<T> ada = linear(cond, p("head.ada.w"), p("head.ada.b"));
  x = modulate(layer_norm(x), chunk(ada, 0, 2), chunk(ada, 1, 2));
  return linear(x, p("head.w"), p("head.b"));
}

template <class T>
Var<T> PriorModel<T>::loss(std::span<const TokenPyramid> pyramids, std::span<const int> labels) const {
  const auto& sched = config_.schedule;
  std::vector<int> targets;
  for (const auto& pyr : pyramids) {
    pyr.validate(sched, config_.vocab);
    const auto flat = pyr.flatten();
    targets.insert(targets.end(), flat.begin(), flat.end());
  }
  const Var<T> logits = forward(pyramids, labels, sched.scales());
  const std::size_t rows = targets.size();
  return scale(cross_entropy_sum(reshape(logits, {rows, config_.vocab}), targets), T(1) / static_cast<T>(rows));
}

template class PriorModel<float>;
template class PriorModel<double>;

namespace {

// Sum of log-softmax(row)[target] for rows [begin, end) of [L, V] logits.
template <class T>
double logprob_rows(const Tensor<T>& logits, const std::vector<int>& targets, std::size_t begin, std::size_t end) {
  const std::size_t V = logits.shape.back();
  double total = 0.0;
  for (std::size_t r = begin; r < end; ++r) {
    const T* z = logits.data.data() + r * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
    total += static_cast<double>(z[static_cast<std::size_t>(targets[r])]) - mx - std::log(s);
  }
  return total;
}

}  // namespace

template <class T>
double joint_logprob(const PriorModel<T>& model, const TokenPyramid& pyramid, int label) {
  const auto& sched = model.config().schedule;
  pyramid.validate(sched, model.config().vocab);
  const Tensor<T> logits = model.forward(std::span(&pyramid, 1), std::span(&label, 1), sched.scales()).value();
  return logprob_rows(logits, pyramid.flatten(), 0, sched.token_count());
}

template <class T>
double scale_logprob(const PriorModel<T>& model, const TokenPyramid& pyramid, int label, std::size_t k) {
  const auto& sched = model.config().schedule;
  pyramid.validate(sched, model.config().vocab);
  require(k < sched.scales(), "scale_logprob: scale outside the schedule");
  const Tensor<T> logits = model.forward(std::span(&pyramid, 1), std::span(&label, 1), k + 1).value();
  return logprob_rows(logits, pyramid.flatten(), sched.offset(k), sched.offset(k + 1));
}

template double joint_logprob<float>(const PriorModel<float>&, const TokenPyramid&, int);
template double joint_logprob<double>(const PriorModel<double>&, const TokenPyramid&, int);
template double scale_logprob<float>(const PriorModel<float>&, const TokenPyramid&, int, std::size_t);
template double scale_logprob<double>(const PriorModel<double>&, const TokenPyramid&, int, std::size_t);

double prior_eval_loss(const PriorModel<float>& model, std::span<const TokenPyramid> pyramids,
                       std::span<const int> labels, std::size_t chunk) {
  require(!pyramids.empty() && pyramids.size() == labels.size(), "prior_eval_loss: need one label per pyramid");
  require(chunk >= 1, "prior_eval_loss: chunk must be positive");
  const auto& sched = model.config().schedule;
  const std::size_t L = sched.token_count();
  double total = 0.0;
  for (std::size_t start = 0; start < pyramids.size(); start += chunk) {
    const std::size_t n = std::min(chunk, pyramids.size() - start);
    const Tensor<float> logits = model.forward(pyramids.subspan(start, n), labels.subspan(start, n), sched.scales()).value();
    std::vector<int> targets;
    for (std::size_t b = 0; b < n; ++b) {
      pyramids[start + b].validate(sched, model.config().vocab);
      const auto flat = pyramids[start + b].flatten();
      targets.insert(targets.end(), flat.begin(), flat.end());
    }
    total -= logprob_rows(logits, targets, 0, n * L);
  }
  return total / static_cast<double>(pyramids.size() * L);
}

std::vector<int> dropout_labels(std::span<const int> labels, double p, int null_label, std::uint64_t seed,
                                long step) {
  std::vector<int> out(labels.begin(), labels.end());
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (keyed_uniform(seed, {static_cast<std::uint64_t>(step), j, 0x6E756C6CULL}) < p) out[j] = null_label;
  }
  return out;
}

PriorProgress prior_train_step(PriorModel<float>& model, std::span<const TokenPyramid> tokens,
                               std::span<const int> labels, const OptimizerConfig& opt,
                               const PriorTrainConfig& cfg, PriorTrainState& state) {
  require(!tokens.empty() && tokens.size() == labels.size(), "train_prior: need one label per pyramid");
  require(cfg.batch >= 1, "train_prior: batch must be positive");
  std::vector<TokenPyramid> batch;
  std::vector<int> batch_labels;
  for (std::size_t i : batch_indices(cfg.seed, state.step, cfg.batch, tokens.size())) {
    batch.push_back(tokens[i]);
    batch_labels.push_back(labels[i]);
  }
  const auto& pc = model.config();
  for (int c : batch_labels) {
    require(c >= 0 && c < pc.null_label(), "train_prior: label " + std::to_string(c) + " is not a real label");
  }
  batch_labels = dropout_labels(batch_labels, pc.cond_dropout, pc.null_label(), cfg.seed, state.step);

  auto params = model.params().all();
  model.params().zero_grad();
  double loss = 0.0;
  try {
    loss = backward(model.loss(batch, batch_labels));
  } catch (const NumericError& e) {
    throw NumericError("prior training diverged at step " + std::to_string(state.step) + ": " + e.what());
  }
  if (!std::isfinite(loss)) {
    throw NumericError("prior training diverged at step " + std::to_string(state.step));
  }
  clip_grad_norm<float>(params, opt.grad_clip_norm);
  const double lr = lr_at(state.step, opt);
  for (auto* prm : params) adamw_update(*prm, lr, opt);
  PriorProgress progress{state.step, loss, lr};
  state.loss_curve.push_back(loss);
  ++state.step;
  return progress;
}

void train_prior(PriorModel<float>& model, std::span<const TokenPyramid> tokens, std::span<const int> labels,
                 const OptimizerConfig& opt, const PriorTrainConfig& cfg, PriorTrainState& state,
                 const std::function<bool(const PriorProgress&)>& on_progress) {
  opt.validate();
  for (const auto& t : tokens) t.validate(model.config().schedule, model.config().vocab);
  while (state.step < cfg.steps) {
    const PriorProgress pr = prior_train_step(model, tokens, labels, opt, cfg, state);
    const bool report = (cfg.log_every > 0 && state.step % cfg.log_every == 0) || state.step == cfg.steps;
    if (report && on_progress && !on_progress(pr)) {
      return;
    }
  }
}

Checkpoint prior_checkpoint(const PriorModel<float>& model, const PriorTrainState* state) {
  Checkpoint ckpt;
  ckpt.kind = "prior";
  ckpt.config_json = detail::to_json(model.config()).dump();
  detail::ojson meta = detail::ojson::object();
  detail::ojson adam_steps = detail::ojson::object();
  for (const auto* prm : model.params().all()) {
    ckpt.add("param/" + prm->name, prm->value());
    if (state) {
      ckpt.add("adam_m/" + prm->name, prm->m);
      ckpt.add("adam_v/" + prm->name, prm->v);
      adam_steps[prm->name] = prm->step;
    }
  }
  ckpt.add("frozen/codebook", model.codebook());
  if (state) {
    meta["step"] = state->step;
    meta["loss_curve"] = state->loss_curve;
    meta["adam_steps"] = adam_steps;
  }
  ckpt.metadata_json = meta.dump();
  return ckpt;
}

PriorModel<float> prior_from_checkpoint(const Checkpoint& ckpt, PriorTrainState* state) {
  require(ckpt.kind == "prior", "checkpoint: expected a prior checkpoint, found '" + ckpt.kind + "'");
  PriorConfig cfg;
  detail::from_json(detail::ojson::parse(ckpt.config_json), cfg);
  Tensor<float> codebook({cfg.vocab, cfg.channels});
  ckpt.load_into("frozen/codebook", codebook);
  PriorModel<float> model(cfg, std::move(codebook));
  for (auto* prm : model.params().all()) ckpt.load_into("param/" + prm->name, prm->mutable_value());
  if (state) {
    const auto meta = detail::ojson::parse(ckpt.metadata_json);
    require(meta.contains("step"), "checkpoint: no training state stored");
    for (auto* prm : model.params().all()) {
      ckpt.load_into("adam_m/" + prm->name, prm->m);
      ckpt.load_into("adam_v/" + prm->name, prm->v);
      prm->step = meta.at("adam_steps").at(prm->name).get<long>();
    }
    state->step = meta.at("step").get<long>();
    state->loss_curve = meta.at("loss_curve").get<std::vector<double>>();
  }
  return model;
}

}  // namespace nextscale
