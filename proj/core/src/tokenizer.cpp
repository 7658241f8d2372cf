#include "nextscale/tokenizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "config_json.hpp"
#include "json.hpp"
#include "nextscale/error.hpp"
#include "nextscale/ops.hpp"
#include "nextscale/rng.hpp"

namespace nextscale {

void TokenizerConfig::validate() const {
  require(resolution >= 1, "tokenizer: resolution must be positive");
  require(schedule.scales() >= 1, "tokenizer: empty schedule");
  const std::size_t n = schedule.latent();
  require(resolution % n == 0 && std::has_single_bit(resolution / n) && resolution / n >= 2,
          "tokenizer: resolution / latent extent must be a power of two >= 2 (got " + std::to_string(resolution) +
              " / " + std::to_string(n) + ")");
  require(vocab >= 1 && vocab <= 65536, "tokenizer: vocab must be in [1, 65536]");
  require(channels >= 1, "tokenizer: channels must be positive");
  require(widths.empty() || widths.size() + 1 == stages(),
          "tokenizer: widths must list one entry per hidden stage (" + std::to_string(stages() - 1) + ")");
  for (std::size_t w : widths) require(w >= 1, "tokenizer: widths must be positive");
  require(commit_beta >= 0.0, "tokenizer: commit_beta must be non-negative");
  require(ema_decay >= 0.0 && ema_decay <= 1.0, "tokenizer: ema_decay must be in [0, 1]");
  require(dead_code_threshold >= 0.0, "tokenizer: dead_code_threshold must be non-negative");
  require(dead_code_after >= 0, "tokenizer: dead_code_after must be non-negative");
}

std::size_t TokenizerConfig::stages() const {
  return static_cast<std::size_t>(std::countr_zero(resolution / schedule.latent()));
}

std::vector<std::size_t> TokenizerConfig::stage_widths() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i + 1 < stages(); ++i) {
    out.push_back(widths.empty() ? std::min<std::size_t>(32u << i, 128) : widths[i]);
  }
  out.push_back(channels);
  return out;
}

template <class T>
std::size_t quantize(std::span<const T> vec, const Codebook<T>& cb) {
  const std::size_t V = cb.vocab(), C = cb.width();
  require(V >= 1, "quantize: empty codebook");
  require(vec.size() == C, "quantize: vector width does not match codebook");
  for (T v : vec) {
    if (!std::isfinite(v)) throw NumericError("quantize: non-finite input feature");
  }
  std::size_t best = 0;
  T best_d = std::numeric_limits<T>::infinity();
  for (std::size_t v = 0; v < V; ++v) {
    const T* e = cb.embeddings.data.data() + v * C;
    T d = 0;
    for (std::size_t c = 0; c < C; ++c) d += (vec[c] - e[c]) * (vec[c] - e[c]);
    if (d < best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

template <class T>
Var<T> interpolate(const Var<T>& grid, std::size_t b) {
  require(grid.shape().size() == 4, "interpolate: expected a [B, C, a, a] grid");
  require(b >= 1, "interpolate: target extent must be positive");
  return resize_bilinear(grid, b, b);
}

namespace {

template <class T>
Tensor<T> random_weights(Shape shape, double stddev, SplitMixStream& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(stddev * rng.normal());
  return t;
}

}  // namespace

template <class T>
TokenizerModel<T>::TokenizerModel(TokenizerConfig config) : config_(std::move(config)) {
  config_.validate();
  widths_ = config_.stage_widths();
  const std::size_t s = widths_.size(), C = config_.channels, V = config_.vocab;
  SplitMixStream rng(derive_seed(config_.seed, {0x746F6B656EULL}));
  for (std::size_t i = 0; i < s; ++i) {
    const std::size_t in = i == 0 ? 1 : widths_[i - 1], out = widths_[i];
    params_.add("enc." + std::to_string(i) + ".w", random_weights<T>({out, in, 4, 4}, std::sqrt(1.0 / (in * 16.0)), rng),
                true);
    params_.add("enc." + std::to_string(i) + ".b", Tensor<T>({out}), false);
  }
  for (std::size_t i = 0; i < s; ++i) {
    const std::size_t in = widths_[s - 1 - i];
    const std::size_t out = i + 1 == s ? 1 : widths_[s - 2 - i];
    // Each output pixel of a stride-2 4x4 transposed conv sees 4 taps per input channel.
    params_.add("dec." + std::to_string(i) + ".w", random_weights<T>({in, out, 4, 4}, std::sqrt(1.0 / (in * 4.0)), rng),
                true);
    params_.add("dec." + std::to_string(i) + ".b", Tensor<T>({out}), false);
  }
  for (std::size_t k = 0; k < config_.schedule.scales(); ++k) {
    Tensor<T> w({C, C, 3, 3});
    for (std::size_t c = 0; c < C; ++c) w.data[((c * C + c) * 3 + 1) * 3 + 1] = T(1);
    params_.add("phi." + std::to_string(k) + ".w", std::move(w), true);
    params_.add("phi." + std::to_string(k) + ".b", Tensor<T>({C}), false);
  }
  codebook_.embeddings = random_weights<T>({V, C}, 1.0, rng);
  codebook_.ema_counts = Tensor<T>({V}, T(1));
  codebook_.ema_sums = codebook_.embeddings;
}

template <class T>
Var<T> TokenizerModel<T>::encode_features(const Var<T>& images) const {
  const std::size_t R = config_.resolution;
  require(images.shape() == Shape{images.shape().at(0), 1, R, R},
          "tokenizer: expected images [B, 1, " + std::to_string(R) + ", " + std::to_string(R) + "], got " +
              shape_str(images.shape()));
  Var<T> h = images;
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    h = conv2d(h, params_.find(p + ".w")->var, params_.find(p + ".b")->var, 2, 1);
    if (i + 1 < widths_.size()) h = silu(h);
  }
  return h;
}

template <class T>
Var<T> TokenizerModel<T>::decode_features(const Var<T>& latent) const {
  const std::size_t n = config_.schedule.latent();
  require(latent.shape().size() == 4 && latent.shape()[1] == config_.channels && latent.shape()[2] == n &&
              latent.shape()[3] == n,
          "tokenizer: decoder expects [B, C, n_K, n_K], got " + shape_str(latent.shape()));
  Var<T> h = latent;
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    h = conv_transpose2d(h, params_.find(p + ".w")->var, params_.find(p + ".b")->var, 2, 1);
    if (i + 1 < widths_.size()) h = silu(h);
  }
  return h;
}

template <class T>
Var<T> TokenizerModel<T>::refine(std::size_t k, const Var<T>& grid) const {
  require(k < config_.schedule.scales(), "tokenizer: refine scale out of range");
  const std::string p = "phi." + std::to_string(k);
  return conv2d(grid, params_.find(p + ".w")->var, params_.find(p + ".b")->var, 1, 1);
}

template <class T>
Tensor<T> TokenizerModel<T>::lookup(std::span<const int> indices, std::size_t batch, std::size_t n) const {
  const std::size_t C = config_.channels, V = config_.vocab, cells = n * n;
  require(indices.size() == batch * cells, "tokenizer: lookup index count mismatch");
  Tensor<T> out({batch, C, n, n});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < cells; ++p) {
      const int idx = indices[b * cells + p];
      require(idx >= 0 && static_cast<std::size_t>(idx) < V,
              "tokenizer: token index " + std::to_string(idx) + " outside [0, " + std::to_string(V) + ")");
      for (std::size_t c = 0; c < C; ++c) {
        out.data[(b * C + c) * cells + p] = codebook_.embeddings.data[static_cast<std::size_t>(idx) * C + c];
      }
    }
  }
  return out;
}

template <class T>
TokenizerForward<T> TokenizerModel<T>::forward(const Tensor<T>& images, bool differentiable,
                                               QuantizationTrace<T>* trace, TraceMode mode) const {
  require(mode == TraceMode::None || trace != nullptr, "tokenizer: trace mode requires a trace");
  const auto& sched = config_.schedule;
  const std::size_t K = sched.scales(), C = config_.channels, n = sched.latent();
  const std::size_t B = images.shape.at(0);
  if (mode == TraceMode::Replay) {
    require(trace->indices.size() == K && (!differentiable || trace->offsets.size() == K),
            "tokenizer: trace does not match the schedule");
  } else if (mode == TraceMode::Record) {
    trace->indices.clear();
    trace->offsets.clear();
  }

  TokenizerForward<T> out;
  const Var<T> x = Var<T>::constant(images);
  Var<T> rest = encode_features(x);
  Var<T> fhat, commit;
  std::vector<T> cell(C);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t nk = sched.size(k), cells = nk * nk;
    const Var<T> down = nk == n ? rest : interpolate(rest, nk);
    const Tensor<T>& dv = down.value();
    std::vector<int> idx;
    if (mode == TraceMode::Replay) {
      idx = trace->indices[k];
    } else {
      idx.resize(B * cells);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t p = 0; p < cells; ++p) {
          for (std::size_t c = 0; c < C; ++c) cell[c] = dv.data[(b * C + c) * cells + p];
          idx[b * cells + p] = static_cast<int>(quantize<T>(cell, codebook_));
        }
      }
    }
    const Tensor<T> q = lookup(idx, B, nk);
    Var<T> z;
    if (differentiable) {
      Tensor<T> offset;
      if (mode == TraceMode::Replay) {
        offset = trace->offsets[k];
      } else {
        offset = Tensor<T>(q.shape);
        for (std::size_t i = 0; i < q.size(); ++i) offset.data[i] = q.data[i] - dv.data[i];
      }
      if (mode == TraceMode::Record) trace->offsets.push_back(offset);
      z = add_constant(down, offset);
      const Var<T> term = mse(down, Var<T>::constant(q));
      commit = commit.defined() ? add(commit, term) : term;
    } else {
      z = Var<T>::constant(q);
    }
    if (mode == TraceMode::Record) trace->indices.push_back(idx);
    const Var<T> h = refine(k, nk == n ? z : interpolate(z, n));
    rest = sub(rest, h);
    fhat = fhat.defined() ? add(fhat, h) : h;
    double energy = 0.0;
    for (T v : rest.value().data) energy += static_cast<double>(v) * static_cast<double>(v);
    out.residual_energy.push_back(energy / static_cast<double>(B));
    out.features.push_back(dv);
    out.indices.push_back(std::move(idx));
  }
  out.recon = decode_features(fhat);
  out.recon_loss = mse(out.recon, x);
  if (differentiable) {
    out.commit_loss = commit;
    out.loss = add(out.recon_loss, scale(commit, static_cast<T>(config_.commit_beta)));
  } else {
    out.commit_loss = Var<T>::constant(Tensor<T>({1}));
    out.loss = out.recon_loss;
  }
  return out;
}

template <class T>
Tensor<T> TokenizerModel<T>::accumulate(const std::vector<TokenPyramid>& pyramids, std::size_t scales) const {
  const auto& sched = config_.schedule;
  require(scales >= 1 && scales <= sched.scales(), "tokenizer: scale count out of range");
  const std::size_t B = pyramids.size(), n = sched.latent();
  require(B >= 1, "tokenizer: no pyramids to decode");
  for (const auto& p : pyramids) p.validate(sched, config_.vocab);
  Var<T> fhat;
  for (std::size_t k = 0; k < scales; ++k) {
    const std::size_t nk = sched.size(k);
    std::vector<int> idx;
    idx.reserve(B * nk * nk);
    for (const auto& p : pyramids) idx.insert(idx.end(), p.grids[k].begin(), p.grids[k].end());
    const Var<T> z = Var<T>::constant(lookup(idx, B, nk));
    const Var<T> h = refine(k, nk == n ? z : interpolate(z, n));
    fhat = fhat.defined() ? add(fhat, h) : h;
  }
  return fhat.value();
}

template class TokenizerModel<float>;
template class TokenizerModel<double>;
template std::size_t quantize<float>(std::span<const float>, const Codebook<float>&);
template std::size_t quantize<double>(std::span<const double>, const Codebook<double>&);
template Var<float> interpolate<float>(const Var<float>&, std::size_t);
template Var<double> interpolate<double>(const Var<double>&, std::size_t);

template <class T>
Tensor<T> slices_to_tensor(std::span<const Slice* const> slices, std::size_t R) {
  Tensor<T> out({slices.size(), 1, R, R});
  for (std::size_t b = 0; b < slices.size(); ++b) {
    const Slice& s = *slices[b];
    require(s.height == R && s.width == R && s.values.size() == R * R,
            "tokenizer: slice extents " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                " do not match resolution " + std::to_string(R));
    std::copy(s.values.begin(), s.values.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * R * R));
  }
  return out;
}

template Tensor<float> slices_to_tensor<float>(std::span<const Slice* const>, std::size_t);
template Tensor<double> slices_to_tensor<double>(std::span<const Slice* const>, std::size_t);

std::vector<TokenPyramid> encode_batch(std::span<const Slice> xs, const TokenizerModel<float>& model,
                                       std::size_t chunk) {
  require(chunk >= 1, "encode_batch: chunk must be positive");
  const auto& cfg = model.config();
  std::vector<TokenPyramid> out;
  out.reserve(xs.size());
  for (std::size_t start = 0; start < xs.size(); start += chunk) {
    const std::size_t end = std::min(xs.size(), start + chunk);
    std::vector<const Slice*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&xs[i]);
    const auto fr = model.forward(slices_to_tensor<float>(ptrs, cfg.resolution), false);
    for (std::size_t b = 0; b < ptrs.size(); ++b) {
      TokenPyramid p;
      for (std::size_t k = 0; k < cfg.schedule.scales(); ++k) {
        const std::size_t cells = cfg.schedule.tokens(k);
        p.grids.emplace_back(fr.indices[k].begin() + static_cast<std::ptrdiff_t>(b * cells),
                             fr.indices[k].begin() + static_cast<std::ptrdiff_t>((b + 1) * cells));
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

TokenPyramid encode(const Slice& x, const TokenizerModel<float>& model) {
  return encode_batch(std::span<const Slice>(&x, 1), model).front();
}

std::vector<Image> decode_batch(const std::vector<TokenPyramid>& pyramids, const TokenizerModel<float>& model,
                                std::size_t scales) {
  const std::size_t R = model.config().resolution;
  const Tensor<float> fhat = model.accumulate(pyramids, scales);
  const Var<float> recon = model.decode_features(Var<float>::constant(fhat));
  std::vector<Image> out;
  for (std::size_t b = 0; b < pyramids.size(); ++b) {
    Image img(R, R);
    for (std::size_t i = 0; i < R * R; ++i) {
      img.values[i] = std::clamp(static_cast<double>(recon.value().data[b * R * R + i]), 0.0, 1.0);
    }
    out.push_back(std::move(img));
  }
  return out;
}

Image decode_prefix(const TokenPyramid& pyramid, const TokenizerModel<float>& model, std::size_t scales) {
  return decode_batch({pyramid}, model, scales).front();
}

Image decode(const TokenPyramid& pyramid, const TokenizerModel<float>& model) {
  return decode_prefix(pyramid, model, model.config().schedule.scales());
}

// ---- training ----

std::vector<std::size_t> batch_indices(std::uint64_t seed, long step, std::size_t batch, std::size_t population) {
  require(population >= 1, "batch_indices: empty population");
  std::vector<std::size_t> out(batch);
  for (std::size_t j = 0; j < batch; ++j) {
    out[j] = derive_seed(seed, {static_cast<std::uint64_t>(step), j}) % population;
  }
  return out;
}

template <class T>
void ema_update(Codebook<T>& cb, const std::vector<std::vector<int>>& indices,
                const std::vector<Tensor<T>>& features, double decay) {
  if (decay >= 1.0) return;
  require(indices.size() == features.size(), "ema_update: scale count mismatch");
  const std::size_t V = cb.vocab(), C = cb.width();
  std::vector<double> counts(V, 0.0), sums(V * C, 0.0);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Tensor<T>& f = features[k];
    const std::size_t B = f.dim(0), cells = f.dim(2) * f.dim(3);
    require(f.dim(1) == C && indices[k].size() == B * cells, "ema_update: feature shape mismatch");
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t p = 0; p < cells; ++p) {
        const auto v = static_cast<std::size_t>(indices[k][b * cells + p]);
        counts[v] += 1.0;
        for (std::size_t c = 0; c < C; ++c) sums[v * C + c] += static_cast<double>(f.data[(b * C + c) * cells + p]);
      }
    }
  }
  constexpr double eps = 1e-5;
  double total = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    cb.ema_counts.data[v] = static_cast<T>(decay * cb.ema_counts.data[v] + (1.0 - decay) * counts[v]);
    total += cb.ema_counts.data[v];
    for (std::size_t c = 0; c < C; ++c) {
      auto& s = cb.ema_sums.data[v * C + c];
      s = static_cast<T>(decay * s + (1.0 - decay) * sums[v * C + c]);
    }
  }
  for (std::size_t v = 0; v < V; ++v) {
    const double smoothed = (cb.ema_counts.data[v] + eps) / (total + static_cast<double>(V) * eps) * total;
    for (std::size_t c = 0; c < C; ++c) {
      cb.embeddings.data[v * C + c] = static_cast<T>(cb.ema_sums.data[v * C + c] / smoothed);
    }
  }
}

template void ema_update<float>(Codebook<float>&, const std::vector<std::vector<int>>&,
                                const std::vector<Tensor<float>>&, double);
template void ema_update<double>(Codebook<double>&, const std::vector<std::vector<int>>&,
                                 const std::vector<Tensor<double>>&, double);

namespace {

// Copies the feature vector of cell `which` (counted across all scales of the
// batch) into `out`.
template <class T>
void feature_at(const std::vector<Tensor<T>>& features, std::size_t which, std::span<T> out) {
  for (const auto& f : features) {
    const std::size_t B = f.dim(0), C = f.dim(1), cells = f.dim(2) * f.dim(3);
    if (which < B * cells) {
      const std::size_t b = which / cells, p = which % cells;
      for (std::size_t c = 0; c < C; ++c) out[c] = f.data[(b * C + c) * cells + p];
      return;
    }
    which -= B * cells;
  }
  throw ContractError("feature_at: index out of range");
}

template <class T>
std::size_t feature_count(const std::vector<Tensor<T>>& features) {
  std::size_t n = 0;
  for (const auto& f : features) n += f.dim(0) * f.dim(2) * f.dim(3);
  return n;
}

void init_codebook(TokenizerModel<float>& model, const Tensor<float>& images, std::uint64_t seed) {
  auto& cb = model.codebook();
  const auto fr = model.forward(images, false);
  const std::size_t V = cb.vocab(), C = cb.width(), n = feature_count(fr.features);
  SplitMixStream rng(derive_seed(seed, {0x696E6974ULL}));
  // Partial Fisher-Yates over cell ids gives distinct picks when n >= V.
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  for (std::size_t v = 0; v < V; ++v) {
    const std::size_t j = v < n ? v + rng.next() % (n - v) : rng.next() % n;
    if (v < n) std::swap(ids[v], ids[j]);
    std::span<float> row(cb.embeddings.data.data() + v * C, C);
    feature_at(fr.features, v < n ? ids[v] : ids[j], row);
    if (v >= n) {
      for (auto& x : row) x += static_cast<float>(1e-3 * rng.normal());
    }
  }
  std::fill(cb.ema_counts.data.begin(), cb.ema_counts.data.end(), 1.0f);
  cb.ema_sums = cb.embeddings;
  cb.initialized = true;
}

}  // namespace

TrainProgress tokenizer_train_step(TokenizerModel<float>& model, const std::vector<Slice>& train,
                                   const OptimizerConfig& opt, const TokenizerTrainConfig& cfg,
                                   TokenizerTrainState& state) {
  require(!train.empty(), "train_tokenizer: empty corpus");
  require(cfg.batch >= 1, "train_tokenizer: batch must be positive");
  const auto& tc = model.config();
  std::vector<const Slice*> ptrs;
  for (std::size_t i : batch_indices(cfg.seed, state.step, cfg.batch, train.size())) ptrs.push_back(&train[i]);
  const Tensor<float> images = slices_to_tensor<float>(ptrs, tc.resolution);

  if (!model.codebook().initialized && cfg.data_init) {
    init_codebook(model, images, cfg.seed);
  }
  model.codebook().initialized = true;

  TokenizerForward<float> fr;
  try {
    fr = model.forward(images, true);
  } catch (const NumericError& e) {
    throw NumericError(std::string("tokenizer training diverged at step ") + std::to_string(state.step) + ": " +
                       e.what());
  }
  auto params = model.params().all();
  model.params().zero_grad();
  const double loss = backward(fr.loss);
  if (!std::isfinite(loss)) {
    throw NumericError("tokenizer training diverged at step " + std::to_string(state.step) + ": loss is " +
                       std::to_string(loss));
  }
  clip_grad_norm<float>(params, opt.grad_clip_norm);
  const double lr = lr_at(state.step, opt);
  for (auto* p : params) adamw_update(*p, lr, opt);

  auto& cb = model.codebook();
  ema_update(cb, fr.indices, fr.features, tc.ema_decay);
  if (state.step >= tc.dead_code_after && tc.ema_decay < 1.0) {
    const std::size_t C = cb.width(), n = feature_count(fr.features);
    for (std::size_t v = 0; v < cb.vocab(); ++v) {
      if (cb.ema_counts.data[v] >= tc.dead_code_threshold) continue;
      const std::size_t which = derive_seed(cfg.seed, {static_cast<std::uint64_t>(state.step), v, 0xDEADULL}) % n;
      std::span<float> row(cb.embeddings.data.data() + v * C, C);
      feature_at(fr.features, which, row);
      std::copy(row.begin(), row.end(), cb.ema_sums.data.begin() + static_cast<std::ptrdiff_t>(v * C));
      cb.ema_counts.data[v] = 1.0f;
      ++state.dead_code_resets;
    }
  }

  TrainProgress progress{state.step, loss, fr.recon_loss.value()[0], fr.commit_loss.value()[0], lr};
  state.loss_curve.push_back(loss);
  ++state.step;
  return progress;
}

void train_tokenizer(TokenizerModel<float>& model, const std::vector<Slice>& train, const OptimizerConfig& opt,
                     const TokenizerTrainConfig& cfg, TokenizerTrainState& state,
                     const std::function<bool(const TrainProgress&)>& on_progress) {
  opt.validate();
  while (state.step < cfg.steps) {
    const TrainProgress p = tokenizer_train_step(model, train, opt, cfg, state);
    const bool report = (cfg.log_every > 0 && state.step % cfg.log_every == 0) || state.step == cfg.steps;
    if (report && on_progress && !on_progress(p)) {
      return;
    }
  }
}

// ---- analysis ----

CodebookUsage usage_from_pyramids(const std::vector<TokenPyramid>& pyramids, std::size_t vocab) {
  require(!pyramids.empty(), "codebook_usage: empty evaluation set");
  CodebookUsage u;
  std::vector<std::size_t> counts(vocab, 0);
  for (const auto& p : pyramids) {
    for (const auto& g : p.grids) {
      for (int v : g) {
        require(v >= 0 && static_cast<std::size_t>(v) < vocab, "codebook_usage: index out of range");
        ++counts[static_cast<std::size_t>(v)];
        ++u.total;
      }
    }
  }
  u.histogram.resize(vocab);
  std::size_t used = 0;
  for (std::size_t v = 0; v < vocab; ++v) {
    u.histogram[v] = static_cast<double>(counts[v]) / static_cast<double>(u.total);
    used += counts[v] > 0;
  }
  u.utilization = static_cast<double>(used) / static_cast<double>(vocab);
  return u;
}

CodebookUsage codebook_usage(const TokenizerModel<float>& model, std::span<const Slice> eval) {
  require(!eval.empty(), "codebook_usage: empty evaluation set");
  return usage_from_pyramids(encode_batch(eval, model), model.config().vocab);
}

Image usage_heatmap(const CodebookUsage& usage) {
  const std::size_t V = usage.histogram.size();
  require(V >= 1, "usage_heatmap: empty histogram");
  auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(V))));
  while (side * side < V) ++side;
  const double peak = *std::max_element(usage.histogram.begin(), usage.histogram.end());
  Image img(side, side);
  for (std::size_t v = 0; v < V; ++v) img.values[v] = peak > 0 ? usage.histogram[v] / peak : 0.0;
  return img;
}

double mse(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), "mse: size mismatch or empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double psnr(std::span<const double> a, std::span<const double> b) {
  const double m = mse(a, b);
  return m == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / m);
}

// ---- MVTK ----

std::vector<std::uint8_t> encode_tokens(const TokenPyramid& pyramid, const ScaleSchedule& schedule,
                                        std::size_t vocab) {
  require(vocab <= 65536, "MVTK: vocab exceeds u16 range");
  pyramid.validate(schedule, vocab);
  std::vector<std::uint8_t> out = {'M', 'V', 'T', 'K'};
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(schedule.scales()));
  for (std::size_t n : schedule.sizes()) put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(vocab));
  for (const auto& g : pyramid.grids) {
    for (int v : g) {
      out.push_back(static_cast<std::uint8_t>(v & 0xFF));
      out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    }
  }
  return out;
}

TokenPyramid decode_tokens(std::span<const std::uint8_t> bytes, ScaleSchedule* schedule, std::size_t* vocab) {
  require(bytes.size() >= 4 && std::memcmp(bytes.data(), "MVTK", 4) == 0, "MVTK: bad magic");
  std::size_t pos = 4;
  const std::uint32_t version = get_u32(bytes, pos);
  require(version == 1, "MVTK: unsupported version " + std::to_string(version));
  const std::uint32_t K = get_u32(bytes, pos);
  require(K >= 1 && K <= 1024, "MVTK: implausible scale count");
  std::vector<std::size_t> sizes;
  for (std::uint32_t k = 0; k < K; ++k) sizes.push_back(get_u32(bytes, pos));
  const ScaleSchedule sched(sizes);
  const std::uint32_t V = get_u32(bytes, pos);
  require(bytes.size() - pos == 2 * sched.token_count(), "MVTK: payload size does not match schedule");
  TokenPyramid p;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<int> g(sched.tokens(k));
    for (auto& v : g) {
      v = bytes[pos] | (bytes[pos + 1] << 8);
      pos += 2;
    }
    p.grids.push_back(std::move(g));
  }
  p.validate(sched, V);
  if (schedule) *schedule = sched;
  if (vocab) *vocab = V;
  return p;
}

// ---- checkpoints ----

Checkpoint tokenizer_checkpoint(const TokenizerModel<float>& model, const TokenizerTrainState* state) {
  Checkpoint ckpt;
  ckpt.kind = "tokenizer";
  ckpt.config_json = detail::to_json(model.config()).dump();
  detail::ojson meta;
  meta["codebook_initialized"] = model.codebook().initialized;
  detail::ojson adam_steps = detail::ojson::object();
  for (const auto* p : model.params().all()) {
    ckpt.add("param/" + p->name, p->value());
    if (state) {
      ckpt.add("adam_m/" + p->name, p->m);
      ckpt.add("adam_v/" + p->name, p->v);
      adam_steps[p->name] = p->step;
    }
  }
  ckpt.add("codebook/embeddings", model.codebook().embeddings);
  ckpt.add("codebook/ema_counts", model.codebook().ema_counts);
  ckpt.add("codebook/ema_sums", model.codebook().ema_sums);
  if (state) {
    meta["step"] = state->step;
    meta["loss_curve"] = state->loss_curve;
    meta["dead_code_resets"] = state->dead_code_resets;
    meta["adam_steps"] = adam_steps;
  }
  ckpt.metadata_json = meta.dump();
  return ckpt;
}

TokenizerModel<float> tokenizer_from_checkpoint(const Checkpoint& ckpt, TokenizerTrainState* state) {
  require(ckpt.kind == "tokenizer", "checkpoint: expected a tokenizer checkpoint, found '" + ckpt.kind + "'");
  TokenizerConfig cfg;
  detail::from_json(detail::ojson::parse(ckpt.config_json), cfg);
  TokenizerModel<float> model(cfg);
  const auto meta = detail::ojson::parse(ckpt.metadata_json);
  for (auto* p : model.params().all()) {
    ckpt.load_into("param/" + p->name, p->mutable_value());
  }
  ckpt.load_into("codebook/embeddings", model.codebook().embeddings);
  ckpt.load_into("codebook/ema_counts", model.codebook().ema_counts);
  ckpt.load_into("codebook/ema_sums", model.codebook().ema_sums);
  model.codebook().initialized = meta.value("codebook_initialized", true);
  if (state) {
    require(meta.contains("step"), "checkpoint: no training state stored");
    for (auto* p : model.params().all()) {
      ckpt.load_into("adam_m/" + p->name, p->m);
      ckpt.load_into("adam_v/" + p->name, p->v);
      p->step = meta.at("adam_steps").at(p->name).get<long>();
    }
    state->step = meta.at("step").get<long>();
    state->loss_curve = meta.at("loss_curve").get<std::vector<double>>();
    state->dead_code_resets = meta.at("dead_code_resets").get<long>();
  }
  return model;
}

}  // namespace nextscale
