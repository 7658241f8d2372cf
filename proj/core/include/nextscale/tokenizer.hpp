#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "nextscale/autograd.hpp"
#include "nextscale/checkpoint.hpp"
#include "nextscale/datagen.hpp"
#include "nextscale/image.hpp"
#include "nextscale/optim.hpp"
#include "nextscale/schedule.hpp"

namespace nextscale {

struct TokenizerConfig {
  std::size_t resolution = 32;
  ScaleSchedule schedule{1, 2, 3, 4};
  std::size_t vocab = 64;
  std::size_t channels = 8;
  /// Hidden widths of the first stages-1 encoder stages; empty selects
  /// 32, 64, 128, 128, ... The last stage always maps to `channels`.
  std::vector<std::size_t> widths;
  double commit_beta = 0.25;
  double ema_decay = 0.99;
  double dead_code_threshold = 1e-3;
  long dead_code_after = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  /// log2(resolution / latent extent).
  [[nodiscard]] std::size_t stages() const;
  [[nodiscard]] std::vector<std::size_t> stage_widths() const;
};

/// Shared code table plus EMA accumulators.
template <class T>
struct Codebook {
  Tensor<T> embeddings;  // [V, C]
  Tensor<T> ema_counts;  // [V]
  Tensor<T> ema_sums;    // [V, C]
  bool initialized = false;

  [[nodiscard]] std::size_t vocab() const { return embeddings.dim(0); }
  [[nodiscard]] std::size_t width() const { return embeddings.dim(1); }
};

/// Nearest row by squared Euclidean distance, lowest index on ties.
template <class T>
std::size_t quantize(std::span<const T> vec, const Codebook<T>& cb);

/// Channel-independent bilinear resize of a [B, C, a, a] grid to b x b.
template <class T>
Var<T> interpolate(const Var<T>& grid, std::size_t b);

/// Per-scale record of the quantizer's choices. Replaying it substitutes the
/// fixed offsets (code - feature) for the argmin, which turns the
/// straight-through graph into a smooth function of the weights.
template <class T>
struct QuantizationTrace {
  std::vector<std::vector<int>> indices;
  std::vector<Tensor<T>> offsets;
};

enum class TraceMode { None, Record, Replay };

template <class T>
struct TokenizerForward {
  Var<T> recon;       // [B, 1, R, R], unclamped
  Var<T> recon_loss;  // mean squared error
  Var<T> commit_loss; // sum over scales of mean squared commitment error
  Var<T> loss;
  std::vector<std::vector<int>> indices;  // per scale, [B, n_k, n_k] row-major per image
  std::vector<Tensor<T>> features;        // per scale pre-quantization grids [B, C, n_k, n_k]
  std::vector<double> residual_energy;    // mean ||f_hat||^2 per image after each scale
};

template <class T>
class TokenizerModel {
 public:
  explicit TokenizerModel(TokenizerConfig config);

  [[nodiscard]] const TokenizerConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  [[nodiscard]] const ParameterSet<T>& params() const { return params_; }
  Codebook<T>& codebook() { return codebook_; }
  [[nodiscard]] const Codebook<T>& codebook() const { return codebook_; }

  /// images [B, 1, R, R] -> latent [B, C, n_K, n_K]
  [[nodiscard]] Var<T> encode_features(const Var<T>& images) const;
  /// latent [B, C, n_K, n_K] -> images [B, 1, R, R], unclamped
  [[nodiscard]] Var<T> decode_features(const Var<T>& latent) const;
  /// phi_k on a [B, C, n_K, n_K] grid.
  [[nodiscard]] Var<T> refine(std::size_t k, const Var<T>& grid) const;
  /// Z(r): gathers codebook rows into a [B, C, n, n] grid.
  [[nodiscard]] Tensor<T> lookup(std::span<const int> indices, std::size_t batch, std::size_t n) const;

  /// Full multi-scale pass with straight-through quantization. With
  /// differentiable == false the quantized grids enter as constants.
  TokenizerForward<T> forward(const Tensor<T>& images, bool differentiable,
                              QuantizationTrace<T>* trace = nullptr, TraceMode mode = TraceMode::None) const;

  /// Sum over the first `scales` entries of phi_k(I_K(Z(r_k))), [B, C, n_K, n_K].
  [[nodiscard]] Tensor<T> accumulate(const std::vector<TokenPyramid>& pyramids, std::size_t scales) const;

 private:
  TokenizerConfig config_;
  ParameterSet<T> params_;
  Codebook<T> codebook_;
  std::vector<std::size_t> widths_;
};

extern template class TokenizerModel<float>;
extern template class TokenizerModel<double>;

/// [B, 1, R, R] tensor from slices.
template <class T>
Tensor<T> slices_to_tensor(std::span<const Slice* const> slices, std::size_t R);

TokenPyramid encode(const Slice& x, const TokenizerModel<float>& model);
std::vector<TokenPyramid> encode_batch(std::span<const Slice> xs, const TokenizerModel<float>& model,
                                       std::size_t chunk = 64);
/// Alg. 2, clamped to [0, 1].
Image decode(const TokenPyramid& pyramid, const TokenizerModel<float>& model);
/// Reconstruction from the first `scales` grids only.
Image decode_prefix(const TokenPyramid& pyramid, const TokenizerModel<float>& model, std::size_t scales);
std::vector<Image> decode_batch(const std::vector<TokenPyramid>& pyramids, const TokenizerModel<float>& model,
                                std::size_t scales);

struct TokenizerTrainConfig {
  long steps = 3000;
  std::size_t batch = 32;
  std::uint64_t seed = 1;
  long log_every = 100;
  /// Also initialize the codebook from encoder features of the first batch.
  bool data_init = true;
};

struct TrainProgress {
  long step = 0;
  double loss = 0.0;
  double recon = 0.0;
  double commit = 0.0;
  double lr = 0.0;
};

/// Per-step training state that must survive a checkpoint for exact resume.
struct TokenizerTrainState {
  long step = 0;
  std::vector<double> loss_curve;
  long dead_code_resets = 0;
};

/// One AdamW + EMA step on the batch drawn for `state.step`; advances it.
TrainProgress tokenizer_train_step(TokenizerModel<float>& model, const std::vector<Slice>& train,
                                   const OptimizerConfig& opt, const TokenizerTrainConfig& cfg,
                                   TokenizerTrainState& state);

/// Runs until state.step == cfg.steps. `on_progress` fires every log_every
/// steps and at the end; returning false stops early (e.g. to checkpoint).
void train_tokenizer(TokenizerModel<float>& model, const std::vector<Slice>& train, const OptimizerConfig& opt,
                     const TokenizerTrainConfig& cfg, TokenizerTrainState& state,
                     const std::function<bool(const TrainProgress&)>& on_progress = {});

/// Batch indices for a training step: a pure function of (seed, step).
std::vector<std::size_t> batch_indices(std::uint64_t seed, long step, std::size_t batch, std::size_t population);

/// EMA codebook update from assigned features. No-op when decay >= 1.
template <class T>
void ema_update(Codebook<T>& cb, const std::vector<std::vector<int>>& indices,
                const std::vector<Tensor<T>>& features, double decay);

struct CodebookUsage {
  std::vector<double> histogram;  // normalized, sums to 1
  double utilization = 0.0;       // fraction of codes with count > 0
  std::size_t total = 0;
};

CodebookUsage codebook_usage(const TokenizerModel<float>& model, std::span<const Slice> eval);
CodebookUsage usage_from_pyramids(const std::vector<TokenPyramid>& pyramids, std::size_t vocab);
/// Row-major reshape of the V bins into the smallest square that holds them,
/// scaled so the most frequent code is 1.
Image usage_heatmap(const CodebookUsage& usage);

double psnr(std::span<const double> a, std::span<const double> b);
double mse(std::span<const double> a, std::span<const double> b);

// MVTK token streams:
//   "MVTK" | u32 version | u32 K | u32 n_k * K | u32 V | u16 LE indices per scale
std::vector<std::uint8_t> encode_tokens(const TokenPyramid& pyramid, const ScaleSchedule& schedule,
                                        std::size_t vocab);
TokenPyramid decode_tokens(std::span<const std::uint8_t> bytes, ScaleSchedule* schedule = nullptr,
                           std::size_t* vocab = nullptr);

Checkpoint tokenizer_checkpoint(const TokenizerModel<float>& model, const TokenizerTrainState* state = nullptr);
TokenizerModel<float> tokenizer_from_checkpoint(const Checkpoint& ckpt, TokenizerTrainState* state = nullptr);

}  // namespace nextscale
