#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nextscale/datagen.hpp"
#include "nextscale/tokenizer.hpp"

namespace nextscale {

/// Row-major [count, dim] feature matrix.
struct Features {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  Features() = default;
  Features(std::size_t n, std::size_t d) : count(n), dim(d), values(n * d, 0.0) {}
  [[nodiscard]] std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * dim, dim}; }
};

struct GaussianStats {
  std::size_t n = 0;
  std::vector<double> mean;  // [C]
  std::vector<double> cov;   // [C, C], n - 1 denominator

  [[nodiscard]] std::size_t dim() const { return mean.size(); }
};

GaussianStats fit_gaussian(const Features& f);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the root taken
/// through the symmetric form S_a^(1/2) S_b S_a^(1/2) and negative
/// eigenvalues clamped to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

/// Unbiased squared MMD with the kernel (x.y / C + 1)^3.
double kid(const Features& a, const Features& b);

/// Q * (log10(1 + P))^gamma. P = 0 gives 0.
double efficiency(double fid, double seconds, double gamma = 0.1);

/// Frozen tokenizer encoder followed by spatial mean pooling.
class FeatureEmbedder {
 public:
  explicit FeatureEmbedder(const TokenizerModel<float>& tokenizer);

  /// Chunks are fixed by index, so features do not depend on `threads`.
  [[nodiscard]] Features embed(std::span<const Slice> slices, unsigned threads = 1) const;
  [[nodiscard]] std::size_t dim() const { return tokenizer_->config().channels; }
  /// FNV-1a of the tokenizer's serialized weights.
  [[nodiscard]] std::uint64_t hash() const { return hash_; }

 private:
  const TokenizerModel<float>* tokenizer_;
  std::uint64_t hash_;
};

struct TimingResult {
  double median_s = 0.0;
  std::vector<double> samples_s;  // after warmup
  std::string fingerprint;
};

/// Calls `generate_one` n_images times and reports the median wall-clock of
/// the calls after the first `warmup`.
TimingResult time_generation(const std::function<void()>& generate_one, std::size_t n_images,
                             std::size_t warmup = 1);

std::string environment_fingerprint();

struct MetricReport {
  std::string model;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;
  double fid = 0.0;
  double kid = 0.0;
  double median_time_s = 0.0;
  double efficiency = 0.0;
  double gamma = 0.1;
  std::uint64_t seed = 0;
  bool degenerate_time = false;
  std::uint64_t embedder_hash = 0;
  std::string fingerprint;
};

MetricReport evaluate(std::span<const Slice> real, std::span<const Slice> fake, const FeatureEmbedder& embedder,
                      double median_time_s, const std::string& model = "model", std::uint64_t seed = 0,
                      double gamma = 0.1, unsigned threads = 1);

/// Same, from precomputed features.
MetricReport evaluate_features(const Features& real, const Features& fake, double median_time_s,
                               const std::string& model = "model", std::uint64_t seed = 0, double gamma = 0.1);

std::string csv_header();
std::string csv_row(const MetricReport& r);
/// "key: value" lines.
std::string report_text(const MetricReport& r);

struct Table1Row {
  std::string model;
  double time_s = 0.0;
  double fid = 0.0;
  double efficiency = 0.0;
};

/// Reads `model,time_s,fid,efficiency` rows.
std::vector<Table1Row> read_table1(const std::string& csv_text);

}  // namespace nextscale
