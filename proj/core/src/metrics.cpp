#include "nextscale/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "nextscale/error.hpp"
#include "nextscale/log.hpp"
#include "nextscale/parallel.hpp"
#include "nextscale/rng.hpp"

namespace nextscale {

GaussianStats fit_gaussian(const Features& f) {
  require(f.count >= 2, "fit_gaussian: need at least 2 samples, got " + std::to_string(f.count));
  require(f.dim >= 1 && f.values.size() == f.count * f.dim, "fit_gaussian: malformed feature matrix");
  const std::size_t n = f.count, d = f.dim;
  GaussianStats g;
  g.n = n;
  g.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) g.mean[j] += f.values[i * d + j];
  }
  for (auto& m : g.mean) m /= static_cast<double>(n);
  g.cov.assign(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = f.values[i * d + a] - g.mean[a];
      for (std::size_t b = a; b < d; ++b) g.cov[a * d + b] += da * (f.values[i * d + b] - g.mean[b]);
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      g.cov[a * d + b] /= static_cast<double>(n - 1);
      g.cov[b * d + a] = g.cov[a * d + b];
    }
  }
  return g;
}

namespace {

using Mat = Eigen::MatrixXd;

Mat to_matrix(const std::vector<double>& v, std::size_t d) {
  Mat m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[i * d + j];
  }
  return m;
}

Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  require(es.info() == Eigen::Success, "frechet_distance: eigendecomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  const std::size_t d = a.dim();
  require(d >= 1 && b.dim() == d, "frechet_distance: dimension mismatch (" + std::to_string(d) + " vs " +
                                      std::to_string(b.dim()) + ")");
  require(a.cov.size() == d * d && b.cov.size() == d * d, "frechet_distance: malformed covariance");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Mat sa = to_matrix(a.cov, d), sb = to_matrix(b.cov, d);
  const Mat ra = psd_sqrt(sa);
  const Mat inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  require(es.info() == Eigen::Success, "frechet_distance: eigendecomposition failed");
  double cross = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) cross += std::sqrt(std::max(0.0, es.eigenvalues()(i)));
  const double value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
  if (!std::isfinite(value)) throw NumericError("frechet_distance: non-finite result");
  return value;
}

namespace {

// Summing in sorted order makes the result independent of row order.
double sorted_sum(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

double kid(const Features& a, const Features& b) {
  require(a.count >= 2 && b.count >= 2, "kid: each feature set needs at least 2 elements");
  require(a.dim == b.dim && a.dim >= 1, "kid: dimension mismatch");
  const double c = static_cast<double>(a.dim);
  const auto kernel = [c](std::span<const double> x, std::span<const double> y) {
    double dot = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
    const double t = dot / c + 1.0;
    return t * t * t;
  };
  std::vector<double> terms;
  const auto within = [&](const Features& f) {
    terms.clear();
    for (std::size_t i = 0; i < f.count; ++i) {
      for (std::size_t j = i + 1; j < f.count; ++j) terms.push_back(kernel(f.row(i), f.row(j)));
    }
    return 2.0 * sorted_sum(terms) / (static_cast<double>(f.count) * static_cast<double>(f.count - 1));
  };
  const double wa = within(a), wb = within(b);
  terms.clear();
  for (std::size_t i = 0; i < a.count; ++i) {
    for (std::size_t j = 0; j < b.count; ++j) terms.push_back(kernel(a.row(i), b.row(j)));
  }
  const double cross = sorted_sum(terms) / (static_cast<double>(a.count) * static_cast<double>(b.count));
  const double value = wa + wb - 2.0 * cross;
  if (!std::isfinite(value)) throw NumericError("kid: non-finite result");
  return value;
}

double efficiency(double fid, double seconds, double gamma) {
  require(fid >= 0.0 && seconds >= 0.0, "efficiency: FID and time must be non-negative");
  if (seconds == 0.0) return 0.0;
  return fid * std::pow(std::log10(1.0 + seconds), gamma);
}

namespace {

std::uint64_t tokenizer_hash(const TokenizerModel<float>& t) {
  const auto bytes = encode_checkpoint(tokenizer_checkpoint(t));
  return fnv1a64(bytes);
}

}  // namespace

FeatureEmbedder::FeatureEmbedder(const TokenizerModel<float>& tokenizer)
    : tokenizer_(&tokenizer), hash_(tokenizer_hash(tokenizer)) {}

Features FeatureEmbedder::embed(std::span<const Slice> slices, unsigned threads) const {
  constexpr std::size_t kChunk = 64;
  const std::size_t C = dim(), R = tokenizer_->config().resolution;
  Features out(slices.size(), C);
  const std::size_t chunks = (slices.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t ci) {
    const std::size_t begin = ci * kChunk, n = std::min(kChunk, slices.size() - begin);
    std::vector<const Slice*> ptrs;
    for (std::size_t i = 0; i < n; ++i) ptrs.push_back(&slices[begin + i]);
    const auto latent =
        tokenizer_->encode_features(Var<float>::constant(slices_to_tensor<float>(ptrs, R))).value();
    const std::size_t cells = latent.dim(2) * latent.dim(3);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < cells; ++p) s += latent.data[(b * C + c) * cells + p];
        out.values[(begin + b) * C + c] = s / static_cast<double>(cells);
      }
    }
  });
  return out;
}

std::string environment_fingerprint() {
  std::string cpu = "unknown";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(std::min(colon + 2, line.size()));
      break;
    }
  }
  std::ostringstream os;
  os << "cpu=" << cpu << "; hw_threads=" << std::thread::hardware_concurrency() << "; workers=" << worker_threads()
#if defined(__VERSION__)
     << "; compiler=" << __VERSION__
#endif
      ;
  return os.str();
}

TimingResult time_generation(const std::function<void()>& generate_one, std::size_t n_images, std::size_t warmup) {
  require(n_images >= 1, "time_generation: need at least one image");
  require(warmup < n_images, "time_generation: warmup " + std::to_string(warmup) + " leaves nothing to measure of " +
                                 std::to_string(n_images));
  TimingResult r;
  r.fingerprint = environment_fingerprint();
  for (std::size_t i = 0; i < n_images; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    generate_one();
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (i >= warmup) r.samples_s.push_back(dt);
  }
  std::vector<double> sorted = r.samples_s;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  r.median_s = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  return r;
}

MetricReport evaluate_features(const Features& real, const Features& fake, double median_time_s,
                               const std::string& model, std::uint64_t seed, double gamma) {
  require(real.count >= 1 && fake.count >= 1, "evaluate: both sets must be non-empty");
  MetricReport r;
  r.model = model;
  r.n_real = real.count;
  r.n_fake = fake.count;
  r.fid = std::max(0.0, frechet_distance(fit_gaussian(real), fit_gaussian(fake)));
  r.kid = kid(real, fake);
  r.median_time_s = median_time_s;
  r.gamma = gamma;
  r.efficiency = efficiency(r.fid, median_time_s, gamma);
  r.degenerate_time = median_time_s == 0.0;
  if (r.degenerate_time) log_warn("evaluate: zero inference time, efficiency is degenerate");
  r.seed = seed;
  r.fingerprint = environment_fingerprint();
  return r;
}

MetricReport evaluate(std::span<const Slice> real, std::span<const Slice> fake, const FeatureEmbedder& embedder,
                      double median_time_s, const std::string& model, std::uint64_t seed, double gamma,
                      unsigned threads) {
  require(!real.empty() && !fake.empty(), "evaluate: both sets must be non-empty");
  MetricReport r = evaluate_features(embedder.embed(real, threads), embedder.embed(fake, threads), median_time_s,
                                     model, seed, gamma);
  r.embedder_hash = embedder.hash();
  return r;
}

std::string csv_header() { return "model,n_real,n_fake,fid,kid,median_time_s,efficiency,gamma,seed"; }

std::string csv_row(const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%zu,%zu,%.6f,%.8f,%.6f,%.6f,%g,%llu", r.n_real, r.n_fake, r.fid, r.kid,
                r.median_time_s, r.efficiency, r.gamma, static_cast<unsigned long long>(r.seed));
  return r.model + buf;
}

std::string report_text(const MetricReport& r) {
  std::ostringstream os;
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.embedder_hash));
  os.precision(10);
  os << "model: " << r.model << "\n"
     << "n_real: " << r.n_real << "\n"
     << "n_fake: " << r.n_fake << "\n"
     << "fid: " << r.fid << "\n"
     << "kid: " << r.kid << "\n"
     << "median_time_s: " << r.median_time_s << "\n"
     << "efficiency: " << r.efficiency << "\n"
     << "gamma: " << r.gamma << "\n"
     << "degenerate_time: " << (r.degenerate_time ? "true" : "false") << "\n"
     << "seed: " << r.seed << "\n"
     << "embedder_hash: " << hash << "\n"
     << "environment: " << r.fingerprint << "\n";
  return os.str();
}

std::vector<Table1Row> read_table1(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "table1: empty file");
  require(line.rfind("model,time_s,fid,efficiency", 0) == 0, "table1: unexpected header '" + line + "'");
  std::vector<Table1Row> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::istringstream ls(line);
    Table1Row r;
    std::string t, f, e;
    require(std::getline(ls, r.model, ',') && std::getline(ls, t, ',') && std::getline(ls, f, ',') &&
                std::getline(ls, e),
            "table1: malformed row '" + line + "'");
    try {
      r.time_s = std::stod(t);
      r.fid = std::stod(f);
      r.efficiency = std::stod(e);
    } catch (const std::exception&) {
      throw ContractError("table1: non-numeric field in '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace nextscale
