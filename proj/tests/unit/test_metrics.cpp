#include <doctest.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "nextscale/error.hpp"
#include "nextscale/metrics.hpp"

using namespace nextscale;

namespace {

using LMat = std::array<std::array<long double, 3>, 3>;

LMat lmul(const LMat& a, const LMat& b) {
  LMat c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

LMat linv(const LMat& m) {
  const long double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                          m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                          m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  LMat r{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
      r[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
    }
  }
  return r;
}

// Fréchet distance with the root of S_a S_b by Denman-Beavers iteration in
// extended precision.
long double frechet_oracle(const std::array<long double, 3>& ma, const LMat& sa, const std::array<long double, 3>& mb,
                           const LMat& sb) {
  LMat y = lmul(sa, sb), z{};
  for (int i = 0; i < 3; ++i) z[i][i] = 1;
  for (int it = 0; it < 100; ++it) {
    const LMat yi = linv(y), zi = linv(z);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const long double ny = (y[i][j] + zi[i][j]) / 2, nz = (z[i][j] + yi[i][j]) / 2;
        y[i][j] = ny;
        z[i][j] = nz;
      }
    }
  }
  long double d = 0;
  for (int i = 0; i < 3; ++i) d += (ma[i] - mb[i]) * (ma[i] - mb[i]) + sa[i][i] + sb[i][i] - 2 * y[i][i];
  return d;
}

LMat random_spd(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  LMat a{};
  for (auto& row : a)
    for (auto& v : row) v = n(rng);
  LMat s{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      for (int k = 0; k < 3; ++k) s[i][j] += a[i][k] * a[j][k];
      if (i == j) s[i][j] += 0.1L;
    }
  return s;
}

GaussianStats to_stats(const std::array<long double, 3>& m, const LMat& s) {
  GaussianStats g;
  g.n = 100;
  for (int i = 0; i < 3; ++i) {
    g.mean.push_back(static_cast<double>(m[i]));
    for (int j = 0; j < 3; ++j) g.cov.push_back(static_cast<double>(s[i][j]));
  }
  return g;
}

Features random_features(std::size_t n, std::size_t d, std::mt19937_64& rng, double shift = 0.0) {
  std::normal_distribution<double> g(0.0, 1.0);
  Features f(n, d);
  for (auto& v : f.values) v = g(rng) + shift;
  return f;
}

// Unbiased MMD^2 by the textbook double loops over ordered pairs.
double kid_oracle(const Features& a, const Features& b) {
  const auto k = [&](std::span<const double> x, std::span<const double> y) {
    double dot = 0;
    for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
    return std::pow(dot / static_cast<double>(x.size()) + 1.0, 3);
  };
  double xx = 0, yy = 0, xy = 0;
  for (std::size_t i = 0; i < a.count; ++i)
    for (std::size_t j = 0; j < a.count; ++j)
      if (i != j) xx += k(a.row(i), a.row(j));
  for (std::size_t i = 0; i < b.count; ++i)
    for (std::size_t j = 0; j < b.count; ++j)
      if (i != j) yy += k(b.row(i), b.row(j));
  for (std::size_t i = 0; i < a.count; ++i)
    for (std::size_t j = 0; j < b.count; ++j) xy += k(a.row(i), b.row(j));
  const double m = static_cast<double>(a.count), n = static_cast<double>(b.count);
  return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2 * xy / (m * n);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("Gaussian fit uses the unbiased covariance") {
  Features f(3, 2);
  f.values = {1, 0, 2, 2, 3, 4};
  const auto g = fit_gaussian(f);
  CHECK(g.mean == std::vector<double>{2, 2});
  CHECK(g.cov[0] == doctest::Approx(1.0));
  CHECK(g.cov[1] == doctest::Approx(2.0));
  CHECK(g.cov[2] == g.cov[1]);
  CHECK(g.cov[3] == doctest::Approx(4.0));
  CHECK_THROWS_AS(fit_gaussian(Features(1, 2)), ContractError);
}

TEST_CASE("Fréchet distance") {
  std::mt19937_64 rng(1);
  const auto f = random_features(50, 4, rng);
  const auto g = fit_gaussian(f);
  CHECK(std::abs(frechet_distance(g, g)) < 1e-8);

  GaussianStats a, b;
  a.n = b.n = 10;
  a.mean = {0, 0, 0};
  b.mean = {1, 0, 0};
  a.cov = b.cov = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(1e-12));

  for (int trial = 0; trial < 20; ++trial) {
    const LMat sa = random_spd(rng), sb = random_spd(rng);
    std::normal_distribution<double> n(0.0, 1.0);
    const std::array<long double, 3> ma{n(rng), n(rng), n(rng)}, mb{n(rng), n(rng), n(rng)};
    const double expect = static_cast<double>(frechet_oracle(ma, sa, mb, sb));
    const double got = frechet_distance(to_stats(ma, sa), to_stats(mb, sb));
    CHECK(std::abs(got - expect) <= 1e-6 * std::abs(expect));
    CHECK(std::abs(got - frechet_distance(to_stats(mb, sb), to_stats(ma, sa))) <= 1e-10);
    CHECK(got >= -1e-9);
  }
  GaussianStats c;
  c.n = 2;
  c.mean = {0, 0};
  c.cov = {1, 0, 0, 1};
  CHECK_THROWS_AS(frechet_distance(a, c), ContractError);
}

TEST_CASE("kernel inception distance") {
  std::mt19937_64 rng(2);
  const auto a = random_features(40, 5, rng);
  const auto b = random_features(30, 5, rng, 0.3);
  CHECK(kid(a, b) == doctest::Approx(kid_oracle(a, b)).epsilon(1e-12));
  CHECK(std::abs(kid(a, a) - kid_oracle(a, a)) <= 1e-12);

  Features v(2, 3);
  v.values = {0.3, -1.2, 2.0, 0.3, -1.2, 2.0};
  CHECK(kid(v, v) == 0.0);

  // Exact invariance under row permutations.
  Features pa = a;
  std::vector<std::size_t> perm(a.count);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < a.count; ++i) {
    std::copy(a.row(perm[i]).begin(), a.row(perm[i]).end(), pa.row(i).begin());
  }
  Features rb = b;
  for (std::size_t i = 0; i < b.count; ++i) {
    std::copy(b.row(b.count - 1 - i).begin(), b.row(b.count - 1 - i).end(), rb.row(i).begin());
  }
  CHECK(kid(pa, rb) == kid(a, b));

  CHECK_THROWS_AS(kid(Features(1, 5), b), ContractError);
  CHECK_THROWS_AS(kid(a, Features(4, 3)), ContractError);
}

TEST_CASE("efficiency score examples") {
  CHECK(efficiency(102.27, 0.01) == doctest::Approx(59.33).epsilon(0.05 / 59.33));
  CHECK(efficiency(16.59, 0.09) == doctest::Approx(11.94).epsilon(0.05 / 11.94));
  CHECK(efficiency(10.11, 0.16) == doctest::Approx(7.69).epsilon(0.05 / 7.69));
  CHECK(efficiency(10.0, 0.0) == 0.0);
  CHECK_THROWS_AS(efficiency(-1.0, 0.1), ContractError);
  for (double q : {1.0, 5.0, 50.0}) {
    for (double p : {0.01, 0.1, 1.0, 3.0}) {
      CHECK(efficiency(q * 1.1, p) > efficiency(q, p));
      CHECK(efficiency(q, p * 1.1) > efficiency(q, p));
    }
  }
}

TEST_CASE("bundled table rows reproduce") {
  const auto rows = read_table1(read_text(NEXTSCALE_SOURCE_DIR "/data/table1.csv"));
  REQUIRE(rows.size() == 25);
  for (const auto& r : rows) {
    CAPTURE(r.model);
    CHECK(std::abs(efficiency(r.fid, r.time_s) - r.efficiency) <= 0.05);
  }
  CHECK_THROWS_AS(read_table1("a,b\n"), ContractError);
  CHECK_THROWS_AS(read_table1("model,time_s,fid,efficiency\nx,1,y,2\n"), ContractError);
}

TEST_CASE("timing harness") {
  const auto r = time_generation([] { std::this_thread::sleep_for(std::chrono::milliseconds(10)); }, 7, 2);
  CHECK(r.samples_s.size() == 5);
  CHECK(r.median_s >= 0.009);
  CHECK(r.median_s <= 0.020);
  CHECK(!r.fingerprint.empty());
  CHECK_THROWS_AS(time_generation([] {}, 3, 3), ContractError);
  CHECK_THROWS_AS(time_generation([] {}, 0, 0), ContractError);

  volatile double sink = 0;
  const auto work = [&] {
    double s = 0;
    for (int i = 0; i < 200000; ++i) s += std::sqrt(static_cast<double>(i));
    sink = s;
  };
  const double t1 = time_generation(work, 9, 2).median_s, t2 = time_generation(work, 9, 2).median_s;
  WARN(std::abs(t1 - t2) < 0.5 * std::max(t1, t2));
}

TEST_CASE("evaluation report") {
  std::mt19937_64 rng(3);
  const auto real = random_features(300, 4, rng);
  const auto same = evaluate_features(real, real, 0.05, "self", 9);
  CHECK(same.fid < 1e-6);
  // Unbiased: identical sets land at 2 (mean off-diagonal - mean diagonal) / n <= 0.
  CHECK(same.kid < 1e-9);
  CHECK(same.kid == doctest::Approx(kid_oracle(real, real)).epsilon(1e-12));
  CHECK(same.efficiency == efficiency(same.fid, 0.05));
  CHECK(same.n_real == 300);

  const auto big = random_features(1000, 4, rng);
  Features shifted = big;
  const std::vector<double> d{0.5, -1.0, 0.25, 0.75};
  for (std::size_t i = 0; i < big.count; ++i)
    for (std::size_t j = 0; j < 4; ++j) shifted.values[i * 4 + j] += d[j];
  double d2 = 0;
  for (double x : d) d2 += x * x;
  const auto r = evaluate_features(big, shifted, 0.1, "shift", 1);
  CHECK(r.fid == doctest::Approx(d2).epsilon(0.05));
  CHECK(r.efficiency == efficiency(r.fid, 0.1));
  CHECK(r.kid > 0.0);

  const auto zero = evaluate_features(big, shifted, 0.0);
  CHECK(zero.degenerate_time);
  CHECK(zero.efficiency == 0.0);

  CHECK(csv_header() == "model,n_real,n_fake,fid,kid,median_time_s,efficiency,gamma,seed");
  const std::string row = csv_row(r);
  CHECK(row.rfind("shift,1000,1000,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ',') == 8);
  CHECK(report_text(r).find("efficiency: ") != std::string::npos);
}

TEST_CASE("feature embedder") {
  TokenizerConfig c;
  c.seed = 4;
  const TokenizerModel<float> tok(c);
  const FeatureEmbedder e(tok);
  const auto slices = build_corpus(default_specs(4), 20, 32, SplitFractions{}, 5, 1).train;
  const auto f1 = e.embed(slices, 1), f3 = e.embed(slices, 3);
  CHECK(f1.count == slices.size());
  CHECK(f1.dim == 8);
  CHECK(f1.values == f3.values);
  CHECK(e.hash() == FeatureEmbedder(tok).hash());
  TokenizerModel<float> other(c);
  other.params().all()[0]->mutable_value().data[0] += 1.0f;
  CHECK(FeatureEmbedder(other).hash() != e.hash());

  const auto r = evaluate(slices, slices, e, 0.1, "same");
  CHECK(r.fid < 1e-6);
  CHECK(r.embedder_hash == e.hash());
}
