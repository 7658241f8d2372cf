#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "nextscale/datagen.hpp"
#include "nextscale/error.hpp"
#include "nextscale/rng.hpp"

using namespace nextscale;

namespace {

RawSlice ct_slice(std::vector<double> hu) {
  RawSlice raw;
  raw.height = 1;
  raw.width = hu.size();
  raw.intensities = std::move(hu);
  raw.mask.assign(raw.width, 1);
  raw.modality = Modality::CT;
  return raw;
}

RawSlice mri_slice(std::vector<double> v) {
  RawSlice raw = ct_slice(std::move(v));
  raw.modality = Modality::MRI;
  return raw;
}

// Union-find component sizes, independent of the library's flood fill.
std::vector<std::size_t> oracle_component_sizes(const std::vector<std::uint8_t>& mask, std::size_t h,
                                                std::size_t w) {
  std::vector<std::size_t> parent(h * w);
  std::iota(parent.begin(), parent.end(), 0);
  const auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t p = r * w + c;
      if (!mask[p]) continue;
      if (c + 1 < w && mask[p + 1]) parent[find(p)] = find(p + 1);
      if (r + 1 < h && mask[p + w]) parent[find(p)] = find(p + w);
    }
  }
  std::map<std::size_t, std::size_t> sizes;
  for (std::size_t p = 0; p < h * w; ++p) {
    if (mask[p]) ++sizes[find(p)];
  }
  std::vector<std::size_t> out;
  for (auto [root, n] : sizes) out.push_back(n);
  std::sort(out.begin(), out.end());
  return out;
}

const Corpus& desk_corpus() {
  static const Corpus corpus = build_corpus(default_specs(4), 500, 32, SplitFractions{}, 20240611, 1);
  return corpus;
}

}  // namespace

TEST_CASE("make_phantom is deterministic per (spec, seed)") {
  for (int id = 0; id < 4; ++id) {
    const PhantomSpec spec = default_spec(id);
    const RawSlice a = make_phantom(spec, 99);
    const RawSlice b = make_phantom(spec, 99);
    CHECK(a.intensities == b.intensities);
    CHECK(a.mask == b.mask);
    CHECK(make_phantom(spec, 100).intensities != a.intensities);
  }
}

TEST_CASE("phantom intensity ranges follow modality") {
  for (int id = 0; id < 4; ++id) {
    const PhantomSpec spec = default_spec(id, 0.05);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const RawSlice raw = make_phantom(spec, seed);
      REQUIRE(raw.intensities.size() == raw.height * raw.width);
      REQUIRE(raw.mask.size() == raw.height * raw.width);
      const auto [mn, mx] = std::minmax_element(raw.intensities.begin(), raw.intensities.end());
      if (raw.modality == Modality::CT) {
        CHECK(*mn >= -1000.0);
        CHECK(*mx <= 1000.0);
      } else {
        CHECK(*mn >= 0.0);
      }
    }
  }
}

TEST_CASE("noise level 0 gives piecewise-constant phantoms") {
  for (int id = 0; id < 4; ++id) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const RawSlice raw = make_phantom(default_spec(id, 0.0), seed);
      const std::set<double> distinct(raw.intensities.begin(), raw.intensities.end());
      CHECK(distinct.size() <= 8);
    }
  }
}

TEST_CASE("band detector fires on bands and not on ellipses") {
  const PhantomSpec bands = default_spec(1);
  const PhantomSpec ellipses = default_spec(0);
  REQUIRE(bands.family == GeometryFamily::ParallelBands);
  REQUIRE(ellipses.family == GeometryFamily::NestedEllipses);
  int band_hits = 0, ellipse_hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto b = preprocess(make_phantom(bands, seed), bands.label, 32);
    const auto e = preprocess(make_phantom(ellipses, seed), ellipses.label, 32);
    REQUIRE(b);
    REQUIRE(e);
    band_hits += detect_bands(b->image());
    ellipse_hits += detect_bands(e->image());
  }
  CHECK(band_hits == 100);
  CHECK(ellipse_hits == 0);
}

TEST_CASE("ct_window examples") {
  const auto out = ct_window(ct_slice({-160, 40, 240, 500, -1000}), 40, 400);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == doctest::Approx(0.5));
  CHECK(out[2] == 1.0);
  CHECK(out[3] == 1.0);
  CHECK(out[4] == 0.0);
  CHECK_THROWS_AS(ct_window(mri_slice({1, 2})), ContractError);
  CHECK_THROWS_AS(ct_window(ct_slice({1}), 40, 0), ContractError);
}

TEST_CASE("ct_window is monotone non-decreasing") {
  std::vector<double> hu;
  for (double v = -1000; v <= 1000; v += 3.7) hu.push_back(v);
  const auto out = ct_window(ct_slice(hu));
  CHECK(std::is_sorted(out.begin(), out.end()));
}

TEST_CASE("mri_percentile_clip nearest-rank example") {
  std::vector<double> v(1000);
  std::iota(v.begin(), v.end(), 1.0);
  v.push_back(500.5);
  v.push_back(0.0);
  // The extra 500.5 makes 1001 non-zero values; floor(0.005 * 1001) = 5 still.
  RawSlice raw = mri_slice(v);
  std::vector<double> nz;
  for (double x : v) if (x != 0) nz.push_back(x);
  std::sort(nz.begin(), nz.end());
  const double lo = nz[5], hi = nz[nz.size() - 6];
  REQUIRE(lo == 6.0);
  REQUIRE(hi == 995.0);
  const auto out = mri_percentile_clip(raw, 0.005);
  CHECK(out[1000] == doctest::Approx((500.5 - 6.0) / 989.0));
  CHECK(out[1001] == 0.0);
  CHECK(out[0] == 0.0);    // 1 clipped up to p_low
  CHECK(out[999] == 1.0);  // 1000 clipped down to p_high

  std::vector<double> exact(1000);
  std::iota(exact.begin(), exact.end(), 1.0);
  const auto out2 = mri_percentile_clip(mri_slice(exact), 0.005);
  CHECK(out2[5] == 0.0);
  CHECK(out2[994] == 1.0);
  CHECK(out2[499] == doctest::Approx((500.0 - 6.0) / 989.0));
}

TEST_CASE("mri_percentile_clip degenerate and limiting cases") {
  const auto constant = mri_percentile_clip(mri_slice({0, 7, 7, 7}));
  CHECK(constant == std::vector<double>{0, 0, 0, 0});
  const auto minmax = mri_percentile_clip(mri_slice({0, 2, 4, 10}), 0.0);
  CHECK(minmax[0] == 0.0);
  CHECK(minmax[1] == 0.0);
  CHECK(minmax[2] == doctest::Approx(0.25));
  CHECK(minmax[3] == 1.0);
  CHECK_THROWS_AS(mri_percentile_clip(mri_slice({0, 0, 0})), DegenerateInputError);
  CHECK_THROWS_AS(mri_percentile_clip(ct_slice({1, 2})), ContractError);
  CHECK_THROWS_AS(mri_percentile_clip(mri_slice({1, 2}), 0.5), ContractError);
}

TEST_CASE("mri_percentile_clip is invariant to positive rescaling") {
  std::mt19937_64 rng(3);
  std::lognormal_distribution<double> dist(3.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(500);
    for (auto& x : v) x = (rng() % 5 == 0) ? 0.0 : dist(rng);
    std::vector<double> scaled = v;
    const double k = 0.01 + static_cast<double>(rng() % 1000);
    for (auto& x : scaled) x *= k;
    const auto a = mri_percentile_clip(mri_slice(v));
    const auto b = mri_percentile_clip(mri_slice(scaled));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("foreground_filter removes sub-threshold components") {
  RawSlice raw;
  raw.height = raw.width = 256;
  raw.modality = Modality::CT;
  raw.intensities.assign(256 * 256, 50.0);
  raw.mask.assign(256 * 256, 0);
  for (std::size_t r = 10; r < 30; ++r)
    for (std::size_t c = 10; c < 35; ++c) raw.mask[r * 256 + c] = 1;  // 500 px
  raw.mask[200 * 256 + 200] = raw.mask[200 * 256 + 201] = raw.mask[201 * 256 + 200] = 1;  // 3 px
  REQUIRE(oracle_component_sizes(raw.mask, 256, 256) == std::vector<std::size_t>{3, 500});

  const auto out = foreground_filter(raw);
  REQUIRE(out);
  CHECK(oracle_component_sizes(out->mask, 256, 256) == std::vector<std::size_t>{500});
  CHECK(out->intensities[200 * 256 + 200] == -1000.0);
  CHECK(out->intensities[10 * 256 + 10] == 50.0);

  RawSlice empty = raw;
  std::fill(empty.mask.begin(), empty.mask.end(), 0);
  CHECK_FALSE(foreground_filter(empty));

  RawSlice full = raw;
  std::fill(full.mask.begin(), full.mask.end(), 1);
  const auto same = foreground_filter(full);
  REQUIRE(same);
  CHECK(same->mask == full.mask);
  CHECK(same->intensities == full.intensities);
}

TEST_CASE("foreground_filter never enlarges the mask") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    RawSlice raw;
    raw.height = raw.width = 40;
    raw.modality = trial % 2 ? Modality::CT : Modality::MRI;
    raw.intensities.assign(1600, 1.0);
    raw.mask.resize(1600);
    const unsigned density = 2 + trial % 5;
    for (auto& m : raw.mask) m = (rng() % density) == 0;
    const auto out = foreground_filter(raw);
    const auto sizes = oracle_component_sizes(raw.mask, 40, 40);
    const bool any_kept = std::any_of(sizes.begin(), sizes.end(), [](std::size_t s) { return s >= 1.6; });
    REQUIRE(out.has_value() == any_kept);
    if (out) {
      for (std::size_t i = 0; i < 1600; ++i) CHECK(out->mask[i] <= raw.mask[i]);
    }
  }
}

TEST_CASE("resize_canonical examples") {
  const Image constant(7, 5, 0.3);
  for (std::size_t R : {1u, 3u, 8u, 32u}) {
    const Image out = resize_canonical(constant, R, ResizeKind::Bilinear);
    REQUIRE(out.height == R);
    for (double v : out.values) CHECK(v == doctest::Approx(0.3));
  }
  const Image two(2, 2, std::vector<double>{0, 0, 1, 1});
  CHECK(resize_canonical(two, 1, ResizeKind::Bilinear).values[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(resize_canonical(two, 0, ResizeKind::Bilinear), ContractError);

  // 2:1 downsampling averages 2x2 blocks exactly.
  std::mt19937_64 rng(5);
  Image big(8, 8);
  for (auto& v : big.values) v = static_cast<double>(rng() % 1000) / 999.0;
  const Image half = resize_canonical(big, 4, ResizeKind::Bilinear);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      const double avg =
          (big.at(2 * r, 2 * c) + big.at(2 * r, 2 * c + 1) + big.at(2 * r + 1, 2 * c) + big.at(2 * r + 1, 2 * c + 1)) / 4;
      CHECK(half.at(r, c) == doctest::Approx(avg).epsilon(1e-12));
    }
}

TEST_CASE("resize_canonical range and nearest properties") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 1 + rng() % 20, w = 1 + rng() % 20, R = 1 + rng() % 40;
    Image img(h, w);
    for (auto& v : img.values) v = static_cast<double>(rng() % 7);
    const auto [mn, mx] = std::minmax_element(img.values.begin(), img.values.end());
    const Image bl = resize_canonical(img, R, ResizeKind::Bilinear);
    for (double v : bl.values) {
      CHECK(v >= *mn);
      CHECK(v <= *mx);
    }
    const std::set<double> present(img.values.begin(), img.values.end());
    const Image nn = resize_canonical(img, R, ResizeKind::Nearest);
    for (double v : nn.values) CHECK(present.count(v) == 1);
  }
}

TEST_CASE("build_corpus desk configuration") {
  const Corpus& corpus = desk_corpus();
  CHECK(corpus.size() == 2000);
  CHECK(corpus.train.size() == 1600);
  CHECK(corpus.val.size() == 200);
  CHECK(corpus.test.size() == 200);
  REQUIRE(corpus.records.size() == 2000);

  std::map<int, int> per_label;
  for (const auto& r : corpus.records) ++per_label[r.label];
  CHECK(per_label.size() == 4);
  for (auto [label, n] : per_label) CHECK(n == 500);

  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (const Slice& slice : corpus.split(s)) {
      REQUIRE(slice.height == 32);
      REQUIRE(slice.values.size() == 32 * 32);
      for (double v : slice.values) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
    }
  }
}

TEST_CASE("test slices pass their geometry detector") {
  const Corpus& corpus = desk_corpus();
  std::map<int, std::pair<int, int>> hits;
  for (const Slice& s : corpus.test) {
    auto& [ok, n] = hits[s.label.id];
    ok += matches_family(s.image(), family_for_label(s.label.id));
    ++n;
  }
  for (auto [label, counts] : hits) {
    INFO("label " << label);
    CHECK(static_cast<double>(counts.first) >= 0.99 * counts.second);
  }
}

TEST_CASE("detectors are mutually exclusive on the corpus") {
  const Corpus& corpus = desk_corpus();
  for (const Slice& s : corpus.train) {
    int matches = 0;
    for (auto f : {GeometryFamily::NestedEllipses, GeometryFamily::ParallelBands, GeometryFamily::RingWithCore,
                   GeometryFamily::LatticeOfBlobs}) {
      matches += matches_family(s.image(), f);
    }
    REQUIRE(matches <= 1);
  }
}

TEST_CASE("corpus generation is a pure function of its inputs") {
  const auto specs = default_specs(4);
  const Corpus a = build_corpus(specs, 20, 32, SplitFractions{}, 77, 1);
  const Corpus b = build_corpus(specs, 20, 32, SplitFractions{}, 77, 3);
  CHECK(manifest_hash(a) == manifest_hash(b));
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].values == b.train[i].values);
  const Corpus c = build_corpus(specs, 20, 32, SplitFractions{}, 78, 1);
  CHECK(manifest_hash(a) != manifest_hash(c));
  CHECK(manifest_hash(desk_corpus()) ==
        manifest_hash(build_corpus(specs, 500, 32, SplitFractions{}, 20240611, 1)));
}

TEST_CASE("build_corpus preconditions") {
  const auto specs = default_specs(2);
  CHECK_THROWS_AS(build_corpus(specs, 0, 32, SplitFractions{}, 1), ContractError);
  CHECK_THROWS_AS(build_corpus(specs, 10, 32, SplitFractions{0.5, 0.2, 0.2}, 1), ContractError);
  auto dup = specs;
  dup[1].label.id = dup[0].label.id;
  CHECK_THROWS_AS(build_corpus(dup, 10, 32, SplitFractions{}, 1), ContractError);
  auto bad_name = specs;
  bad_name[0].label.name = "../x";
  CHECK_THROWS_AS(build_corpus(bad_name, 10, 32, SplitFractions{}, 1), ContractError);
}

TEST_CASE("manifest format and corpus round trip") {
  const Corpus corpus = build_corpus(default_specs(4), 10, 32, SplitFractions{}, 5, 1);
  const std::string text = manifest_text(corpus);
  CHECK(text.rfind("MVCORPUS 1\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 41);
  CHECK(text.find("\"path\":\"train/ellipses_ct_00000.pgm\",\"label\":0,\"split\":\"train\",\"seed\":") !=
        std::string::npos);

  const auto dir = std::filesystem::temp_directory_path() / "nextscale_corpus_roundtrip";
  std::filesystem::remove_all(dir);
  write_corpus(corpus, dir);
  const Corpus loaded = load_corpus(dir);
  CHECK(manifest_hash(loaded) == manifest_hash(corpus));
  REQUIRE(loaded.size() == corpus.size());
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (std::size_t i = 0; i < corpus.split(s).size(); ++i) {
      CHECK(loaded.split(s)[i].values == corpus.split(s)[i].values);
      CHECK(loaded.split(s)[i].label.name == corpus.split(s)[i].label.name);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("pgm encoding quantizes by round(v * 255)") {
  const Image img(1, 4, std::vector<double>{0.0, 0.5, 1.0, 1.7});
  const auto bytes = encode_pgm(img);
  const std::string header = "P5\n4 1\n255\n";
  REQUIRE(bytes.size() == header.size() + 4);
  CHECK(std::equal(header.begin(), header.end(), bytes.begin()));
  CHECK(bytes[header.size() + 0] == 0);
  CHECK(bytes[header.size() + 1] == 128);
  CHECK(bytes[header.size() + 2] == 255);
  CHECK(bytes[header.size() + 3] == 255);
  const Image back = decode_pgm(bytes);
  CHECK(back.values[1] == doctest::Approx(128.0 / 255.0));
  const std::vector<std::uint8_t> bad = {'P', '2', '\n'};
  CHECK_THROWS_AS(decode_pgm(bad), ContractError);
}

TEST_CASE("keyed hashing is order-sensitive and stable") {
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(fnv1a64("") == 0xCBF29CE484222325ULL);
  CHECK(fnv1a64("a") == 0xAF63DC4C8601EC8CULL);
  const double u = keyed_uniform(9, {1});
  CHECK(u >= 0.0);
  CHECK(u < 1.0);
}
