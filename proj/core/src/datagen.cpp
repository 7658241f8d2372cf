#include "nextscale/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <regex>
#include <set>
#include <sstream>

#include "json.hpp"
#include "nextscale/error.hpp"
#include "nextscale/log.hpp"
#include "nextscale/ops.hpp"
#include "nextscale/parallel.hpp"
#include "nextscale/rng.hpp"

namespace nextscale {

const char* family_name(GeometryFamily family) {
  switch (family) {
    case GeometryFamily::NestedEllipses: return "nested_ellipses";
    case GeometryFamily::ParallelBands: return "parallel_bands";
    case GeometryFamily::RingWithCore: return "ring_with_core";
    case GeometryFamily::LatticeOfBlobs: return "lattice_of_blobs";
  }
  return "?";
}

const char* modality_name(Modality modality) { return modality == Modality::CT ? "CT" : "MRI"; }

const char* split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

GeometryFamily family_for_label(int id) {
  require(id >= 0, "family_for_label: label id must be non-negative");
  static constexpr GeometryFamily order[] = {GeometryFamily::NestedEllipses, GeometryFamily::ParallelBands,
                                             GeometryFamily::RingWithCore, GeometryFamily::LatticeOfBlobs};
  return order[id % 4];
}

Modality modality_for_family(GeometryFamily family) {
  return (family == GeometryFamily::NestedEllipses || family == GeometryFamily::RingWithCore) ? Modality::CT
                                                                                               : Modality::MRI;
}

PhantomSpec default_spec(int id, double noise_level) {
  PhantomSpec spec;
  spec.family = family_for_label(id);
  spec.noise_level = noise_level;
  static constexpr const char* short_names[] = {"ellipses", "bands", "ring", "lattice"};
  std::string name = std::string(short_names[id % 4]) + "_" +
                     (modality_for_family(spec.family) == Modality::CT ? "ct" : "mri");
  if (id >= 4) {
    name += "_" + std::to_string(id);
  }
  spec.label = DatasetLabel{id, name};
  return spec;
}

std::vector<PhantomSpec> default_specs(int num_labels, double noise_level) {
  require(num_labels >= 1, "default_specs: need at least one label");
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < num_labels; ++i) {
    specs.push_back(default_spec(i, noise_level));
  }
  return specs;
}

namespace {

constexpr double kAirHU = -1000.0;

using Draw = SplitMixStream;

struct Canvas {
  std::size_t n;
  std::vector<double> v;
  std::vector<std::uint8_t> mask;
  // Normalized pixel-center coordinates in (-1, 1).
  [[nodiscard]] double coord(std::size_t i) const {
    return (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
  }
};

bool in_ellipse(double x, double y, double cx, double cy, double a, double b, double theta) {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = (c * dx + s * dy) / a;
  const double w = (-s * dx + c * dy) / b;
  return u * u + w * w <= 1.0;
}

// Returns the modality's intensity scale (HU window width for CT, tissue
// scale S for MRI) used to size the noise.
double paint_ellipses(Canvas& cv, Draw& d) {
  const double cx = d.uniform(-0.08, 0.08), cy = d.uniform(-0.08, 0.08);
  const double a = d.uniform(0.62, 0.82), b = d.uniform(0.48, 0.66);
  const double theta = d.uniform(0.0, std::numbers::pi);
  const double body = d.uniform(0.0, 40.0);
  const double k = d.uniform(0.35, 0.5);
  const double icx = cx + d.uniform(-0.1, 0.1) * a, icy = cy + d.uniform(-0.1, 0.1) * b;
  const double itheta = theta + d.uniform(-0.3, 0.3);
  const double inner = d.uniform(200.0, 280.0);
  for (std::size_t r = 0; r < cv.n; ++r) {
    for (std::size_t c = 0; c < cv.n; ++c) {
      const double x = cv.coord(c), y = cv.coord(r);
      double& px = cv.v[r * cv.n + c];
      px = kAirHU;
      if (in_ellipse(x, y, cx, cy, a, b, theta)) {
        px = body;
        cv.mask[r * cv.n + c] = 1;
        if (in_ellipse(x, y, icx, icy, k * a, k * b, itheta)) {
          px = inner;
        }
      }
    }
  }
  return 400.0;
}

double paint_bands(Canvas& cv, Draw& d) {
  const double s = d.uniform(400.0, 1200.0);
  const double top = d.uniform(-0.9, -0.75), bottom = d.uniform(0.75, 0.9);
  const int m = d.integer(4, 6);
  std::vector<double> edges(static_cast<std::size_t>(m) + 1);
  const double width = (bottom - top) / m;
  for (int i = 0; i <= m; ++i) {
    edges[static_cast<std::size_t>(i)] =
        top + i * width + ((i == 0 || i == m) ? 0.0 : d.uniform(-0.2, 0.2) * width);
  }
  const int phase = d.integer(0, 1);
  std::vector<double> levels(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    levels[static_cast<std::size_t>(i)] =
        ((i + phase) % 2 == 0) ? s * d.uniform(0.75, 1.0) : s * d.uniform(0.15, 0.3);
  }
  for (std::size_t r = 0; r < cv.n; ++r) {
    const double y = cv.coord(r);
    double value = 0.0;
    if (y >= top && y < bottom) {
      std::size_t band = 0;
      while (band + 1 < levels.size() && y >= edges[band + 1]) ++band;
      value = levels[band];
    }
    for (std::size_t c = 0; c < cv.n; ++c) {
      cv.v[r * cv.n + c] = value;
      cv.mask[r * cv.n + c] = value > 0.0 ? 1 : 0;
    }
  }
  return s;
}

double paint_ring(Canvas& cv, Draw& d) {
  const double cx = d.uniform(-0.05, 0.05), cy = d.uniform(-0.05, 0.05);
  const double ro = d.uniform(0.62, 0.78);
  const double ri = ro - d.uniform(0.12, 0.18);
  const double rc = d.uniform(0.18, 0.26);
  const double gap = d.uniform(-60.0, -20.0);
  const double ring = d.uniform(240.0, 320.0);
  const double core = d.uniform(160.0, 220.0);
  for (std::size_t r = 0; r < cv.n; ++r) {
    for (std::size_t c = 0; c < cv.n; ++c) {
      const double rad = std::hypot(cv.coord(c) - cx, cv.coord(r) - cy);
      double& px = cv.v[r * cv.n + c];
      px = kAirHU;
      if (rad <= ro) {
        cv.mask[r * cv.n + c] = 1;
        px = rad >= ri ? ring : (rad <= rc ? core : gap);
      }
    }
  }
  return 400.0;
}

double paint_lattice(Canvas& cv, Draw& d) {
  const double s = d.uniform(400.0, 1200.0);
  const double half = d.uniform(0.8, 0.9);
  const double body = s * d.uniform(0.15, 0.3);
  const double cx = d.uniform(-0.04, 0.04), cy = d.uniform(-0.04, 0.04);
  const double spacing = d.uniform(0.48, 0.56);
  const double radius = d.uniform(0.12, 0.16);
  const double blob = s * d.uniform(0.75, 1.0);
  for (std::size_t r = 0; r < cv.n; ++r) {
    for (std::size_t c = 0; c < cv.n; ++c) {
      const double x = cv.coord(c), y = cv.coord(r);
      double& px = cv.v[r * cv.n + c];
      px = 0.0;
      if (std::pow(std::abs(x) / half, 4) + std::pow(std::abs(y) / half, 4) > 1.0) {
        continue;
      }
      cv.mask[r * cv.n + c] = 1;
      px = body;
      for (int i = -1; i <= 1; ++i) {
        for (int j = -1; j <= 1; ++j) {
          if (std::hypot(x - (cx + j * spacing), y - (cy + i * spacing)) <= radius) {
            px = blob;
          }
        }
      }
    }
  }
  return s;
}

// Adds 2x2 specks to the mask away from the anatomy; they sit below the
// foreground filter's area threshold.
void add_specks(Canvas& cv, Draw& d, Modality modality, double scale) {
  const int count = d.integer(1, 3);
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const auto r0 = static_cast<std::size_t>(d.integer(1, static_cast<int>(cv.n) - 3));
      const auto c0 = static_cast<std::size_t>(d.integer(1, static_cast<int>(cv.n) - 3));
      bool clear = true;
      for (std::size_t r = r0 - 1; r <= r0 + 2 && clear; ++r) {
        for (std::size_t c = c0 - 1; c <= c0 + 2; ++c) {
          if (cv.mask[r * cv.n + c]) {
            clear = false;
            break;
          }
        }
      }
      if (!clear) continue;
      const double value = modality == Modality::CT ? 100.0 : 0.5 * scale;
      for (std::size_t r = r0; r < r0 + 2; ++r) {
        for (std::size_t c = c0; c < c0 + 2; ++c) {
          cv.v[r * cv.n + c] = value;
          cv.mask[r * cv.n + c] = 1;
        }
      }
      break;
    }
  }
}

double background_of(Modality modality) { return modality == Modality::CT ? kAirHU : 0.0; }

struct Components {
  std::vector<int> label;  // -1 for background
  std::vector<std::size_t> sizes;
};

Components label_components(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
  Components out;
  out.label.assign(h * w, -1);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!mask[start] || out.label[start] >= 0) continue;
    const int id = static_cast<int>(out.sizes.size());
    std::size_t size = 0;
    stack.push_back(start);
    out.label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t r = p / w, c = p % w;
      const auto visit = [&](std::size_t q) {
        if (mask[q] && out.label[q] < 0) {
          out.label[q] = id;
          stack.push_back(q);
        }
      };
      if (r > 0) visit(p - w);
      if (r + 1 < h) visit(p + w);
      if (c > 0) visit(p - 1);
      if (c + 1 < w) visit(p + 1);
    }
    out.sizes.push_back(size);
  }
  return out;
}

}  // namespace

RawSlice make_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  require(spec.native_size >= 8, "make_phantom: native size must be at least 8");
  require(spec.noise_level >= 0.0, "make_phantom: noise level must be non-negative");
  const std::size_t n = spec.native_size;
  Canvas cv{n, std::vector<double>(n * n, 0.0), std::vector<std::uint8_t>(n * n, 0)};
  Draw d(derive_seed(seed, {static_cast<std::uint64_t>(spec.family)}));
  double scale = 0.0;
  switch (spec.family) {
    case GeometryFamily::NestedEllipses: scale = paint_ellipses(cv, d); break;
    case GeometryFamily::ParallelBands: scale = paint_bands(cv, d); break;
    case GeometryFamily::RingWithCore: scale = paint_ring(cv, d); break;
    case GeometryFamily::LatticeOfBlobs: scale = paint_lattice(cv, d); break;
  }
  const Modality modality = modality_for_family(spec.family);
  if (d.uniform() < spec.artifact_rate) {
    add_specks(cv, d, modality, scale);
  }
  if (spec.noise_level > 0.0) {
    const double sigma = spec.noise_level * scale;
    for (std::size_t i = 0; i < n * n; ++i) {
      if (modality == Modality::CT) {
        cv.v[i] = std::clamp(cv.v[i] + sigma * d.normal(), -1000.0, 1000.0);
      } else if (cv.v[i] > 0.0) {
        double v = std::max(cv.v[i] + sigma * d.normal(), 1e-3 * scale);
        if (d.uniform() < 0.01) {
          v *= std::pow(1.0 - d.uniform(), -1.0 / 3.0);  // Pareto(alpha = 3) factor
        }
        cv.v[i] = v;
      }
    }
  }
  RawSlice raw;
  raw.height = n;
  raw.width = n;
  raw.intensities = std::move(cv.v);
  raw.mask = std::move(cv.mask);
  raw.modality = modality;
  return raw;
}

std::vector<double> ct_window(const RawSlice& raw, double level, double width) {
  require(raw.modality == Modality::CT, "ct_window: slice modality is not CT");
  require(width > 0.0, "ct_window: width must be positive");
  const double lo = level - width / 2.0;
  std::vector<double> out(raw.intensities.size());
  std::transform(raw.intensities.begin(), raw.intensities.end(), out.begin(),
                 [&](double v) { return std::clamp((v - lo) / width, 0.0, 1.0); });
  return out;
}

std::vector<double> mri_percentile_clip(const RawSlice& raw, double fraction) {
  require(raw.modality == Modality::MRI, "mri_percentile_clip: slice modality is not MRI");
  require(fraction >= 0.0 && fraction < 0.5, "mri_percentile_clip: fraction must be in [0, 0.5)");
  std::vector<double> nonzero;
  for (double v : raw.intensities) {
    require(v >= 0.0, "mri_percentile_clip: MRI intensities must be non-negative");
    if (v != 0.0) nonzero.push_back(v);
  }
  if (nonzero.empty()) {
    throw DegenerateInputError("mri_percentile_clip: slice has no non-zero intensities");
  }
  std::sort(nonzero.begin(), nonzero.end());
  const std::size_t n = nonzero.size();
  // The epsilon keeps e.g. 0.005 * 1000 from flooring to 4.
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  const double lo = nonzero[k];
  const double hi = nonzero[n - 1 - k];
  std::vector<double> out(raw.intensities.size(), 0.0);
  if (hi <= lo) {
    log_warn("mri_percentile_clip: degenerate intensity range; foreground mapped to 0");
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = raw.intensities[i];
    out[i] = v == 0.0 ? 0.0 : (std::clamp(v, lo, hi) - lo) / (hi - lo);
  }
  return out;
}

std::optional<RawSlice> foreground_filter(const RawSlice& raw) {
  const std::size_t area = raw.height * raw.width;
  require(raw.intensities.size() == area && raw.mask.size() == area, "foreground_filter: extents mismatch");
  const Components comps = label_components(raw.mask, raw.height, raw.width);
  const double threshold = 0.001 * static_cast<double>(area);
  RawSlice out = raw;
  bool any = false;
  for (std::size_t i = 0; i < area; ++i) {
    if (comps.label[i] < 0) continue;
    if (static_cast<double>(comps.sizes[static_cast<std::size_t>(comps.label[i])]) < threshold) {
      out.mask[i] = 0;
      out.intensities[i] = background_of(raw.modality);
    } else {
      any = true;
    }
  }
  if (!any) {
    return std::nullopt;
  }
  return out;
}

Image resize_canonical(const Image& values, std::size_t R, ResizeKind kind) {
  require(R > 0, "resize_canonical: R must be positive");
  require(values.height >= 1 && values.width >= 1 && values.values.size() == values.height * values.width,
          "resize_canonical: empty or malformed source");
  const std::size_t h = values.height, w = values.width;
  Image out(R, R);
  if (kind == ResizeKind::Nearest) {
    const auto src = [](std::size_t i, std::size_t in, std::size_t n) {
      return std::min(static_cast<std::size_t>((static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                                               static_cast<double>(n)),
                      in - 1);
    };
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < R; ++c) {
        out.at(r, c) = values.at(src(r, h, R), src(c, w, R));
      }
    }
    return out;
  }
  const std::vector<double> wy = bilinear_weights(h, R);
  const std::vector<double> wx = bilinear_weights(w, R);
  const auto [mn, mx] = std::minmax_element(values.values.begin(), values.values.end());
  std::vector<double> rows(R * w, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t k = 0; k < h; ++k) {
      const double a = wy[r * h + k];
      if (a == 0.0) continue;
      for (std::size_t c = 0; c < w; ++c) rows[r * w + c] += a * values.at(k, c);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < R; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < w; ++k) acc += wx[c * w + k] * rows[r * w + k];
      out.at(r, c) = std::clamp(acc, *mn, *mx);
    }
  }
  return out;
}

std::optional<Slice> preprocess(const RawSlice& raw, const DatasetLabel& label, std::size_t R) {
  const auto filtered = foreground_filter(raw);
  if (!filtered) {
    return std::nullopt;
  }
  std::vector<double> normalized =
      raw.modality == Modality::CT ? ct_window(*filtered) : mri_percentile_clip(*filtered);
  const Image resized = resize_canonical(Image(raw.height, raw.width, std::move(normalized)), R, ResizeKind::Bilinear);
  Slice slice;
  slice.height = R;
  slice.width = R;
  slice.label = label;
  slice.values.resize(resized.values.size());
  std::transform(resized.values.begin(), resized.values.end(), slice.values.begin(),
                 [](double v) { return quantize_u8(v) / 255.0; });
  return slice;
}

const std::vector<Slice>& Corpus::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return train;
}

namespace {

void validate_label_names(const std::vector<PhantomSpec>& specs) {
  static const std::regex name_re("[A-Za-z0-9_-]+");
  std::set<int> ids;
  for (const auto& s : specs) {
    require(s.label.id >= 0, "build_corpus: label ids must be non-negative");
    require(ids.insert(s.label.id).second, "build_corpus: duplicate label id " + std::to_string(s.label.id));
    require(std::regex_match(s.label.name, name_re),
            "build_corpus: label name '" + s.label.name + "' must match [A-Za-z0-9_-]+");
  }
}

std::string slice_path(Split split, const std::string& name, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return std::string(split_name(split)) + "/" + name + "_" + buf + ".pgm";
}

}  // namespace

Corpus build_corpus(const std::vector<PhantomSpec>& specs, std::size_t per_label, std::size_t R,
                    const SplitFractions& split, std::uint64_t master_seed, unsigned threads) {
  require(!specs.empty(), "build_corpus: no phantom specs");
  require(per_label > 0, "build_corpus: per_label must be positive");
  require(R > 0, "build_corpus: R must be positive");
  require(split.train >= 0 && split.val >= 0 && split.test >= 0 &&
              std::abs(split.train + split.val + split.test - 1.0) < 1e-9,
          "build_corpus: split fractions must be non-negative and sum to 1");
  validate_label_names(specs);

  constexpr int kMaxAttempts = 64;
  const std::size_t total = specs.size() * per_label;
  std::vector<Slice> slices(total);
  std::vector<std::uint64_t> seeds(total);
  parallel_for(total, threads, [&](std::size_t job) {
    const PhantomSpec& spec = specs[job / per_label];
    const std::size_t index = job % per_label;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const std::uint64_t seed =
          derive_seed(master_seed, {static_cast<std::uint64_t>(spec.label.id), index,
                                    static_cast<std::uint64_t>(attempt)});
      if (auto slice = preprocess(make_phantom(spec, seed), spec.label, R)) {
        slices[job] = std::move(*slice);
        seeds[job] = seed;
        return;
      }
    }
    throw DegenerateInputError("build_corpus: every phantom attempt was rejected for label " + spec.label.name);
  });

  const auto n_train = static_cast<std::size_t>(std::llround(split.train * static_cast<double>(per_label)));
  const auto n_val = std::min(per_label - std::min(n_train, per_label),
                              static_cast<std::size_t>(std::llround(split.val * static_cast<double>(per_label))));
  Corpus corpus;
  for (const auto& s : specs) corpus.labels.push_back(s.label);
  std::vector<CorpusRecord> records[3];
  for (std::size_t job = 0; job < total; ++job) {
    const std::size_t index = job % per_label;
    const Split which = index < n_train ? Split::Train : (index < n_train + n_val ? Split::Val : Split::Test);
    const Slice& slice = slices[job];
    records[static_cast<int>(which)].push_back(
        CorpusRecord{slice_path(which, slice.label.name, index), slice.label.id, which, seeds[job]});
    (which == Split::Train ? corpus.train : which == Split::Val ? corpus.val : corpus.test)
        .push_back(std::move(slices[job]));
  }
  for (auto& r : records) {
    corpus.records.insert(corpus.records.end(), r.begin(), r.end());
  }
  return corpus;
}

std::string manifest_text(const Corpus& corpus) {
  std::string out = "MVCORPUS 1\n";
  for (const auto& r : corpus.records) {
    nlohmann::ordered_json j;
    j["path"] = r.path;
    j["label"] = r.label;
    j["split"] = split_name(r.split);
    j["seed"] = r.seed;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::uint64_t manifest_hash(const Corpus& corpus) { return fnv1a64(manifest_text(corpus)); }

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    fs::create_directories(dir / split_name(s));
  }
  {
    std::ofstream f(dir / "manifest.mvcorpus", std::ios::binary);
    f << manifest_text(corpus);
    if (!f) throw std::runtime_error("write_corpus: cannot write manifest in " + dir.string());
  }
  {
    nlohmann::ordered_json labels = nlohmann::ordered_json::array();
    for (const auto& l : corpus.labels) {
      labels.push_back({{"id", l.id}, {"name", l.name}});
    }
    std::ofstream f(dir / "labels.json", std::ios::binary);
    f << labels.dump(2) << '\n';
  }
  std::size_t i = 0;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (const Slice& slice : corpus.split(s)) {
      write_pgm(dir / corpus.records.at(i++).path, slice.image());
    }
  }
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.mvcorpus", std::ios::binary);
  if (!f) throw ContractError("load_corpus: no manifest.mvcorpus in " + dir.string());
  std::string line;
  if (!std::getline(f, line) || line != "MVCORPUS 1") {
    throw ContractError("load_corpus: bad manifest header");
  }
  Corpus corpus;
  {
    std::ifstream lf(dir / "labels.json");
    if (!lf) throw ContractError("load_corpus: no labels.json in " + dir.string());
    for (const auto& l : nlohmann::json::parse(lf)) {
      corpus.labels.push_back(DatasetLabel{l.at("id").get<int>(), l.at("name").get<std::string>()});
    }
  }
  const auto find_label = [&](int id) {
    for (const auto& l : corpus.labels) {
      if (l.id == id) return l;
    }
    throw ContractError("load_corpus: manifest references unknown label " + std::to_string(id));
  };
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CorpusRecord r;
    r.path = j.at("path").get<std::string>();
    r.label = j.at("label").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    const std::string s = j.at("split").get<std::string>();
    r.split = s == "train" ? Split::Train : s == "val" ? Split::Val : s == "test" ? Split::Test
                                                                                  : throw ContractError("load_corpus: bad split " + s);
    const Image img = read_pgm(dir / r.path);
    Slice slice{img.height, img.width, img.values, find_label(r.label)};
    (r.split == Split::Train ? corpus.train : r.split == Split::Val ? corpus.val : corpus.test)
        .push_back(std::move(slice));
    corpus.records.push_back(std::move(r));
  }
  return corpus;
}

// ---- geometry detectors ----

double within_row_variance_fraction(const Image& image) {
  const std::size_t h = image.height, w = image.width;
  double mean = 0.0;
  for (double v : image.values) mean += v;
  mean /= static_cast<double>(h * w);
  double total = 0.0;
  for (double v : image.values) total += (v - mean) * (v - mean);
  total /= static_cast<double>(h * w);
  if (total < 1e-12) return 1.0;
  double within = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < w; ++c) m += image.at(r, c);
    m /= static_cast<double>(w);
    for (std::size_t c = 0; c < w; ++c) within += (image.at(r, c) - m) * (image.at(r, c) - m);
  }
  within /= static_cast<double>(h * w);
  return within / total;
}

namespace {

double variance(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

Image box_smooth(const Image& in) {
  Image out(in.height, in.width);
  const auto h = static_cast<long>(in.height), w = static_cast<long>(in.width);
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      double acc = 0.0;
      for (long dr = -1; dr <= 1; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          acc += in.at(static_cast<std::size_t>(std::clamp(r + dr, 0L, h - 1)),
                       static_cast<std::size_t>(std::clamp(c + dc, 0L, w - 1)));
        }
      }
      out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc / 9.0;
    }
  }
  return out;
}

struct Blob {
  std::size_t area = 0;
  std::size_t holes = 0;  // background pixels enclosed by this blob alone
  double cy = 0.0, cx = 0.0;
};

std::vector<Blob> bright_blobs(const Image& image) {
  const std::size_t h = image.height, w = image.width;
  const Image smooth = box_smooth(image);
  const double peak = *std::max_element(smooth.values.begin(), smooth.values.end());
  std::vector<std::uint8_t> mask(h * w);
  for (std::size_t i = 0; i < h * w; ++i) mask[i] = smooth.values[i] > 0.6 * peak ? 1 : 0;
  const Components comps = label_components(mask, h, w);
  const auto min_area = std::max<std::size_t>(4, (h * w) / 250);
  std::vector<Blob> blobs;
  for (std::size_t id = 0; id < comps.sizes.size(); ++id) {
    if (comps.sizes[id] < min_area) continue;
    Blob b;
    std::vector<std::uint8_t> outside(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      if (comps.label[i] == static_cast<int>(id)) {
        ++b.area;
        b.cy += static_cast<double>(i / w);
        b.cx += static_cast<double>(i % w);
      } else {
        outside[i] = 1;
      }
    }
    b.cy /= static_cast<double>(b.area);
    b.cx /= static_cast<double>(b.area);
    // Holes: non-blob pixels not 4-connected to the border.
    const Components bg = label_components(outside, h, w);
    std::vector<std::uint8_t> touches(bg.sizes.size(), 0);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        if ((r == 0 || c == 0 || r + 1 == h || c + 1 == w) && bg.label[r * w + c] >= 0) {
          touches[static_cast<std::size_t>(bg.label[r * w + c])] = 1;
        }
      }
    }
    for (std::size_t k = 0; k < bg.sizes.size(); ++k) {
      if (!touches[k]) b.holes += bg.sizes[k];
    }
    blobs.push_back(b);
  }
  return blobs;
}

}  // namespace

bool detect_bands(const Image& image) {
  return variance(image.values) > 0.003 && within_row_variance_fraction(image) < 0.25;
}

std::optional<GeometryFamily> classify_geometry(const Image& image) {
  require(image.height >= 4 && image.width >= 4 && image.values.size() == image.height * image.width,
          "classify_geometry: image too small or malformed");
  if (detect_bands(image)) {
    return GeometryFamily::ParallelBands;
  }
  if (variance(image.values) <= 0.003) {
    return std::nullopt;
  }
  const std::vector<Blob> blobs = bright_blobs(image);
  const double extent = static_cast<double>(std::min(image.height, image.width));
  if (blobs.size() >= 5) {
    return GeometryFamily::LatticeOfBlobs;
  }
  if (blobs.size() == 2) {
    const double dist = std::hypot(blobs[0].cy - blobs[1].cy, blobs[0].cx - blobs[1].cx);
    if (dist <= 0.12 * extent) return GeometryFamily::RingWithCore;
    return std::nullopt;
  }
  if (blobs.size() == 1) {
    const Blob& b = blobs[0];
    const double filled = static_cast<double>(b.area + b.holes);
    if (static_cast<double>(b.holes) >= 0.1 * filled) return GeometryFamily::RingWithCore;
    if (static_cast<double>(b.holes) < 0.05 * filled && filled >= 0.02 * extent * extent) {
      return GeometryFamily::NestedEllipses;
    }
  }
  return std::nullopt;
}

bool matches_family(const Image& image, GeometryFamily family) { return classify_geometry(image) == family; }

}  // namespace nextscale
