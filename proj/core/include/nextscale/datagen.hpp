#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nextscale/image.hpp"

namespace nextscale {

enum class Modality { CT, MRI };

enum class GeometryFamily { NestedEllipses, ParallelBands, RingWithCore, LatticeOfBlobs };

const char* family_name(GeometryFamily family);
const char* modality_name(Modality modality);

struct DatasetLabel {
  int id = 0;
  std::string name;
};

/// Family and modality are fixed by the label id: id % 4 selects the family
/// (ellipses, bands, ring, lattice) and families alternate CT / MRI.
GeometryFamily family_for_label(int id);
Modality modality_for_family(GeometryFamily family);

struct PhantomSpec {
  DatasetLabel label;
  GeometryFamily family = GeometryFamily::NestedEllipses;
  double noise_level = 0.02;
  std::size_t native_size = 64;
  /// Probability of adding sub-threshold artifact specks to the mask.
  double artifact_rate = 0.5;
};

/// Spec for label `id` with its family derived from the id.
PhantomSpec default_spec(int id, double noise_level = 0.02);
std::vector<PhantomSpec> default_specs(int num_labels, double noise_level = 0.02);

struct RawSlice {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> intensities;
  std::vector<std::uint8_t> mask;
  Modality modality = Modality::CT;
};

struct Slice {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  DatasetLabel label;

  [[nodiscard]] Image image() const { return Image(height, width, values); }
};

/// CT phantoms are pseudo-HU in [-1000, 1000] with air at -1000; MRI phantoms
/// are non-negative with zero background and 1% heavy-tailed outliers.
RawSlice make_phantom(const PhantomSpec& spec, std::uint64_t seed);

std::vector<double> ct_window(const RawSlice& raw, double level = 40.0, double width = 400.0);

/// Nearest-rank bounds over the non-zero intensities: with n sorted values and
/// k = floor(fraction * n), p_low = v[k] and p_high = v[n - 1 - k].
std::vector<double> mri_percentile_clip(const RawSlice& raw, double fraction = 0.005);

/// Drops mask components (4-connected) smaller than 0.1% of the slice area and
/// resets their intensities to the modality background. nullopt if nothing
/// remains.
std::optional<RawSlice> foreground_filter(const RawSlice& raw);

enum class ResizeKind { Bilinear, Nearest };

Image resize_canonical(const Image& values, std::size_t R, ResizeKind kind);

/// filter -> window/clip -> bilinear resize -> 8-bit quantization. The result
/// is exactly what a PGM round trip of the slice yields.
std::optional<Slice> preprocess(const RawSlice& raw, const DatasetLabel& label, std::size_t R);

enum class Split { Train, Val, Test };
const char* split_name(Split split);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct CorpusRecord {
  std::string path;
  int label = 0;
  Split split = Split::Train;
  std::uint64_t seed = 0;
};

struct Corpus {
  std::vector<DatasetLabel> labels;
  std::vector<Slice> train;
  std::vector<Slice> val;
  std::vector<Slice> test;
  /// Parallel to train ++ val ++ test.
  std::vector<CorpusRecord> records;

  [[nodiscard]] const std::vector<Slice>& split(Split s) const;
  [[nodiscard]] std::size_t size() const { return train.size() + val.size() + test.size(); }
};

/// Per label: index i < round(train * n) goes to train, the next round(val * n)
/// to val, the rest to test. Each slice seed is derived from
/// (master_seed, label, index, attempt); attempts only advance when the
/// foreground filter rejects a phantom.
Corpus build_corpus(const std::vector<PhantomSpec>& specs, std::size_t per_label, std::size_t R,
                    const SplitFractions& split, std::uint64_t master_seed, unsigned threads = 1);

/// "MVCORPUS 1" header followed by one JSON object per line.
std::string manifest_text(const Corpus& corpus);
std::uint64_t manifest_hash(const Corpus& corpus);

/// Writes `manifest.mvcorpus` and one PGM per slice under `dir`.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

// Geometry detectors. Each takes a normalized slice; classify_geometry applies
// them in a fixed order so at most one family matches.

/// Mean within-row variance over total variance; near 0 for row-constant images.
double within_row_variance_fraction(const Image& image);
bool detect_bands(const Image& image);
std::optional<GeometryFamily> classify_geometry(const Image& image);
bool matches_family(const Image& image, GeometryFamily family);

}  // namespace nextscale
