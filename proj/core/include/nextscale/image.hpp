#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace nextscale {

/// Row-major single-channel image.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  Image(std::size_t h, std::size_t w, std::vector<double> v);

  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

/// round(v * 255) after clamping to [0, 1].
std::uint8_t quantize_u8(double v);

/// Binary PGM (P5, maxval 255). Values are clamped to [0, 1] and quantized.
void write_pgm(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_pgm(const Image& image);

/// Reads a P5 PGM with maxval <= 255; values are byte / maxval.
Image read_pgm(const std::filesystem::path& path);
Image decode_pgm(std::span<const std::uint8_t> bytes);

}  // namespace nextscale
