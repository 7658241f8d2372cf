#include "nextscale/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "nextscale/error.hpp"

namespace nextscale {

Image::Image(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
  require(values.size() == h * w, "image: value count does not match extents");
}

std::uint8_t quantize_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> encode_pgm(const Image& image) {
  require(image.height > 0 && image.width > 0, "pgm: empty image");
  const std::string header =
      "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + image.values.size());
  for (double v : image.values) {
    out.push_back(quantize_u8(v));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_pgm(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("pgm: cannot open " + path.string() + " for writing");
  }
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) {
    throw std::runtime_error("pgm: write failed for " + path.string());
  }
}

namespace {

// Header tokens are separated by whitespace; '#' starts a comment to end of line.
std::size_t next_header_int(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::size_t value = 0;
  std::size_t digits = 0;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    value = value * 10 + (bytes[pos] - '0');
    ++pos;
    if (++digits > 9) throw ContractError("pgm: header value too large");
  }
  if (digits == 0) throw ContractError("pgm: malformed header");
  return value;
}

}  // namespace

Image decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw ContractError("pgm: not a binary P5 file");
  }
  std::size_t pos = 2;
  const std::size_t width = next_header_int(bytes, pos);
  const std::size_t height = next_header_int(bytes, pos);
  const std::size_t maxval = next_header_int(bytes, pos);
  if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
    throw ContractError("pgm: unsupported extents or maxval");
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw ContractError("pgm: malformed header");
  }
  ++pos;
  if (bytes.size() - pos < width * height) {
    throw ContractError("pgm: truncated pixel data");
  }
  Image image(height, width);
  for (std::size_t i = 0; i < width * height; ++i) {
    image.values[i] = static_cast<double>(bytes[pos + i]) / static_cast<double>(maxval);
  }
  return image;
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("pgm: cannot open " + path.string());
  }
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_pgm(bytes);
}

}  // namespace nextscale
