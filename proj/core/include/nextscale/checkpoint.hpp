#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nextscale/tensor.hpp"

namespace nextscale {

// MVCKPT layout:
//   "MVCKPT" | u32 version | u64 header length | JSON header | float32 LE blobs
// The header holds {"kind", "config", "metadata", "sections": [{name, shape,
// offset}]} where offset is in bytes from the start of the blob area.

struct CheckpointSection {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  std::string config_json = "{}";
  std::string metadata_json = "{}";
  std::vector<CheckpointSection> sections;

  void add(std::string name, Shape shape, std::vector<float> data);
  template <class T>
  void add(std::string name, const Tensor<T>& t) {
    add(std::move(name), t.shape, std::vector<float>(t.data.begin(), t.data.end()));
  }
  [[nodiscard]] bool has(const std::string& name) const;
  [[nodiscard]] const CheckpointSection& section(const std::string& name) const;
  /// Copies a section into `out`, requiring an exact shape match.
  template <class T>
  void load_into(const std::string& name, Tensor<T>& out) const {
    const auto& s = section(name);
    require(s.shape == out.shape, "checkpoint: section '" + name + "' has shape " + shape_str(s.shape) +
                                      ", expected " + shape_str(out.shape));
    std::copy(s.data.begin(), s.data.end(), out.data.begin());
  }
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and renames, so a crash never leaves a
/// truncated checkpoint behind.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Shared little-endian helpers for the binary formats.
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& pos);
std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t& pos);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace nextscale
