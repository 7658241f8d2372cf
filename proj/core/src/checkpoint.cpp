#include "nextscale/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "nextscale/error.hpp"

namespace nextscale {

namespace {

constexpr char kMagic[6] = {'M', 'V', 'C', 'K', 'P', 'T'};

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

template <class U>
U get_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  require(bytes.size() >= pos && bytes.size() - pos >= sizeof(U), "binary read past end of data");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(bytes[pos + i]) << (8 * i);
  }
  pos += sizeof(U);
  return v;
}

}  // namespace

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) { put_le(out, v); }
std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  return get_le<std::uint32_t>(bytes, pos);
}
std::uint64_t get_u64(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  return get_le<std::uint64_t>(bytes, pos);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw ContractError("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
      throw std::runtime_error("write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

void Checkpoint::add(std::string name, Shape shape, std::vector<float> data) {
  require(numel(shape) == data.size(), "checkpoint: section '" + name + "' shape/data mismatch");
  require(!has(name), "checkpoint: duplicate section '" + name + "'");
  sections.push_back(CheckpointSection{std::move(name), std::move(shape), std::move(data)});
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name == name) return true;
  }
  return false;
}

const CheckpointSection& Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name == name) return s;
  }
  throw ContractError("checkpoint: missing section '" + name + "'");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["kind"] = ckpt.kind;
  header["config"] = nlohmann::ordered_json::parse(ckpt.config_json);
  header["metadata"] = nlohmann::ordered_json::parse(ckpt.metadata_json);
  header["sections"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& s : ckpt.sections) {
    header["sections"].push_back({{"name", s.name}, {"shape", s.shape}, {"offset", offset}});
    offset += s.data.size() * sizeof(float);
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, Checkpoint::kVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& s : ckpt.sections) {
    for (float f : s.data) {
      put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= sizeof(kMagic) && std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
          "checkpoint: bad magic (not an MVCKPT file)");
  std::size_t pos = sizeof(kMagic);
  const std::uint32_t version = get_u32(bytes, pos);
  require(version == Checkpoint::kVersion, "checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t header_len = get_u64(bytes, pos);
  require(bytes.size() - pos >= header_len, "checkpoint: truncated header");
  const auto header = nlohmann::ordered_json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
  pos += header_len;
  const std::size_t blob_start = pos;

  Checkpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.config_json = header.at("config").dump();
  ckpt.metadata_json = header.at("metadata").dump();
  for (const auto& s : header.at("sections")) {
    const Shape shape = s.at("shape").get<Shape>();
    const std::uint64_t offset = s.at("offset").get<std::uint64_t>();
    const std::size_t n = numel(shape);
    require(offset <= bytes.size() - blob_start && (bytes.size() - blob_start - offset) / sizeof(float) >= n,
            "checkpoint: section '" + s.at("name").get<std::string>() + "' extends past end of file");
    std::vector<float> data(n);
    std::size_t p = blob_start + offset;
    for (auto& f : data) {
      f = std::bit_cast<float>(get_u32(bytes, p));
    }
    ckpt.add(s.at("name").get<std::string>(), shape, std::move(data));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace nextscale
