#pragma once

// Checkpoint container: "AIDN", u32 version, u64 entry count, then per entry
// u64 name length + UTF-8 bytes, u64 rank + u64 extents, f64 values.
// Everything little-endian.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/io/binary.hpp"
#include "aidnet/volgrid/tensor.hpp"

namespace aidnet::vg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_checkpoint(std::ostream& os, const NamedTensors& entries) {
  os.write("AIDN", 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_u64(os, entries.size());
  for (const auto& [name, t] : entries) {
    io::write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_u64(os, t.rank());
    for (std::size_t e : t.shape()) io::write_u64(os, e);
    for (double v : t.data()) io::write_f64(os, v);
  }
}

/// Writes to a sibling temp file and renames it over `path`.
inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, entries);
    os.flush();
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline NamedTensors read_checkpoint(std::istream& is) {
  io::expect_magic(is, "AIDN");
  const auto version = io::read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = io::read_u64(is, "entry count");
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = io::read_u64(is, "name length");
    if (len > 4096) throw DataError("implausible tensor name length");
    std::string name(len, '\0');
    io::read_exact(is, name.data(), len, "tensor name");
    const auto rank = io::read_u64(is, "rank");
    if (rank == 0 || rank > 8) throw DataError("implausible rank for " + name);
    Shape shape(rank);
    for (auto& e : shape) e = io::read_u64(is, "extent");
    std::vector<double> data(numel_of(shape));
    for (auto& v : data) v = io::read_f64(is, "tensor data");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace aidnet::vg
