#pragma once

// Volume: a D x H x W grid of doubles (W fastest) with voxel spacing in mm.
// Axis 0 is the axial slice index.
//
// .vgrid container: "VGRD", u32 version, u64 D, H, W, f64 spacing[3], then
// D*H*W f64 values; everything little-endian.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/io/binary.hpp"

namespace aidnet::preproc {

using Extents = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

inline std::string extents_str(const Extents& e) {
  return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

class Volume {
 public:
  Volume() = default;

  Volume(Extents shape, Spacing spacing, double fill = 0.0)
      : Volume(shape, spacing, std::vector<double>(shape[0] * shape[1] * shape[2], fill)) {}

  Volume(Extents shape, Spacing spacing, std::vector<double> values)
      : shape_(shape), spacing_(spacing), values_(std::move(values)) {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("volume extent must be positive, got " + extents_str(shape_));
    }
    for (double s : spacing_) {
      if (!(s > 0.0)) throw ShapeError("voxel spacing must be positive");
    }
    if (values_.size() != shape_[0] * shape_[1] * shape_[2]) {
      throw ShapeError("volume " + extents_str(shape_) + " does not match " +
                       std::to_string(values_.size()) + " values");
    }
  }

  const Extents& shape() const { return shape_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return values_.size(); }
  std::size_t slice_size() const { return shape_[1] * shape_[2]; }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * shape_[1] + y) * shape_[2] + x;
  }
  double& at(std::size_t z, std::size_t y, std::size_t x) { return values_[index(z, y, x)]; }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return values_[index(z, y, x)]; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool same_grid(const Volume& o) const { return shape_ == o.shape_; }

 private:
  Extents shape_{0, 0, 0};
  Spacing spacing_{1.0, 1.0, 1.0};
  std::vector<double> values_;
};

inline constexpr std::uint32_t kVgridVersion = 1;

inline void write_vgrid(std::ostream& os, const Volume& v) {
  os.write("VGRD", 4);
  io::write_u32(os, kVgridVersion);
  for (std::size_t e : v.shape()) io::write_u64(os, e);
  for (double s : v.spacing()) io::write_f64(os, s);
  for (double x : v.values()) io::write_f64(os, x);
}

inline Volume read_vgrid(std::istream& is) {
  io::expect_magic(is, "VGRD");
  const auto version = io::read_u32(is, "vgrid version");
  if (version != kVgridVersion) {
    throw DataError("unsupported .vgrid version " + std::to_string(version));
  }
  Extents shape{};
  for (auto& e : shape) e = io::read_u64(is, "vgrid extent");
  if (shape[0] * shape[1] * shape[2] > (std::size_t{1} << 31)) {
    throw DataError("implausible .vgrid extents " + extents_str(shape));
  }
  Spacing spacing{};
  for (auto& s : spacing) s = io::read_f64(is, "vgrid spacing");
  std::vector<double> values(shape[0] * shape[1] * shape[2]);
  for (auto& x : values) x = io::read_f64(is, "vgrid values");
  try {
    return Volume(shape, spacing, std::move(values));
  } catch (const ShapeError& e) {
    throw DataError(std::string("invalid .vgrid header: ") + e.what());
  }
}

inline void save_vgrid(const std::filesystem::path& path, const Volume& v) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_vgrid(os, v);
  if (!os) throw DataError("write failed for " + path.string());
}

inline Volume load_vgrid(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open volume " + path.string());
  return read_vgrid(is);
}

}  // namespace aidnet::preproc
