#pragma once

// CT normalization into the two-channel network input:
//   lung_fill -> crop_to_lungs -> {window_clamp, hu_mask_channel} -> resample

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/preproc/volume.hpp"

namespace aidnet::preproc {

struct PreprocConfig {
  double fill_hu = -200.0;
  double window_lo = -200.0;
  double window_hi = 600.0;
  double mask_threshold_hu = 130.0;
  Extents target_shape{48, 32, 16};

  void validate() const {
    if (!(window_lo < window_hi)) throw ShapeError("window_lo must be below window_hi");
    if (!(mask_threshold_hu > window_lo && mask_threshold_hu < window_hi)) {
      throw ShapeError("mask threshold must lie inside the intensity window");
    }
    for (std::size_t e : target_shape) {
      if (e == 0) throw ShapeError("target shape extents must be >= 1");
    }
  }
};

inline bool is_set(double v) { return v > 0.5; }

/// Per axial slice, the 2D convex hull of the lung voxel centres, rasterized:
/// a voxel is inside when its centre lies inside or on the hull polygon.
inline Volume convex_hull_mask(const Volume& lung_mask) {
  using Pt = std::array<std::int64_t, 2>;
  const auto [D, H, W] = lung_mask.shape();
  Volume hull(lung_mask.shape(), lung_mask.spacing(), 0.0);
  auto cross = [](const Pt& o, const Pt& a, const Pt& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  std::vector<Pt> pts;
  for (std::size_t z = 0; z < D; ++z) {
    pts.clear();
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (is_set(lung_mask.at(z, y, x)))
          pts.push_back({static_cast<std::int64_t>(y), static_cast<std::int64_t>(x)});
    if (pts.empty()) continue;

    // Monotone chain; points are already sorted by (y, x).
    std::vector<Pt> poly(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
      while (k >= 2 && cross(poly[k - 2], poly[k - 1], p) <= 0) --k;
      poly[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
      while (k >= lower && cross(poly[k - 2], poly[k - 1], pts[i]) <= 0) --k;
      poly[k++] = pts[i];
    }
    poly.resize(pts.size() == 1 ? 1 : k - 1);

    std::int64_t y0 = pts.front()[0], y1 = pts.back()[0], x0 = W, x1 = 0;
    for (const auto& p : pts) {
      x0 = std::min(x0, p[1]);
      x1 = std::max(x1, p[1]);
    }
    for (std::int64_t y = y0; y <= y1; ++y) {
      for (std::int64_t x = x0; x <= x1; ++x) {
        const Pt q{y, x};
        bool inside = true;
        if (poly.size() == 1) {
          inside = q == poly[0];
        } else if (poly.size() == 2) {
          inside = cross(poly[0], poly[1], q) == 0 &&
                   std::min(poly[0][0], poly[1][0]) <= y && y <= std::max(poly[0][0], poly[1][0]) &&
                   std::min(poly[0][1], poly[1][1]) <= x && x <= std::max(poly[0][1], poly[1][1]);
        } else {
          for (std::size_t i = 0; i < poly.size() && inside; ++i) {
            inside = cross(poly[i], poly[(i + 1) % poly.size()], q) >= 0;
          }
        }
        if (inside) hull.at(z, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.0;
      }
    }
  }
  return hull;
}

/// Sets lung voxels and everything outside the per-slice lung hull to fill_hu.
inline Volume lung_fill(const Volume& ct, const Volume& lung_mask, const PreprocConfig& cfg = {}) {
  if (!ct.same_grid(lung_mask)) {
    throw ShapeError("lung_fill: CT " + extents_str(ct.shape()) + " vs lung mask " +
                     extents_str(lung_mask.shape()));
  }
  const Volume hull = convex_hull_mask(lung_mask);
  Volume out = ct;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (is_set(lung_mask.values()[i]) || !is_set(hull.values()[i])) out.values()[i] = cfg.fill_hu;
  }
  return out;
}

struct CropBox {
  Extents offset{0, 0, 0};
  Extents extent{0, 0, 0};
};

inline Volume crop(const Volume& v, const CropBox& box) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (box.extent[a] == 0 || box.offset[a] + box.extent[a] > v.shape()[a]) {
      throw ShapeError("crop box outside volume " + extents_str(v.shape()));
    }
  }
  Volume out(box.extent, v.spacing(), 0.0);
  for (std::size_t z = 0; z < box.extent[0]; ++z)
    for (std::size_t y = 0; y < box.extent[1]; ++y)
      for (std::size_t x = 0; x < box.extent[2]; ++x)
        out.at(z, y, x) = v.at(z + box.offset[0], y + box.offset[1], x + box.offset[2]);
  return out;
}

/// Tight bounding box of the lung voxels (zero margin).
inline CropBox lung_bounding_box(const Volume& lung_mask) {
  const auto& s = lung_mask.shape();
  Extents lo{s[0], s[1], s[2]}, hi{0, 0, 0};
  bool any = false;
  for (std::size_t z = 0; z < s[0]; ++z)
    for (std::size_t y = 0; y < s[1]; ++y)
      for (std::size_t x = 0; x < s[2]; ++x)
        if (is_set(lung_mask.at(z, y, x))) {
          any = true;
          const Extents p{z, y, x};
          for (std::size_t a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
          }
        }
  if (!any) throw DataError("crop_to_lungs: lung mask is empty");
  return {lo, {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}};
}

struct Cropped {
  Volume volume;
  CropBox box;
};

inline Cropped crop_to_lungs(const Volume& ct, const Volume& lung_mask) {
  if (!ct.same_grid(lung_mask)) throw ShapeError("crop_to_lungs: CT and lung mask differ in shape");
  const CropBox box = lung_bounding_box(lung_mask);
  return {crop(ct, box), box};
}

/// Clamp to [window_lo, window_hi] and rescale affinely to [0, 1].
inline Volume window_clamp(const Volume& v, const PreprocConfig& cfg = {}) {
  Volume out = v;
  const double span = cfg.window_hi - cfg.window_lo;
  for (double& x : out.values()) x = (std::clamp(x, cfg.window_lo, cfg.window_hi) - cfg.window_lo) / span;
  return out;
}

/// 1 where HU > threshold (strict), else 0. Expects raw HU.
inline Volume hu_mask_channel(const Volume& v, const PreprocConfig& cfg = {}) {
  Volume out = v;
  for (double& x : out.values()) x = x > cfg.mask_threshold_hu ? 1.0 : 0.0;
  return out;
}

enum class Interp { Trilinear, Nearest };

namespace detail {

// Half-pixel-centre source coordinate for each destination index.
inline std::vector<double> source_coords(std::size_t src, std::size_t dst) {
  std::vector<double> c(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    c[i] = std::clamp((static_cast<double>(i) + 0.5) * ratio - 0.5, 0.0,
                      static_cast<double>(src - 1));
  }
  return c;
}

inline std::vector<std::size_t> nearest_index(std::size_t src, std::size_t dst) {
  std::vector<std::size_t> idx(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    idx[i] = std::min(src - 1, static_cast<std::size_t>((static_cast<double>(i) + 0.5) * ratio));
  }
  return idx;
}

}  // namespace detail

/// Resize to `target`; trilinear with half-pixel centres (edge-clamped) or
/// nearest neighbour for binary volumes.
inline Volume resample(const Volume& v, Extents target, Interp interp = Interp::Trilinear) {
  for (std::size_t e : target) {
    if (e == 0) throw ShapeError("resample: target extents must be >= 1");
  }
  const auto& s = v.shape();
  Spacing spacing{};
  for (std::size_t a = 0; a < 3; ++a) {
    spacing[a] = v.spacing()[a] * static_cast<double>(s[a]) / static_cast<double>(target[a]);
  }
  Volume out(target, spacing, 0.0);
  if (interp == Interp::Nearest) {
    const auto iz = detail::nearest_index(s[0], target[0]);
    const auto iy = detail::nearest_index(s[1], target[1]);
    const auto ix = detail::nearest_index(s[2], target[2]);
    for (std::size_t z = 0; z < target[0]; ++z)
      for (std::size_t y = 0; y < target[1]; ++y)
        for (std::size_t x = 0; x < target[2]; ++x) out.at(z, y, x) = v.at(iz[z], iy[y], ix[x]);
    return out;
  }
  const auto cz = detail::source_coords(s[0], target[0]);
  const auto cy = detail::source_coords(s[1], target[1]);
  const auto cx = detail::source_coords(s[2], target[2]);
  auto split = [](double c, std::size_t n) {
    const auto i0 = static_cast<std::size_t>(std::floor(c));
    return std::tuple{i0, std::min(i0 + 1, n - 1), c - static_cast<double>(i0)};
  };
  for (std::size_t z = 0; z < target[0]; ++z) {
    const auto [z0, z1, fz] = split(cz[z], s[0]);
    for (std::size_t y = 0; y < target[1]; ++y) {
      const auto [y0, y1, fy] = split(cy[y], s[1]);
      for (std::size_t x = 0; x < target[2]; ++x) {
        const auto [x0, x1, fx] = split(cx[x], s[2]);
        const double c00 = v.at(z0, y0, x0) * (1 - fx) + v.at(z0, y0, x1) * fx;
        const double c01 = v.at(z0, y1, x0) * (1 - fx) + v.at(z0, y1, x1) * fx;
        const double c10 = v.at(z1, y0, x0) * (1 - fx) + v.at(z1, y0, x1) * fx;
        const double c11 = v.at(z1, y1, x0) * (1 - fx) + v.at(z1, y1, x1) * fx;
        const double c0 = c00 * (1 - fy) + c01 * fy;
        const double c1 = c10 * (1 - fy) + c11 * fy;
        out.at(z, y, x) = c0 * (1 - fz) + c1 * fz;
      }
    }
  }
  return out;
}

struct Preprocessed {
  Volume ct;       // windowed, rescaled to [0, 1]
  Volume hu_mask;  // {0, 1}
  CropBox box;     // crop in source voxel coordinates
};

inline Preprocessed preprocess(const Volume& ct, const Volume& lung_mask,
                               const PreprocConfig& cfg = {}) {
  cfg.validate();
  const Volume filled = lung_fill(ct, lung_mask, cfg);
  const auto [cropped, box] = crop_to_lungs(filled, lung_mask);
  return {resample(window_clamp(cropped, cfg), cfg.target_shape, Interp::Trilinear),
          resample(hu_mask_channel(cropped, cfg), cfg.target_shape, Interp::Nearest), box};
}

/// Maps a binary volume on the source grid (e.g. a lesion mask) onto the
/// network input grid using the same crop and nearest-neighbour resampling.
inline Volume carry_mask(const Volume& mask, const CropBox& box, Extents target) {
  return resample(crop(mask, box), target, Interp::Nearest);
}

/// Channel-major [2, D, H, W] values for the network.
inline std::vector<double> stack_channels(const Volume& ct, const Volume& hu_mask) {
  if (!ct.same_grid(hu_mask)) throw ShapeError("stack_channels: channel grids differ");
  std::vector<double> out(ct.values());
  out.insert(out.end(), hu_mask.values().begin(), hu_mask.values().end());
  return out;
}

}  // namespace aidnet::preproc
