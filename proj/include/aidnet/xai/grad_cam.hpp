#pragma once

// 3D Grad-CAM on the pre-GAP maps A (block-4 output):
//   alpha_k = mean over positions of d logit_c / d A_k
//   map     = relu(sum_k alpha_k A_k), trilinearly resized to the input grid
//             and divided by its maximum.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/net/model.hpp"
#include "aidnet/preproc/pipeline.hpp"
#include "aidnet/preproc/volume.hpp"

namespace aidnet::xai {

using preproc::Extents;
using preproc::Spacing;
using preproc::Volume;

struct GradCamResult {
  Volume heatmap;                  // input grid, in [0, 1]
  Volume coarse;                   // relu(sum_k alpha_k A_k) before resizing
  std::vector<double> raw_weights; // alpha_k per channel
  int target_class = 0;
  std::vector<double> logits;
};

/// `x` is a single input [1, 2, D, H, W]. Parameters are not modified.
inline GradCamResult grad_cam(const net::AidNetParams& params, const vg::Tensor& x, int target_class,
                              const Spacing& spacing = {1.0, 1.0, 1.0}) {
  if (target_class < 0 || target_class >= static_cast<int>(net::kNumClasses)) {
    throw ShapeError("grad_cam: target class " + std::to_string(target_class) + " out of range");
  }
  if (x.rank() != 5 || x.dim(0) != 1) {
    throw ShapeError("grad_cam: expected one input [1, 2, D, H, W], got " + vg::shape_str(x.shape()));
  }
  net::AidNetParams frozen = params.clone();
  for (auto& [name, t] : frozen.named()) t.set_requires_grad(false);
  net::Features feats;
  {
    vg::NoGradGuard ng;
    feats = net::backbone(frozen, x);
  }
  vg::Tensor maps = feats.maps.detach();
  maps.set_requires_grad(true);
  const net::Forward f = net::forward_from_maps(frozen, feats.x_l.detach(), maps);
  const std::size_t c = static_cast<std::size_t>(target_class);
  vg::pick(f.logits, std::vector<std::size_t>{c}).backward();

  const std::size_t K = maps.dim(1);
  const Extents coarse_shape{maps.dim(2), maps.dim(3), maps.dim(4)};
  const std::size_t P = coarse_shape[0] * coarse_shape[1] * coarse_shape[2];
  GradCamResult r;
  r.target_class = target_class;
  r.logits.assign(f.logits.data().begin(), f.logits.data().end());
  r.raw_weights.assign(K, 0.0);
  const auto g = maps.grad();
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < P; ++i) acc += g[k * P + i];
    r.raw_weights[k] = acc / static_cast<double>(P);
  }
  std::vector<double> cam(P, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < P; ++i) cam[i] += r.raw_weights[k] * maps[k * P + i];
  }
  for (double& v : cam) v = std::max(0.0, v);

  const Extents in_shape{x.dim(2), x.dim(3), x.dim(4)};
  Spacing coarse_spacing{};
  for (std::size_t a = 0; a < 3; ++a) {
    coarse_spacing[a] = spacing[a] * static_cast<double>(in_shape[a]) / static_cast<double>(coarse_shape[a]);
  }
  r.coarse = Volume(coarse_shape, coarse_spacing, std::move(cam));
  r.heatmap = preproc::resample(r.coarse, in_shape, preproc::Interp::Trilinear);
  const double peak = *std::max_element(r.heatmap.values().begin(), r.heatmap.values().end());
  if (peak > 0.0) {
    for (double& v : r.heatmap.values()) v = std::max(0.0, v / peak);
  }
  return r;
}

/// 0.6 * source + 0.4 * heatmap, voxelwise; both inputs must lie in [0, 1].
inline Volume composite(const Volume& heatmap, const Volume& source) {
  if (!heatmap.same_grid(source)) {
    throw ShapeError("overlay: heatmap " + preproc::extents_str(heatmap.shape()) + " vs source " +
                     preproc::extents_str(source.shape()));
  }
  Volume out(source.shape(), source.spacing(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = source.values()[i], h = heatmap.values()[i];
    if (!(s >= 0.0 && s <= 1.0 && h >= 0.0 && h <= 1.0)) {
      throw ShapeError("overlay inputs must lie in [0, 1]");
    }
    out.values()[i] = 0.6 * s + 0.4 * h;
  }
  return out;
}

inline std::string slice_name(const std::string& prefix, std::size_t z, std::size_t depth) {
  const auto width = std::max<std::size_t>(3, std::to_string(depth - 1).size());
  std::ostringstream os;
  os << prefix << "_slice_" << std::setw(static_cast<int>(width)) << std::setfill('0') << z << ".pgm";
  return os.str();
}

/// Writes `<prefix>_heatmap.vgrid` and one binary PGM per axial slice.
inline void overlay_export(const GradCamResult& r, const Volume& source,
                           const std::filesystem::path& dir, const std::string& prefix) {
  const Volume comp = composite(r.heatmap, source);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  preproc::save_vgrid(dir / (prefix + "_heatmap.vgrid"), r.heatmap);
  const auto [D, H, W] = comp.shape();
  std::vector<unsigned char> px(H * W);
  for (std::size_t z = 0; z < D; ++z) {
    for (std::size_t i = 0; i < H * W; ++i) {
      px[i] = static_cast<unsigned char>(std::lround(255.0 * comp.values()[z * H * W + i]));
    }
    const auto path = dir / slice_name(prefix, z, D);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << "P5\n" << W << ' ' << H << "\n255\n";
    os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!os) throw DataError("write failed for " + path.string());
  }
}

// -- localization helpers ----------------------------------------------------

/// First voxel holding the maximum value.
inline Extents argmax_voxel(const Volume& v) {
  const auto it = std::max_element(v.values().begin(), v.values().end());
  const std::size_t i = static_cast<std::size_t>(it - v.values().begin());
  const auto& s = v.shape();
  return {i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]};
}

/// Cube (Chebyshev) dilation by `radius` voxels.
inline Volume dilate(const Volume& mask, std::size_t radius) {
  Volume out(mask.shape(), mask.spacing(), 0.0);
  const auto& s = mask.shape();
  const long r = static_cast<long>(radius);
  for (std::size_t z = 0; z < s[0]; ++z)
    for (std::size_t y = 0; y < s[1]; ++y)
      for (std::size_t x = 0; x < s[2]; ++x) {
        if (!preproc::is_set(mask.at(z, y, x))) continue;
        for (long dz = -r; dz <= r; ++dz)
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx) {
              const long nz = static_cast<long>(z) + dz, ny = static_cast<long>(y) + dy,
                         nx = static_cast<long>(x) + dx;
              if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<long>(s[0]) ||
                  ny >= static_cast<long>(s[1]) || nx >= static_cast<long>(s[2]))
                continue;
              out.at(static_cast<std::size_t>(nz), static_cast<std::size_t>(ny),
                     static_cast<std::size_t>(nx)) = 1.0;
            }
      }
  return out;
}

}  // namespace aidnet::xai
