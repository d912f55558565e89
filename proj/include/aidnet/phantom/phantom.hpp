#pragma once

// Synthetic scan-rescan chest phantoms with known calcium burden.
//
// Layout on the (D, H, W) grid: D runs cranio-caudal, H left-right, W
// anterior-posterior. Each axial slice shows an elliptical body, two lungs
// side by side along H, and a spine behind the mediastinum. Calcified blobs
// sit in the mediastinum between the lungs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/preproc/pipeline.hpp"
#include "aidnet/preproc/volume.hpp"

namespace aidnet::phantom {

using preproc::Extents;
using preproc::Spacing;
using preproc::Volume;

enum class Severity { None, Mild, Severe };

inline constexpr double kAirHu = -1000.0;
inline constexpr double kSoftTissueHu = 40.0;
inline constexpr double kLungHu = -800.0;
inline constexpr double kSpineHu = 700.0;
inline constexpr double kNoiseSigmaHu = 10.0;
inline constexpr double kSevereThreshold = 400.0;

/// 0: no calcium, 1: 0 < score < 400, 2: score >= 400.
inline int class_from_agatston(double score) {
  if (score <= 0.0) return 0;
  return score < kSevereThreshold ? 1 : 2;
}

inline Severity severity_of_class(int label) {
  switch (label) {
    case 0: return Severity::None;
    case 1: return Severity::Mild;
    case 2: return Severity::Severe;
    default: throw DataError("class label must be 0, 1 or 2, got " + std::to_string(label));
  }
}

struct SubjectRecord {
  std::string subject_id;
  Volume scan;
  Volume rescan;
  Volume lung_mask;
  Volume rescan_lung_mask;
  Volume lesion_mask;
  double agatston = 0.0;
  int class_label = 0;
};

/// Density weight keyed to the component's peak HU.
inline double agatston_weight(double peak_hu) {
  if (peak_hu < 130.0) return 0.0;
  if (peak_hu < 200.0) return 1.0;
  if (peak_hu < 300.0) return 2.0;
  if (peak_hu < 400.0) return 3.0;
  return 4.0;
}

/// Slice-wise Agatston score over 8-connected components of
/// lesion_mask AND (HU > 130); components under 1 mm^2 are ignored.
inline double agatston_score(const Volume& ct, const Volume& lesion_mask, const Spacing& spacing) {
  if (!ct.same_grid(lesion_mask)) throw ShapeError("agatston_score: CT and lesion mask differ");
  for (double s : spacing) {
    if (!(s > 0.0)) throw DataError("agatston_score: voxel spacing must be known and positive");
  }
  const auto [D, H, W] = ct.shape();
  const double voxel_area = spacing[1] * spacing[2];
  std::vector<int> label(H * W);
  std::deque<std::pair<std::size_t, std::size_t>> queue;
  double total = 0.0;
  for (std::size_t z = 0; z < D; ++z) {
    auto candidate = [&](std::size_t y, std::size_t x) {
      return preproc::is_set(lesion_mask.at(z, y, x)) && ct.at(z, y, x) > 130.0;
    };
    std::fill(label.begin(), label.end(), 0);
    int next = 0;
    for (std::size_t y0 = 0; y0 < H; ++y0) {
      for (std::size_t x0 = 0; x0 < W; ++x0) {
        if (label[y0 * W + x0] || !candidate(y0, x0)) continue;
        label[y0 * W + x0] = ++next;
        queue.assign(1, {y0, x0});
        std::size_t count = 0;
        double peak = -std::numeric_limits<double>::infinity();
        while (!queue.empty()) {
          const auto [y, x] = queue.front();
          queue.pop_front();
          ++count;
          peak = std::max(peak, ct.at(z, y, x));
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
              if (ny < 0 || nx < 0 || ny >= static_cast<long>(H) || nx >= static_cast<long>(W)) continue;
              const auto uy = static_cast<std::size_t>(ny), ux = static_cast<std::size_t>(nx);
              if (label[uy * W + ux] || !candidate(uy, ux)) continue;
              label[uy * W + ux] = next;
              queue.emplace_back(uy, ux);
            }
          }
        }
        const double area = static_cast<double>(count) * voxel_area;
        if (area < 1.0) continue;
        total += area * agatston_weight(peak);
      }
    }
  }
  return total;
}

struct PhantomOptions {
  Extents shape{48, 32, 16};
  Spacing spacing{3.0, 2.0, 2.0};
};

namespace detail {

struct Blob {
  std::array<double, 3> centre;
  double radius;
  double hu;
};

inline double sq(double v) { return v * v; }

inline Volume shift(const Volume& v, std::array<int, 3> d, double fill) {
  Volume out(v.shape(), v.spacing(), fill);
  const auto& s = v.shape();
  for (std::size_t z = 0; z < s[0]; ++z)
    for (std::size_t y = 0; y < s[1]; ++y)
      for (std::size_t x = 0; x < s[2]; ++x) {
        const long sz = static_cast<long>(z) - d[0], sy = static_cast<long>(y) - d[1],
                   sx = static_cast<long>(x) - d[2];
        if (sz < 0 || sy < 0 || sx < 0 || sz >= static_cast<long>(s[0]) ||
            sy >= static_cast<long>(s[1]) || sx >= static_cast<long>(s[2]))
          continue;
        out.at(z, y, x) = v.at(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy),
                               static_cast<std::size_t>(sx));
      }
  return out;
}

template <typename F>
void for_each_voxel(const Extents& s, F&& f) {
  for (std::size_t z = 0; z < s[0]; ++z)
    for (std::size_t y = 0; y < s[1]; ++y)
      for (std::size_t x = 0; x < s[2]; ++x) f(z, y, x);
}

}  // namespace detail

/// Deterministic subject; all randomness is drawn from `seed`.
inline SubjectRecord generate_subject(std::uint64_t seed, Severity severity,
                                      const PhantomOptions& opt = {}) {
  const auto [D, H, W] = opt.shape;
  if (D < 16 || H < 16 || W < 8) {
    throw ShapeError("phantom shape " + preproc::extents_str(opt.shape) +
                     " too small to place lungs (need at least 16x16x8)");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double fD = static_cast<double>(D), fH = static_cast<double>(H), fW = static_cast<double>(W);

  // Anatomy (continuous voxel coordinates, voxel centres at integers).
  const double cz = fD / 2.0 - 0.5 + jitter(-0.5, 0.5);
  const double cw = fW / 2.0 - 0.5 + jitter(-0.3, 0.3);
  const double body_ry = 0.47 * fH, body_rw = 0.46 * fW;
  const double lung_rz = 0.38 * fD * jitter(0.92, 1.05);
  const double lung_ry = 0.17 * fH * jitter(0.92, 1.05);
  const double lung_rw = 0.33 * fW * jitter(0.92, 1.05);
  const double gap = jitter(-0.3, 0.3);
  const std::array<double, 2> lung_cy{0.25 * fH - 0.5 - gap, 0.75 * fH - 0.5 + gap};

  Volume clean(opt.shape, opt.spacing, kAirHu);
  Volume lung(opt.shape, opt.spacing, 0.0);
  detail::for_each_voxel(opt.shape, [&](std::size_t z, std::size_t y, std::size_t x) {
    const double fy = static_cast<double>(y), fx = static_cast<double>(x), fz = static_cast<double>(z);
    const bool in_body = detail::sq((fy - (fH / 2 - 0.5)) / body_ry) + detail::sq((fx - cw) / body_rw) <= 1.0;
    if (!in_body) return;
    clean.at(z, y, x) = kSoftTissueHu;
    for (double cy : lung_cy) {
      if (detail::sq((fz - cz) / lung_rz) + detail::sq((fy - cy) / lung_ry) +
              detail::sq((fx - cw) / lung_rw) <= 1.0) {
        clean.at(z, y, x) = kLungHu;
        lung.at(z, y, x) = 1.0;
      }
    }
  });

  // Spine behind the mediastinum, only where it falls outside the lung hull.
  const Volume hull = preproc::convex_hull_mask(lung);
  const double spine_cy = fH / 2.0 - 0.5, spine_cw = cw + lung_rw - 0.5;
  detail::for_each_voxel(opt.shape, [&](std::size_t z, std::size_t y, std::size_t x) {
    const double fy = static_cast<double>(y), fx = static_cast<double>(x);
    if (detail::sq((fy - spine_cy) / 1.6) + detail::sq((fx - spine_cw) / 2.0) > 1.0) return;
    if (preproc::is_set(hull.at(z, y, x)) || clean.at(z, y, x) == kAirHu) return;
    clean.at(z, y, x) = kSpineHu;
  });

  std::normal_distribution<double> noise(0.0, kNoiseSigmaHu);
  std::vector<double> scan_noise(clean.size()), rescan_noise(clean.size());
  for (double& n : scan_noise) n = noise(rng);
  for (double& n : rescan_noise) n = noise(rng);
  std::array<int, 3> shift{0, 0, 0};
  shift[static_cast<std::size_t>(rng() % 3)] = (rng() % 2) ? 1 : -1;

  // Lesion blobs in the mediastinum: between the lungs along H, inside the
  // middle of the lung span along D and W.
  std::vector<detail::Blob> blobs;
  if (severity != Severity::None) {
    const bool severe = severity == Severity::Severe;
    const int n = 1 + static_cast<int>(rng() % 4);
    const double y_lo = lung_cy[0] + lung_ry, y_hi = lung_cy[1] - lung_ry;
    for (int i = 0; i < n; ++i) {
      detail::Blob b;
      b.radius = severe ? jitter(1.4, 2.2) : jitter(0.5, 1.1);
      b.hu = severe ? jitter(450.0, 800.0) : jitter(200.0, 800.0);
      b.centre = {std::round(cz + jitter(-0.45, 0.45) * lung_rz),
                  std::round(jitter(y_lo + 0.5, y_hi - 0.5)),
                  std::round(cw + jitter(-0.35, 0.35) * lung_rw)};
      blobs.push_back(b);
    }
  }

  SubjectRecord rec;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 60) throw DataError("phantom: could not hit the requested calcium band");
    Volume scan = clean;
    Volume lesion(opt.shape, opt.spacing, 0.0);
    for (const auto& b : blobs) {
      detail::for_each_voxel(opt.shape, [&](std::size_t z, std::size_t y, std::size_t x) {
        const double d2 = detail::sq(static_cast<double>(z) - b.centre[0]) +
                          detail::sq(static_cast<double>(y) - b.centre[1]) +
                          detail::sq(static_cast<double>(x) - b.centre[2]);
        if (d2 > b.radius * b.radius) return;
        if (preproc::is_set(lung.at(z, y, x)) || !preproc::is_set(hull.at(z, y, x))) return;
        scan.at(z, y, x) = b.hu;
        lesion.at(z, y, x) = 1.0;
      });
    }
    for (std::size_t i = 0; i < scan.size(); ++i) scan.values()[i] += scan_noise[i];
    const double score = agatston_score(scan, lesion, opt.spacing);
    const int label = class_from_agatston(score);
    const int wanted = severity == Severity::None ? 0 : (severity == Severity::Mild ? 1 : 2);
    if (label == wanted) {
      rec.scan = std::move(scan);
      rec.lesion_mask = std::move(lesion);
      rec.agatston = score;
      rec.class_label = label;
      break;
    }
    // Resize blobs towards the band.
    for (auto& b : blobs) {
      if (label < wanted) {
        b.radius = b.radius * 1.15 + 0.05;
      } else if (b.radius > 0.5) {
        b.radius = std::max(0.5, b.radius * 0.85);
      } else if (blobs.size() > 1) {
        blobs.pop_back();
        break;
      } else {
        b.hu = std::max(200.0, b.hu * 0.8);
      }
    }
  }

  rec.rescan = detail::shift(rec.scan, shift, kAirHu);
  for (std::size_t i = 0; i < rec.rescan.size(); ++i) rec.rescan.values()[i] += rescan_noise[i];
  rec.lung_mask = std::move(lung);
  rec.rescan_lung_mask = detail::shift(rec.lung_mask, shift, 0.0);
  return rec;
}

struct CohortCounts {
  std::size_t control = 100;
  std::size_t mild = 77;
  std::size_t severe = 34;

  std::size_t total() const { return control + mild + severe; }
};

inline std::string subject_id(std::size_t index) {
  std::ostringstream os;
  os << "S" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

/// Controls first, then mild, then severe; subject i uses seed + i.
inline std::vector<SubjectRecord> build_cohort(const CohortCounts& counts, std::uint64_t seed,
                                               const PhantomOptions& opt = {}) {
  std::vector<SubjectRecord> out;
  out.reserve(counts.total());
  auto add = [&](std::size_t n, Severity s) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = out.size();
      out.push_back(generate_subject(seed + idx, s, opt));
      out.back().subject_id = subject_id(idx);
    }
  };
  add(counts.control, Severity::None);
  add(counts.mild, Severity::Mild);
  add(counts.severe, Severity::Severe);
  return out;
}

// -- on-disk cohort ----------------------------------------------------------

struct ManifestRow {
  std::string subject_id;
  int class_label = 0;
  double agatston = 0.0;
  std::string scan, rescan, lung_mask, rescan_lung_mask, lesion_mask;
};

inline constexpr const char* kManifestHeader =
    "subject_id,class,agatston,scan,rescan,lung_mask,rescan_lung_mask,lesion_mask";

inline std::string format_score(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_manifest(std::ostream& os, const std::vector<ManifestRow>& rows) {
  os << kManifestHeader << '\n';
  for (const auto& r : rows) {
    os << r.subject_id << ',' << r.class_label << ',' << format_score(r.agatston) << ',' << r.scan
       << ',' << r.rescan << ',' << r.lung_mask << ',' << r.rescan_lung_mask << ','
       << r.lesion_mask << '\n';
  }
}

inline std::vector<ManifestRow> read_manifest(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader) {
    throw DataError("manifest header mismatch");
  }
  std::vector<ManifestRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw DataError("manifest row has " + std::to_string(f.size()) + " fields");
    ManifestRow r;
    r.subject_id = f[0];
    try {
      r.class_label = std::stoi(f[1]);
      r.agatston = std::stod(f[2]);
    } catch (const std::exception&) {
      throw DataError("manifest row for " + f[0] + " has a malformed number");
    }
    if (r.class_label < 0 || r.class_label > 2) throw DataError("bad class label for " + f[0]);
    r.scan = f[3];
    r.rescan = f[4];
    r.lung_mask = f[5];
    r.rescan_lung_mask = f[6];
    r.lesion_mask = f[7];
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<ManifestRow> load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  return read_manifest(is);
}

/// Writes every volume, then the manifest (temp file + rename, so a failed
/// run never leaves a partial manifest).
inline std::vector<ManifestRow> write_cohort(const std::filesystem::path& dir,
                                             const std::vector<SubjectRecord>& cohort) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create cohort directory " + dir.string() + ": " + ec.message());
  std::vector<ManifestRow> rows;
  for (const auto& s : cohort) {
    ManifestRow r{s.subject_id, s.class_label, s.agatston,
                  s.subject_id + "_scan.vgrid", s.subject_id + "_rescan.vgrid",
                  s.subject_id + "_lung.vgrid", s.subject_id + "_rescan_lung.vgrid",
                  s.subject_id + "_lesion.vgrid"};
    preproc::save_vgrid(dir / r.scan, s.scan);
    preproc::save_vgrid(dir / r.rescan, s.rescan);
    preproc::save_vgrid(dir / r.lung_mask, s.lung_mask);
    preproc::save_vgrid(dir / r.rescan_lung_mask, s.rescan_lung_mask);
    preproc::save_vgrid(dir / r.lesion_mask, s.lesion_mask);
    rows.push_back(std::move(r));
  }
  const fs::path tmp = dir / "manifest.csv.tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw DataError("cannot write manifest in " + dir.string());
    write_manifest(os, rows);
    if (!os) throw DataError("manifest write failed in " + dir.string());
  }
  fs::rename(tmp, dir / "manifest.csv");
  return rows;
}

}  // namespace aidnet::phantom
