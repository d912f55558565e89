#pragma once

// In-memory training data: preprocessed two-channel scan/rescan pairs.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/phantom/phantom.hpp"
#include "aidnet/preproc/pipeline.hpp"
#include "aidnet/volgrid/tensor.hpp"

namespace aidnet::net {

struct Sample {
  std::string id;
  std::vector<double> scan;    // [2, D, H, W]
  std::vector<double> rescan;  // [2, D, H, W]
  std::size_t label = 0;
  preproc::Volume lesion;      // on the input grid; empty when unknown
};

struct Dataset {
  preproc::Extents shape{};
  std::vector<Sample> samples;

  std::size_t sample_size() const { return 2 * shape[0] * shape[1] * shape[2]; }
};

inline Sample sample_from_record(const phantom::SubjectRecord& r, const preproc::PreprocConfig& cfg) {
  Sample s;
  s.id = r.subject_id;
  s.label = static_cast<std::size_t>(r.class_label);
  const auto a = preproc::preprocess(r.scan, r.lung_mask, cfg);
  const auto b = preproc::preprocess(r.rescan, r.rescan_lung_mask, cfg);
  s.scan = preproc::stack_channels(a.ct, a.hu_mask);
  s.rescan = preproc::stack_channels(b.ct, b.hu_mask);
  s.lesion = preproc::carry_mask(r.lesion_mask, a.box, cfg.target_shape);
  return s;
}

inline Dataset dataset_from_cohort(const std::vector<phantom::SubjectRecord>& cohort,
                                   const preproc::PreprocConfig& cfg = {}) {
  Dataset d;
  d.shape = cfg.target_shape;
  for (const auto& r : cohort) d.samples.push_back(sample_from_record(r, cfg));
  return d;
}

/// Stacks the chosen samples into [N, 2, D, H, W].
inline vg::Tensor stack(const Dataset& d, std::span<const std::size_t> idx, bool rescan = false) {
  if (idx.empty()) throw ShapeError("cannot stack an empty batch");
  const std::size_t per = d.sample_size();
  std::vector<double> v;
  v.reserve(per * idx.size());
  for (std::size_t i : idx) {
    const auto& src = rescan ? d.samples.at(i).rescan : d.samples.at(i).scan;
    if (src.size() != per) throw DataError("sample " + d.samples[i].id + " has the wrong size");
    v.insert(v.end(), src.begin(), src.end());
  }
  return vg::Tensor({idx.size(), 2, d.shape[0], d.shape[1], d.shape[2]}, std::move(v));
}

inline std::vector<std::size_t> labels_of(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx) out.push_back(d.samples.at(i).label);
  return out;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Class-stratified split with exact val/test sizes. Per-class quotas use
/// largest remainders; within a class the order is a seeded shuffle.
inline Split stratified_split(std::span<const std::size_t> labels, std::size_t n_val,
                              std::size_t n_test, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (n_val + n_test > n) throw DataError("split sizes exceed the cohort");
  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= by_class.size()) by_class.resize(labels[i] + 1);
    by_class[labels[i]].push_back(i);
  }
  std::mt19937_64 rng(seed);
  for (auto& c : by_class) std::shuffle(c.begin(), c.end(), rng);

  auto quotas = [&](std::size_t want, const std::vector<std::size_t>& avail) {
    std::vector<std::size_t> q(by_class.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t used = 0;
    std::size_t total_avail = 0;
    for (std::size_t a : avail) total_avail += a;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      const double exact = total_avail ? static_cast<double>(want) * avail[c] / total_avail : 0.0;
      q[c] = std::min(avail[c], static_cast<std::size_t>(exact));
      used += q[c];
      rem.emplace_back(-(exact - static_cast<double>(q[c])), c);
    }
    std::stable_sort(rem.begin(), rem.end());
    for (std::size_t k = 0; used < want; k = (k + 1) % rem.size()) {
      const std::size_t c = rem[k].second;
      if (q[c] < avail[c]) {
        ++q[c];
        ++used;
      }
    }
    return q;
  };

  std::vector<std::size_t> avail;
  for (const auto& c : by_class) avail.push_back(c.size());
  const auto qt = quotas(n_test, avail);
  for (std::size_t c = 0; c < avail.size(); ++c) avail[c] -= qt[c];
  const auto qv = quotas(n_val, avail);

  Split s;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto& ids = by_class[c];
    s.test.insert(s.test.end(), ids.begin(), ids.begin() + static_cast<long>(qt[c]));
    s.val.insert(s.val.end(), ids.begin() + static_cast<long>(qt[c]),
                 ids.begin() + static_cast<long>(qt[c] + qv[c]));
    s.train.insert(s.train.end(), ids.begin() + static_cast<long>(qt[c] + qv[c]), ids.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

}  // namespace aidnet::net
