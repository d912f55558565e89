#pragma once

// Confusion matrices, the 3-class to binary collapse, and ROC / AUC.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "aidnet/error.hpp"

namespace aidnet::eval {

/// counts[truth][prediction].
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::vector<std::uint64_t>> counts;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
    return t;
  }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts.at(truth).at(pred); }
};

inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, std::size_t k) {
  if (k != 2 && k != 3) throw ShapeError("confusion: K must be 2 or 3");
  if (truth.size() != pred.size()) throw ShapeError("confusion: truth and prediction lengths differ");
  ConfusionMatrix m{k, std::vector<std::vector<std::uint64_t>>(k, std::vector<std::uint64_t>(k, 0))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || pred[i] < 0 || static_cast<std::size_t>(truth[i]) >= k ||
        static_cast<std::size_t>(pred[i]) >= k) {
      throw ShapeError("confusion: class index out of range at position " + std::to_string(i));
    }
    ++m.counts[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
  }
  return m;
}

/// Class 0 stays negative; classes 1 and 2 merge into positive.
inline ConfusionMatrix collapse_3to2(const ConfusionMatrix& m) {
  if (m.k != 3) throw ShapeError("collapse_3to2 needs a 3x3 matrix");
  ConfusionMatrix out{2, {{0, 0}, {0, 0}}};
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t p = 0; p < 3; ++p) out.counts[t > 0][p > 0] += m.counts[t][p];
  }
  return out;
}

struct BinaryMetrics {
  double accuracy = 0.0;
  std::optional<double> sensitivity;  // absent when there are no positive truths
  std::optional<double> specificity;  // absent when there are no negative truths
};

inline BinaryMetrics binary_metrics(const ConfusionMatrix& m) {
  if (m.k != 2) throw ShapeError("binary_metrics needs a 2x2 matrix");
  const double total = static_cast<double>(m.total());
  if (total == 0) throw DataError("binary_metrics: empty confusion matrix");
  const double tn = static_cast<double>(m.counts[0][0]), fp = static_cast<double>(m.counts[0][1]);
  const double fn = static_cast<double>(m.counts[1][0]), tp = static_cast<double>(m.counts[1][1]);
  BinaryMetrics b;
  b.accuracy = (tp + tn) / total;
  if (tp + fn > 0) b.sensitivity = tp / (tp + fn);
  if (tn + fp > 0) b.specificity = tn / (tn + fp);
  return b;
}

struct RocCurve {
  std::vector<double> thresholds;  // +inf first, then distinct scores descending
  std::vector<double> fpr;
  std::vector<double> tpr;
  double auc = 0.0;
};

/// Threshold sweep over distinct scores (score >= t is positive), trapezoid
/// area. Tied scores move together, which is the same as counting ties as 1/2
/// in the pairwise estimator.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const int> truth) {
  if (scores.size() != truth.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int t : truth) {
    if (t != 0 && t != 1) throw ShapeError("roc_auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(t);
  }
  const std::size_t neg = truth.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("roc_auc needs both classes present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve r;
  r.thresholds.push_back(std::numeric_limits<double>::infinity());
  r.fpr.push_back(0.0);
  r.tpr.push_back(0.0);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      if (truth[order[i]]) ++tp; else ++fp;
    }
    r.thresholds.push_back(s);
    r.fpr.push_back(static_cast<double>(fp) / static_cast<double>(neg));
    r.tpr.push_back(static_cast<double>(tp) / static_cast<double>(pos));
  }
  for (std::size_t i = 1; i < r.fpr.size(); ++i) {
    r.auc += (r.fpr[i] - r.fpr[i - 1]) * (r.tpr[i] + r.tpr[i - 1]) / 2.0;
  }
  return r;
}

// -- reports -----------------------------------------------------------------

inline void write_confusion_csv(std::ostream& os, const ConfusionMatrix& m) {
  os << "truth\\pred";
  for (std::size_t p = 0; p < m.k; ++p) os << ',' << p;
  os << '\n';
  for (std::size_t t = 0; t < m.k; ++t) {
    os << t;
    for (std::size_t p = 0; p < m.k; ++p) os << ',' << m.counts[t][p];
    os << '\n';
  }
}

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << *v;
  return os.str();
}

inline void write_metrics_csv(std::ostream& os, const BinaryMetrics& b, const std::optional<double>& auc,
                              std::size_t n) {
  os << "metric,value\n";
  os << "n," << n << '\n';
  os << "accuracy," << format_metric(b.accuracy) << '\n';
  os << "sensitivity," << format_metric(b.sensitivity) << '\n';
  os << "specificity," << format_metric(b.specificity) << '\n';
  os << "auc," << format_metric(auc) << '\n';
}

inline void write_metrics_text(std::ostream& os, const ConfusionMatrix& m3, const ConfusionMatrix& m2,
                               const BinaryMetrics& b, const std::optional<double>& auc) {
  os << "3-class confusion (rows truth, columns prediction)\n";
  for (std::size_t t = 0; t < 3; ++t) {
    os << "  " << t << ':';
    for (std::size_t p = 0; p < 3; ++p) os << ' ' << std::setw(5) << m3.counts[t][p];
    os << '\n';
  }
  os << "binary (0 = control, 1 = calcium)\n";
  os << "  TN " << m2.counts[0][0] << "  FP " << m2.counts[0][1] << '\n';
  os << "  FN " << m2.counts[1][0] << "  TP " << m2.counts[1][1] << '\n';
  os << "accuracy     " << format_metric(b.accuracy) << '\n';
  os << "sensitivity  " << format_metric(b.sensitivity) << '\n';
  os << "specificity  " << format_metric(b.specificity) << '\n';
  os << "auc          " << format_metric(auc) << '\n';
}

inline void write_roc_csv(std::ostream& os, const RocCurve& r) {
  auto old = os.precision(17);
  os << "fpr,tpr\n";
  for (std::size_t i = 0; i < r.fpr.size(); ++i) os << r.fpr[i] << ',' << r.tpr[i] << '\n';
  os.precision(old);
}

}  // namespace aidnet::eval
