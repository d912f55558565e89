#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/net/model.hpp"

namespace aidnet::net {

struct LossConfig {
  double lambda = 0.001;
  double margin = 1.0;
  std::optional<std::array<double, 3>> class_weights;

  void validate() const {
    if (!(lambda >= 0.0)) throw ShapeError("lambda must be >= 0");
    if (!(margin > 0.0)) throw ShapeError("margin must be > 0");
    if (class_weights) {
      for (double w : *class_weights) {
        if (!(w > 0.0)) throw ShapeError("class weights must be positive");
      }
    }
  }
};

/// Y = 0 when the two labels agree, 1 otherwise.
inline std::vector<int> similarity_from_labels(std::span<const std::size_t> a,
                                               std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw ShapeError("label lists differ in length");
  std::vector<int> y(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] == b[i] ? 0 : 1;
  return y;
}

/// mean over pairs of (1-Y) D^2/2 + Y max(0, m-D)^2/2.
inline Tensor contrastive_loss(const Tensor& d_w, std::span<const int> y, double margin) {
  if (!(margin > 0.0)) throw ShapeError("contrastive margin must be > 0");
  if (d_w.rank() != 1 || d_w.dim(0) != y.size()) {
    throw ShapeError("contrastive_loss: distances " + vg::shape_str(d_w.shape()) + " vs " +
                     std::to_string(y.size()) + " labels");
  }
  const std::size_t N = y.size();
  std::vector<double> same(N), diff(N);
  for (std::size_t i = 0; i < N; ++i) {
    if (y[i] != 0 && y[i] != 1) throw ShapeError("similarity label must be 0 or 1");
    same[i] = 1.0 - y[i];
    diff[i] = y[i];
  }
  const Tensor hinge = vg::relu(vg::add_scalar(vg::scale(d_w, -1.0), margin));
  const Tensor near = vg::mul(Tensor({N}, same), vg::mul(d_w, d_w));
  const Tensor far = vg::mul(Tensor({N}, diff), vg::mul(hinge, hinge));
  return vg::scale(vg::mean(vg::add(near, far)), 0.5);
}

/// Mean of -log softmax at the true class (weighted mean if weights given).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels,
                            const std::optional<std::array<double, 3>>& class_weights = std::nullopt) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + vg::shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const Tensor nll = vg::scale(vg::pick(vg::log_softmax(logits, 1), labels), -1.0);
  if (!class_weights) return vg::mean(nll);
  std::vector<double> w(labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    w[i] = (*class_weights)[labels[i]];
    total += w[i];
  }
  return vg::scale(vg::sum(vg::mul(Tensor({labels.size()}, w), nll)), 1.0 / total);
}

struct LossParts {
  Tensor total;
  Tensor ce1;
  Tensor ce2;
  Tensor contrastive;
};

/// CE1 + CE2 + lambda * contrastive.
inline Tensor combine_losses(const Tensor& ce1, const Tensor& ce2, const Tensor& contrastive,
                             double lambda) {
  const Tensor ce = vg::add(ce1, ce2);
  if (lambda == 0.0) return ce;
  return vg::add(ce, vg::scale(contrastive, lambda));
}

inline LossParts total_loss(const PairForward& f, std::span<const std::size_t> label_scan,
                            std::span<const std::size_t> label_rescan, std::span<const int> y,
                            const LossConfig& cfg) {
  cfg.validate();
  LossParts parts;
  parts.ce1 = cross_entropy(f.first.logits, label_scan, cfg.class_weights);
  parts.ce2 = cross_entropy(f.second.logits, label_rescan, cfg.class_weights);
  parts.contrastive = contrastive_loss(f.d_w, y, cfg.margin);
  parts.total = combine_losses(parts.ce1, parts.ce2, parts.contrastive, cfg.lambda);
  return parts;
}

}  // namespace aidnet::net
