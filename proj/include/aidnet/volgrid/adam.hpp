#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/volgrid/tensor.hpp"

namespace aidnet::vg {

struct AdamState {
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline std::size_t total_numel(std::span<const Tensor> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

inline AdamState make_adam(std::span<const Tensor> params, double lr = 1e-4) {
  AdamState st;
  st.lr = lr;
  st.m.assign(total_numel(params), 0.0);
  st.v.assign(st.m.size(), 0.0);
  return st;
}

/// One bias-corrected Adam update from the gradients stored on `params`.
/// A parameter without a gradient is treated as having a zero gradient.
/// Throws NumericError before touching anything if a gradient is non-finite.
inline void adam_step(std::span<Tensor> params, AdamState& st) {
  const std::size_t n = total_numel(params);
  if (st.m.size() != n || st.v.size() != n) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(st.m.size()) +
                     " values, parameters have " + std::to_string(n));
  }
  for (const auto& p : params) {
    if (p.has_grad()) check_finite(p.grad(), "optimizer gradient");
  }
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(st.beta1, t);
  const double c2 = 1.0 - std::pow(st.beta2, t);
  std::size_t off = 0;
  for (auto& p : params) {
    auto w = p.mutable_data();
    const auto g = p.grad();
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i, ++off) {
      const double gi = has ? g[i] : 0.0;
      st.m[off] = st.beta1 * st.m[off] + (1.0 - st.beta1) * gi;
      st.v[off] = st.beta2 * st.v[off] + (1.0 - st.beta2) * gi * gi;
      const double mhat = st.m[off] / c1;
      const double vhat = st.v[off] / c2;
      w[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

}  // namespace aidnet::vg
