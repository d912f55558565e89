#pragma once

// Differentiable operations over vg::Tensor. Spatial ops use the layout
// [N, C, D, H, W] with W fastest.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aidnet/volgrid/tensor.hpp"

namespace aidnet::vg {

using Triple = std::array<std::size_t, 3>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

struct ConvGeom {
  std::size_t C, D, H, W;
  std::size_t kd, kh, kw;
  std::size_t sd, sh, sw;
  std::size_t pd, ph, pw;
  std::size_t OD, OH, OW;

  std::size_t in_size() const { return C * D * H * W; }
  std::size_t positions() const { return OD * OH * OW; }
  std::size_t patch() const { return C * kd * kh * kw; }
};

// Lays out every receptive field as a column: col[patch_row, position].
inline void im2col(const double* in, const ConvGeom& g, double* col) {
  const std::size_t P = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.C; ++c) {
    const double* plane = in + c * g.D * g.H * g.W;
    for (std::size_t a = 0; a < g.kd; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          double* dst = col + row * P;
          for (std::size_t oz = 0; oz < g.OD; ++oz) {
            const long iz = static_cast<long>(oz * g.sd + a) - static_cast<long>(g.pd);
            const bool zok = iz >= 0 && iz < static_cast<long>(g.D);
            for (std::size_t oy = 0; oy < g.OH; ++oy) {
              const long iy = static_cast<long>(oy * g.sh + b) - static_cast<long>(g.ph);
              double* d = dst + (oz * g.OH + oy) * g.OW;
              if (!zok || iy < 0 || iy >= static_cast<long>(g.H)) {
                std::fill(d, d + g.OW, 0.0);
                continue;
              }
              const double* src = plane + (static_cast<std::size_t>(iz) * g.H + iy) * g.W;
              for (std::size_t ox = 0; ox < g.OW; ++ox) {
                const long ix = static_cast<long>(ox * g.sw + e) - static_cast<long>(g.pw);
                d[ox] = (ix >= 0 && ix < static_cast<long>(g.W)) ? src[ix] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeom& g, double* in_grad) {
  const std::size_t P = g.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.C; ++c) {
    double* plane = in_grad + c * g.D * g.H * g.W;
    for (std::size_t a = 0; a < g.kd; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          const double* src = col + row * P;
          for (std::size_t oz = 0; oz < g.OD; ++oz) {
            const long iz = static_cast<long>(oz * g.sd + a) - static_cast<long>(g.pd);
            if (iz < 0 || iz >= static_cast<long>(g.D)) continue;
            for (std::size_t oy = 0; oy < g.OH; ++oy) {
              const long iy = static_cast<long>(oy * g.sh + b) - static_cast<long>(g.ph);
              if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
              const double* s = src + (oz * g.OH + oy) * g.OW;
              double* dst = plane + (static_cast<std::size_t>(iz) * g.H + iy) * g.W;
              for (std::size_t ox = 0; ox < g.OW; ++ox) {
                const long ix = static_cast<long>(ox * g.sw + e) - static_cast<long>(g.pw);
                if (ix >= 0 && ix < static_cast<long>(g.W)) dst[ix] += s[ox];
              }
            }
          }
        }
      }
    }
  }
}

// Output shape and parent strides for same-rank numpy-style broadcasting.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

inline Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  Broadcast r;
  const std::size_t n = a.size();
  r.out.resize(n);
  r.stride_a.assign(n, 0);
  r.stride_b.assign(n, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = n; i-- > 0;) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    r.out[i] = std::max(a[i], b[i]);
    r.stride_a[i] = a[i] == 1 ? 0 : sa;
    r.stride_b[i] = b[i] == 1 ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return r;
}

// Calls f(out_index, a_index, b_index) over the broadcast output in order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t n = bc.out.size();
  const std::size_t total = numel_of(bc.out);
  std::vector<std::size_t> idx(n, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = n; d-- > 0;) {
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (++idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

// outer x axis x inner decomposition used by softmax and concat.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Cross-correlation with zero padding. `bias` may be an undefined Tensor.
inline Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     Triple stride = {1, 1, 1}, Triple padding = {0, 0, 0}) {
  detail::require_rank(input, 5, "conv3d input");
  detail::require_rank(weight, 5, "conv3d weight");
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (ws[1] != is[1]) {
    throw ShapeError("conv3d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                     std::to_string(is[1]));
  }
  const std::size_t K = ws[0];
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != K)) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()) + " for " +
                     std::to_string(K) + " filters");
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (stride[i] == 0) throw ShapeError("conv3d: stride must be >= 1");
    if (ws[2 + i] > is[2 + i] + 2 * padding[i]) {
      throw ShapeError("conv3d: kernel " + shape_str(ws) + " exceeds padded input " +
                       shape_str(is));
    }
  }
  detail::ConvGeom g{is[1],      is[2],      is[3],      is[4],      ws[2],
                     ws[3],      ws[4],      stride[0],  stride[1],  stride[2],
                     padding[0], padding[1], padding[2], 0,          0,
                     0};
  g.OD = (g.D + 2 * g.pd - g.kd) / g.sd + 1;
  g.OH = (g.H + 2 * g.ph - g.kh) / g.sh + 1;
  g.OW = (g.W + 2 * g.pw - g.kw) / g.sw + 1;

  const std::size_t N = is[0];
  const std::size_t P = g.positions();
  const std::size_t CK = g.patch();
  std::vector<double> out(N * K * P);
  std::vector<double> col(CK * P);
  const detail::ConstMap wm(weight.data().data(), K, CK);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(input.data().data() + n * g.in_size(), g, col.data());
    detail::MutMap om(out.data() + n * K * P, K, P);
    om.noalias() = wm * detail::ConstMap(col.data(), CK, P);
    if (bias.defined()) {
      for (std::size_t k = 0; k < K; ++k) om.row(k).array() += bias[k];
    }
  }

  std::vector<ImplPtr> parents{input.impl(), weight.impl()};
  if (bias.defined()) parents.push_back(bias.impl());
  auto backward = [g, N, K](const TensorImpl& self, std::span<const double> gout,
                            std::span<std::vector<double>*> pg) {
    const auto& in = self.parents[0]->data;
    const auto& w = self.parents[1]->data;
    const std::size_t P = g.positions();
    const std::size_t CK = g.patch();
    std::vector<double> col(CK * P);
    std::vector<double> gcol(pg[0] ? CK * P : 0);
    const detail::ConstMap wm(w.data(), K, CK);
    for (std::size_t n = 0; n < N; ++n) {
      const detail::ConstMap gm(gout.data() + n * K * P, K, P);
      if (pg[1]) {
        detail::im2col(in.data() + n * g.in_size(), g, col.data());
        detail::MutMap gw(pg[1]->data(), K, CK);
        gw.noalias() += gm * detail::ConstMap(col.data(), CK, P).transpose();
      }
      if (pg[0]) {
        detail::MutMap gc(gcol.data(), CK, P);
        gc.noalias() = wm.transpose() * gm;
        detail::col2im_add(gcol.data(), g, pg[0]->data() + n * g.in_size());
      }
      if (pg.size() > 2 && pg[2]) {
        // Plain loop: Eigen's vectorized sum reorders by buffer alignment,
        // which would make results depend on heap layout.
        for (std::size_t k = 0; k < K; ++k) {
          const double* row = gout.data() + (n * K + k) * P;
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i) acc += row[i];
          (*pg[2])[k] += acc;
        }
      }
    }
  };
  return Tensor::from_op({N, K, g.OD, g.OH, g.OW}, std::move(out), std::move(parents),
                         std::move(backward), "conv3d");
}

// ---------------------------------------------------------------------------
// Pooling and shape ops

/// Max pooling; the gradient goes to the first maximum in linear index order.
inline Tensor maxpool3d(const Tensor& input, Triple window, Triple stride) {
  detail::require_rank(input, 5, "maxpool3d");
  const auto& s = input.shape();
  Triple out_ext{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (window[i] == 0 || stride[i] == 0) throw ShapeError("maxpool3d: window/stride must be >= 1");
    if (s[2 + i] < window[i]) {
      throw ShapeError("maxpool3d: window larger than input " + shape_str(s) +
                       " (empty spatial extent)");
    }
    out_ext[i] = (s[2 + i] - window[i]) / stride[i] + 1;
  }
  const std::size_t NC = s[0] * s[1];
  const std::size_t D = s[2], H = s[3], W = s[4];
  const std::size_t OD = out_ext[0], OH = out_ext[1], OW = out_ext[2];
  const std::size_t in_plane = D * H * W, out_plane = OD * OH * OW;

  std::vector<double> out(NC * out_plane);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& x = input.data();
  for (std::size_t nc = 0; nc < NC; ++nc) {
    for (std::size_t oz = 0; oz < OD; ++oz) {
      for (std::size_t oy = 0; oy < OH; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          for (std::size_t a = 0; a < window[0]; ++a) {
            for (std::size_t b = 0; b < window[1]; ++b) {
              for (std::size_t e = 0; e < window[2]; ++e) {
                const std::size_t i = nc * in_plane +
                                      ((oz * stride[0] + a) * H + oy * stride[1] + b) * W +
                                      ox * stride[2] + e;
                if (x[i] > best) {
                  best = x[i];
                  best_i = i;
                }
              }
            }
          }
          const std::size_t o = nc * out_plane + (oz * OH + oy) * OW + ox;
          out[o] = best;
          (*argmax)[o] = best_i;
        }
      }
    }
  }
  auto backward = [argmax](const TensorImpl&, std::span<const double> gout,
                           std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    for (std::size_t o = 0; o < gout.size(); ++o) (*pg[0])[(*argmax)[o]] += gout[o];
  };
  return Tensor::from_op({s[0], s[1], OD, OH, OW}, std::move(out), {input.impl()},
                         std::move(backward), "maxpool3d");
}

/// Spatial mean per channel: [N, C, ...] -> [N, C].
inline Tensor global_avg_pool(const Tensor& input) {
  if (!input.defined() || input.rank() < 3) throw ShapeError("global_avg_pool: need rank >= 3");
  const std::size_t N = input.dim(0), C = input.dim(1);
  const std::size_t S = input.numel() / (N * C);
  std::vector<double> out(N * C);
  const auto& x = input.data();
  for (std::size_t i = 0; i < N * C; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < S; ++j) acc += x[i * S + j];
    out[i] = acc / static_cast<double>(S);
  }
  auto backward = [S](const TensorImpl&, std::span<const double> gout,
                      std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    const double inv = 1.0 / static_cast<double>(S);
    for (std::size_t i = 0; i < gout.size(); ++i) {
      for (std::size_t j = 0; j < S; ++j) (*pg[0])[i * S + j] += gout[i] * inv;
    }
  };
  return Tensor::from_op({N, C}, std::move(out), {input.impl()}, std::move(backward),
                         "global_avg_pool");
}

/// Nearest-neighbour resize of [N, C, d, h, w] to the target spatial extents;
/// source index = floor(dst * src_extent / dst_extent).
inline Tensor upsample_nearest(const Tensor& input, Triple target) {
  detail::require_rank(input, 5, "upsample_nearest");
  for (std::size_t t : target) {
    if (t == 0) throw ShapeError("upsample_nearest: empty target extent");
  }
  const auto& s = input.shape();
  const std::size_t NC = s[0] * s[1];
  std::array<std::vector<std::size_t>, 3> src;
  for (std::size_t ax = 0; ax < 3; ++ax) {
    src[ax].resize(target[ax]);
    for (std::size_t d = 0; d < target[ax]; ++d) src[ax][d] = d * s[2 + ax] / target[ax];
  }
  const std::size_t in_plane = s[2] * s[3] * s[4];
  const std::size_t out_plane = target[0] * target[1] * target[2];
  auto map = std::make_shared<std::vector<std::size_t>>(out_plane);
  for (std::size_t z = 0; z < target[0]; ++z) {
    for (std::size_t y = 0; y < target[1]; ++y) {
      for (std::size_t x = 0; x < target[2]; ++x) {
        (*map)[(z * target[1] + y) * target[2] + x] =
            (src[0][z] * s[3] + src[1][y]) * s[4] + src[2][x];
      }
    }
  }
  std::vector<double> out(NC * out_plane);
  const auto& xv = input.data();
  for (std::size_t nc = 0; nc < NC; ++nc) {
    for (std::size_t o = 0; o < out_plane; ++o) {
      out[nc * out_plane + o] = xv[nc * in_plane + (*map)[o]];
    }
  }
  auto backward = [map, NC, in_plane, out_plane](const TensorImpl&, std::span<const double> gout,
                                                 std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    for (std::size_t nc = 0; nc < NC; ++nc) {
      for (std::size_t o = 0; o < out_plane; ++o) {
        (*pg[0])[nc * in_plane + (*map)[o]] += gout[nc * out_plane + o];
      }
    }
  };
  return Tensor::from_op({s[0], s[1], target[0], target[1], target[2]}, std::move(out),
                         {input.impl()}, std::move(backward), "upsample_nearest");
}

inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (!a.defined() || !b.defined() || a.rank() != b.rank() || axis >= a.rank()) {
    throw ShapeError("concat: invalid operands or axis");
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " disagree off-axis");
    }
  }
  const auto sa = detail::split_at(a.shape(), axis);
  const auto sb = detail::split_at(b.shape(), axis);
  const std::size_t ca = sa.extent * sa.inner, cb = sb.extent * sb.inner;
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  for (std::size_t o = 0; o < sa.outer; ++o) {
    out.insert(out.end(), a.data().begin() + o * ca, a.data().begin() + (o + 1) * ca);
    out.insert(out.end(), b.data().begin() + o * cb, b.data().begin() + (o + 1) * cb);
  }
  Shape shape = a.shape();
  shape[axis] += b.dim(axis);
  auto backward = [outer = sa.outer, ca, cb](const TensorImpl&, std::span<const double> gout,
                                             std::span<std::vector<double>*> pg) {
    for (std::size_t o = 0; o < outer; ++o) {
      const double* row = gout.data() + o * (ca + cb);
      if (pg[0]) {
        for (std::size_t i = 0; i < ca; ++i) (*pg[0])[o * ca + i] += row[i];
      }
      if (pg[1]) {
        for (std::size_t i = 0; i < cb; ++i) (*pg[1])[o * cb + i] += row[ca + i];
      }
    }
  };
  return Tensor::from_op(std::move(shape), std::move(out), {a.impl(), b.impl()},
                         std::move(backward), "concat");
}

inline Tensor reshape(const Tensor& input, Shape shape) {
  if (numel_of(shape) != input.numel()) {
    throw ShapeError("reshape: " + shape_str(input.shape()) + " -> " + shape_str(shape));
  }
  auto backward = [](const TensorImpl&, std::span<const double> gout,
                     std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i];
  };
  std::vector<double> data(input.data().begin(), input.data().end());
  return Tensor::from_op(std::move(shape), std::move(data), {input.impl()}, std::move(backward),
                         "reshape");
}

/// [N, ...] -> [N, prod(...)].
inline Tensor flatten(const Tensor& input) {
  return reshape(input, {input.dim(0), input.numel() / input.dim(0)});
}

// ---------------------------------------------------------------------------
// Pointwise

namespace detail {

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv, const char* name) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  auto backward = [deriv](const TensorImpl& self, std::span<const double> gout,
                          std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    const auto& in = self.parents[0]->data;
    for (std::size_t i = 0; i < gout.size(); ++i) {
      (*pg[0])[i] += gout[i] * deriv(in[i], self.data[i]);
    }
  };
  return Tensor::from_op(x.shape(), std::move(out), {x.impl()}, std::move(backward), name);
}

inline double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; },
      "scale");
}

inline Tensor add_scalar(const Tensor& x, double offset) {
  return detail::unary(
      x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; },
      "add_scalar");
}

/// Elementwise sum with same-rank broadcasting over extent-1 axes.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto bc = detail::broadcast(a.shape(), b.shape(), "add");
  std::vector<double> out(numel_of(bc.out));
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = a[ia] + b[ib];
  });
  auto backward = [bc](const TensorImpl&, std::span<const double> gout,
                       std::span<std::vector<double>*> pg) {
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (pg[0]) (*pg[0])[ia] += gout[o];
      if (pg[1]) (*pg[1])[ib] += gout[o];
    });
  };
  return Tensor::from_op(bc.out, std::move(out), {a.impl(), b.impl()}, std::move(backward), "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

/// Elementwise product with same-rank broadcasting over extent-1 axes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto bc = detail::broadcast(a.shape(), b.shape(), "mul");
  std::vector<double> out(numel_of(bc.out));
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = a[ia] * b[ib];
  });
  auto backward = [bc](const TensorImpl& self, std::span<const double> gout,
                       std::span<std::vector<double>*> pg) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (pg[0]) (*pg[0])[ia] += gout[o] * bv[ib];
      if (pg[1]) (*pg[1])[ib] += gout[o] * av[ia];
    });
  };
  return Tensor::from_op(bc.out, std::move(out), {a.impl(), b.impl()}, std::move(backward), "mul");
}

namespace detail {

inline Tensor softmax_impl(const Tensor& x, std::size_t axis, bool log_space) {
  if (!x.defined() || axis >= x.rank()) throw ShapeError("softmax: invalid axis");
  const auto sp = split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.extent; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) z += std::exp(x[base + k * sp.inner] - mx);
      const double logz = mx + std::log(z);
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const double lp = x[base + k * sp.inner] - logz;
        out[base + k * sp.inner] = log_space ? lp : std::exp(lp);
      }
    }
  }
  auto backward = [sp, log_space](const TensorImpl& self, std::span<const double> gout,
                                  std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    const auto& y = self.data;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const std::size_t j = base + k * sp.inner;
          dot += log_space ? gout[j] : gout[j] * y[j];
        }
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const std::size_t j = base + k * sp.inner;
          (*pg[0])[j] += log_space ? gout[j] - std::exp(y[j]) * dot : y[j] * (gout[j] - dot);
        }
      }
    }
  };
  return Tensor::from_op(x.shape(), std::move(out), {x.impl()}, std::move(backward),
                         log_space ? "log_softmax" : "softmax");
}

}  // namespace detail

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  return detail::softmax_impl(x, axis, false);
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  return detail::softmax_impl(x, axis, true);
}

// ---------------------------------------------------------------------------
// Dense and reductions

/// x[N, F] * weight[F, G] + bias[G].
inline Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 2, "dense input");
  detail::require_rank(weight, 2, "dense weight");
  detail::require_rank(bias, 1, "dense bias");
  const std::size_t N = x.dim(0), F = x.dim(1), G = weight.dim(1);
  if (weight.dim(0) != F || bias.dim(0) != G) {
    throw ShapeError("dense: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  std::vector<double> out(N * G);
  detail::MutMap om(out.data(), N, G);
  om.noalias() = detail::ConstMap(x.data().data(), N, F) * detail::ConstMap(weight.data().data(), F, G);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < G; ++g) om(n, g) += bias[g];
  }
  auto backward = [N, F, G](const TensorImpl& self, std::span<const double> gout,
                            std::span<std::vector<double>*> pg) {
    const detail::ConstMap gm(gout.data(), N, G);
    const detail::ConstMap xm(self.parents[0]->data.data(), N, F);
    const detail::ConstMap wm(self.parents[1]->data.data(), F, G);
    if (pg[0]) detail::MutMap(pg[0]->data(), N, F).noalias() += gm * wm.transpose();
    if (pg[1]) detail::MutMap(pg[1]->data(), F, G).noalias() += xm.transpose() * gm;
    if (pg[2]) {
      for (std::size_t g = 0; g < G; ++g) {
        double acc = 0.0;
        for (std::size_t i = 0; i < N; ++i) acc += gout[i * G + g];
        (*pg[2])[g] += acc;
      }
    }
  };
  return Tensor::from_op({N, G}, std::move(out), {x.impl(), weight.impl(), bias.impl()},
                         std::move(backward), "dense");
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto backward = [](const TensorImpl&, std::span<const double> gout,
                     std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    for (double& g : *pg[0]) g += gout[0];
  };
  return Tensor::from_op({1}, {acc}, {x.impl()}, std::move(backward), "sum");
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// out[n] = x[n, index[n]] for x of shape [N, K].
inline Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  detail::require_rank(x, 2, "pick");
  const std::size_t N = x.dim(0), K = x.dim(1);
  if (index.size() != N) throw ShapeError("pick: index count does not match batch");
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (idx[n] >= K) throw ShapeError("pick: index " + std::to_string(idx[n]) + " out of range");
    out[n] = x[n * K + idx[n]];
  }
  auto backward = [idx, K](const TensorImpl&, std::span<const double> gout,
                           std::span<std::vector<double>*> pg) {
    if (!pg[0]) return;
    for (std::size_t n = 0; n < idx.size(); ++n) (*pg[0])[n * K + idx[n]] += gout[n];
  };
  return Tensor::from_op({N}, std::move(out), {x.impl()}, std::move(backward), "pick");
}

/// Row-wise Euclidean distance between a[N, F] and b[N, F]. At zero distance
/// the subgradient 0 is used.
inline Tensor pair_distance(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "pair_distance");
  if (a.shape() != b.shape()) {
    throw ShapeError("pair_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t N = a.dim(0), F = a.dim(1);
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0.0;
    for (std::size_t f = 0; f < F; ++f) {
      const double d = a[n * F + f] - b[n * F + f];
      acc += d * d;
    }
    out[n] = std::sqrt(acc);
  }
  auto backward = [N, F](const TensorImpl& self, std::span<const double> gout,
                         std::span<std::vector<double>*> pg) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    for (std::size_t n = 0; n < N; ++n) {
      const double dist = self.data[n];
      if (dist == 0.0) continue;
      for (std::size_t f = 0; f < F; ++f) {
        const double g = gout[n] * (av[n * F + f] - bv[n * F + f]) / dist;
        if (pg[0]) (*pg[0])[n * F + f] += g;
        if (pg[1]) (*pg[1])[n * F + f] -= g;
      }
    }
  };
  return Tensor::from_op({N}, std::move(out), {a.impl(), b.impl()}, std::move(backward),
                         "pair_distance");
}

}  // namespace aidnet::vg
