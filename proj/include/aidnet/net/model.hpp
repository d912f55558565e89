#pragma once

// Dual-path classifier: a small 3D conv backbone, an optional soft attention
// gate (SAG) that re-weights block-2 features with the block-4 maps as gate,
// and a dense head over concat(GAP(block 4), projected GAP(gated block 2)).

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/volgrid.hpp"

namespace aidnet::net {

using vg::Shape;
using vg::Tensor;

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::size_t kInputChannels = 2;
inline constexpr std::size_t kSagChannels = 32;
inline constexpr std::size_t kSagFeatures = 64;
inline constexpr std::array<std::size_t, 4> kBlockChannels{16, 32, 64, 64};

struct ArchConfig {
  bool use_sag = true;
  // Blocks 1..pooled_blocks end in a 2x max pool.
  std::size_t pooled_blocks = 2;

  void validate() const {
    if (pooled_blocks > kBlockChannels.size()) {
      throw ShapeError("pooled_blocks must be at most 4, got " + std::to_string(pooled_blocks));
    }
  }
};

/// aid: dual path + SAG; id: dual path, no SAG; single: one path + SAG, CE only.
enum class Mode { Aid, Id, Single };

inline Mode parse_mode(const std::string& s) {
  if (s == "aid") return Mode::Aid;
  if (s == "id") return Mode::Id;
  if (s == "single") return Mode::Single;
  throw ShapeError("unknown mode '" + s + "' (expected aid, id or single)");
}

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Aid: return "aid";
    case Mode::Id: return "id";
    case Mode::Single: return "single";
  }
  return "aid";
}

inline ArchConfig arch_for(Mode m, std::size_t pooled_blocks = 2) {
  ArchConfig a;
  a.use_sag = m != Mode::Id;
  a.pooled_blocks = pooled_blocks;
  return a;
}

struct ConvBlock {
  Tensor weight;  // [C_out, C_in, 3, 3, 3]
  Tensor bias;    // [C_out]
};

struct SagParams {
  Tensor w_x;    // [32, 32, 1, 1, 1]
  Tensor w_g;    // [32, 64, 1, 1, 1]
  Tensor b;      // [1, 32, 1, 1, 1]
  Tensor psi;    // [1, 32, 1, 1, 1]
  Tensor b_psi;  // [1, 1, 1, 1, 1]
  Tensor proj_w; // [64, 32, 1, 1, 1]
  Tensor proj_b; // [64]
};

struct AidNetParams {
  ArchConfig arch;
  std::array<ConvBlock, 4> backbone;
  std::optional<SagParams> sag;
  Tensor head_w;  // [64 or 128, 3]
  Tensor head_b;  // [3]

  std::size_t embedding_width() const { return kBlockChannels.back() + (sag ? kSagFeatures : 0); }

  /// Stable order used by the optimizer and checkpoints.
  vg::NamedTensors named() const {
    vg::NamedTensors out;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      const std::string p = "backbone." + std::to_string(i) + ".";
      out.emplace_back(p + "weight", backbone[i].weight);
      out.emplace_back(p + "bias", backbone[i].bias);
    }
    if (sag) {
      out.emplace_back("sag.w_x", sag->w_x);
      out.emplace_back("sag.w_g", sag->w_g);
      out.emplace_back("sag.b", sag->b);
      out.emplace_back("sag.psi", sag->psi);
      out.emplace_back("sag.b_psi", sag->b_psi);
      out.emplace_back("sag.proj_w", sag->proj_w);
      out.emplace_back("sag.proj_b", sag->proj_b);
    }
    out.emplace_back("head.weight", head_w);
    out.emplace_back("head.bias", head_b);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  /// Deep copy: fresh leaves, no shared storage with *this.
  AidNetParams clone() const {
    AidNetParams c = *this;
    for (auto& b : c.backbone) {
      b.weight = b.weight.clone();
      b.bias = b.bias.clone();
    }
    if (c.sag) {
      for (Tensor* t : {&c.sag->w_x, &c.sag->w_g, &c.sag->b, &c.sag->psi, &c.sag->b_psi,
                        &c.sag->proj_w, &c.sag->proj_b})
        *t = t->clone();
    }
    c.head_w = head_w.clone();
    c.head_b = head_b.clone();
    return c;
  }
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  std::vector<double> v(vg::numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace detail

/// He (fan-in) normal weights, zero biases.
inline AidNetParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  AidNetParams p;
  p.arch = arch;
  std::size_t in = kInputChannels;
  for (std::size_t i = 0; i < kBlockChannels.size(); ++i) {
    const std::size_t out = kBlockChannels[i];
    p.backbone[i].weight = detail::he_normal({out, in, 3, 3, 3}, in * 27, 2.0, rng);
    p.backbone[i].bias = Tensor::zeros({out}, true);
    in = out;
  }
  if (arch.use_sag) {
    SagParams s;
    s.w_x = detail::he_normal({kSagChannels, kBlockChannels[1], 1, 1, 1}, kBlockChannels[1], 1.0, rng);
    s.w_g = detail::he_normal({kSagChannels, kBlockChannels[3], 1, 1, 1}, kBlockChannels[3], 1.0, rng);
    s.b = Tensor::zeros({1, kSagChannels, 1, 1, 1}, true);
    s.psi = detail::he_normal({1, kSagChannels, 1, 1, 1}, kSagChannels, 1.0, rng);
    s.b_psi = Tensor::zeros({1, 1, 1, 1, 1}, true);
    s.proj_w = detail::he_normal({kSagFeatures, kBlockChannels[1], 1, 1, 1}, kBlockChannels[1], 1.0, rng);
    s.proj_b = Tensor::zeros({kSagFeatures}, true);
    p.sag = std::move(s);
  }
  const std::size_t width = p.embedding_width();
  p.head_w = detail::he_normal({width, kNumClasses}, width, 1.0, rng);
  p.head_b = Tensor::zeros({kNumClasses}, true);
  return p;
}

/// Rebuilds parameters from checkpoint entries; SAG presence is inferred.
inline AidNetParams params_from_named(const vg::NamedTensors& entries, std::size_t pooled_blocks) {
  auto find = [&](const std::string& name) -> std::optional<Tensor> {
    for (const auto& [n, t] : entries) {
      if (n == name) {
        Tensor c = t.detach();
        c.set_requires_grad(true);
        return c;
      }
    }
    return std::nullopt;
  };
  auto need = [&](const std::string& name) {
    auto t = find(name);
    if (!t) throw DataError("checkpoint is missing " + name);
    return *t;
  };
  ArchConfig arch;
  arch.pooled_blocks = pooled_blocks;
  arch.use_sag = find("sag.psi").has_value();
  AidNetParams ref = init_params(arch, 0);
  AidNetParams p = ref;
  for (std::size_t i = 0; i < p.backbone.size(); ++i) {
    const std::string pre = "backbone." + std::to_string(i) + ".";
    p.backbone[i].weight = need(pre + "weight");
    p.backbone[i].bias = need(pre + "bias");
  }
  if (arch.use_sag) {
    p.sag->w_x = need("sag.w_x");
    p.sag->w_g = need("sag.w_g");
    p.sag->b = need("sag.b");
    p.sag->psi = need("sag.psi");
    p.sag->b_psi = need("sag.b_psi");
    p.sag->proj_w = need("sag.proj_w");
    p.sag->proj_b = need("sag.proj_b");
  }
  p.head_w = need("head.weight");
  p.head_b = need("head.bias");
  const auto got = p.named();
  const auto want = ref.named();
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (got[i].second.shape() != want[i].second.shape()) {
      throw DataError("checkpoint entry " + got[i].first + " has shape " +
                      vg::shape_str(got[i].second.shape()) + ", expected " +
                      vg::shape_str(want[i].second.shape()));
    }
  }
  if (entries.size() != got.size()) throw DataError("checkpoint has unexpected extra entries");
  return p;
}

struct Attention {
  Tensor attended;  // alpha * x_l, [N, 32, ...]
  Tensor alpha;     // [N, 1, ...], values in (0, 1)
};

/// alpha = sigmoid(psi(relu(W_x x_l + up(W_g g) + b)) + b_psi).
inline Attention sag_gate(const SagParams& s, const Tensor& x_l, const Tensor& g) {
  if (x_l.rank() != 5 || g.rank() != 5) throw ShapeError("sag_gate: expected rank-5 feature maps");
  if (x_l.dim(1) != s.w_x.dim(1) || g.dim(1) != s.w_g.dim(1)) {
    throw ShapeError("sag_gate: channels " + std::to_string(x_l.dim(1)) + "/" +
                     std::to_string(g.dim(1)) + " do not match gate parameters");
  }
  const vg::Triple target{x_l.dim(2), x_l.dim(3), x_l.dim(4)};
  for (std::size_t a = 0; a < 3; ++a) {
    if (g.dim(2 + a) > target[a]) throw ShapeError("sag_gate: gate is finer than gated features");
  }
  const Tensor wx = vg::conv3d(x_l, s.w_x, Tensor{});
  Tensor wg = vg::conv3d(g, s.w_g, Tensor{});
  if (g.dim(2) != target[0] || g.dim(3) != target[1] || g.dim(4) != target[2]) {
    wg = vg::upsample_nearest(wg, target);
  }
  const Tensor q = vg::relu(vg::add(vg::add(wx, wg), s.b));
  const Tensor alpha = vg::sigmoid(vg::add(vg::conv3d(q, s.psi, Tensor{}), s.b_psi));
  return {vg::mul(alpha, x_l), alpha};
}

struct Forward {
  Tensor logits;        // [N, 3]
  Tensor embedding;     // [N, 128] (64 without SAG)
  Tensor gap_feats;     // [N, 64]
  Tensor sag_feats;     // [N, 64], undefined without SAG
  Tensor pre_gap_maps;  // block-4 output
  Tensor x_l;           // block-2 output
  Tensor alpha;         // undefined without SAG
};

struct Features {
  Tensor x_l;
  Tensor maps;
};

inline Features backbone(const AidNetParams& p, const Tensor& x) {
  if (x.rank() != 5 || x.dim(1) != kInputChannels) {
    throw ShapeError("model input must be [N, 2, D, H, W], got " + vg::shape_str(x.shape()));
  }
  Features f;
  Tensor h = x;
  for (std::size_t i = 0; i < p.backbone.size(); ++i) {
    h = vg::relu(vg::conv3d(h, p.backbone[i].weight, p.backbone[i].bias, {1, 1, 1}, {1, 1, 1}));
    if (i < p.arch.pooled_blocks) h = vg::maxpool3d(h, {2, 2, 2}, {2, 2, 2});
    if (i == 1) f.x_l = h;
  }
  f.maps = h;
  return f;
}

/// Head evaluated from given block-2 features and pre-GAP maps.
inline Forward forward_from_maps(const AidNetParams& p, const Tensor& x_l, const Tensor& maps) {
  Forward f;
  f.x_l = x_l;
  f.pre_gap_maps = maps;
  f.gap_feats = vg::global_avg_pool(maps);
  f.embedding = f.gap_feats;
  if (p.sag) {
    const Attention a = sag_gate(*p.sag, x_l, maps);
    f.alpha = a.alpha;
    const std::size_t N = x_l.dim(0), C = x_l.dim(1);
    const Tensor pooled = vg::reshape(vg::global_avg_pool(a.attended), {N, C, 1, 1, 1});
    f.sag_feats = vg::flatten(vg::conv3d(pooled, p.sag->proj_w, p.sag->proj_b));
    f.embedding = vg::concat(f.gap_feats, f.sag_feats, 1);
  }
  f.logits = vg::dense(f.embedding, p.head_w, p.head_b);
  return f;
}

inline Forward forward_single(const AidNetParams& p, const Tensor& x) {
  const Features feats = backbone(p, x);
  return forward_from_maps(p, feats.x_l, feats.maps);
}

struct PairForward {
  Forward first;
  Forward second;
  Tensor d_w;  // [N]
};

/// Both paths read the same parameter tensors.
inline PairForward forward_pair(const AidNetParams& p, const Tensor& scan, const Tensor& rescan) {
  if (scan.shape() != rescan.shape()) {
    throw ShapeError("scan " + vg::shape_str(scan.shape()) + " and rescan " +
                     vg::shape_str(rescan.shape()) + " differ");
  }
  PairForward out;
  out.first = forward_single(p, scan);
  out.second = forward_single(p, rescan);
  out.d_w = vg::pair_distance(out.first.embedding, out.second.embedding);
  return out;
}

struct Prediction {
  int label = 0;
  std::array<double, 3> probabilities{};
  double binary_score = 0.0;
};

/// argmax of the class probabilities; binary score = p1 + p2.
inline Prediction prediction_from_probabilities(const std::array<double, 3>& prob) {
  Prediction pr;
  pr.probabilities = prob;
  for (int k = 1; k < 3; ++k) {
    if (prob[static_cast<std::size_t>(k)] > prob[static_cast<std::size_t>(pr.label)]) pr.label = k;
  }
  pr.binary_score = prob[1] + prob[2];
  return pr;
}

inline std::vector<Prediction> predict(const AidNetParams& p, const Tensor& x) {
  vg::NoGradGuard guard;
  const Tensor prob = vg::softmax(forward_single(p, x).logits, 1);
  std::vector<Prediction> out;
  for (std::size_t n = 0; n < prob.dim(0); ++n) {
    out.push_back(prediction_from_probabilities({prob[n * 3], prob[n * 3 + 1], prob[n * 3 + 2]}));
  }
  return out;
}

}  // namespace aidnet::net
