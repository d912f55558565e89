#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/net/data.hpp"
#include "aidnet/net/loss.hpp"
#include "aidnet/net/model.hpp"

namespace aidnet::net {

struct TrainConfig {
  Mode mode = Mode::Aid;
  double lr = 1e-4;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 2;
  LossConfig loss;
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double total_loss = 0.0;
  double ce1 = 0.0;
  double ce2 = 0.0;
  double contrastive = 0.0;
  double weighted_contrastive = 0.0;  // lambda * contrastive, the share in total_loss
  double val_binary_accuracy = 0.0;
};

inline constexpr const char* kTrainLogHeader =
    "epoch,total_loss,ce1,ce2,contrastive,weighted_contrastive,val_binary_accuracy";

inline void write_log_row(std::ostream& os, const EpochLog& e) {
  auto old = os.precision(17);
  os << e.epoch << ',' << e.total_loss << ',' << e.ce1 << ',' << e.ce2 << ',' << e.contrastive
     << ',' << e.weighted_contrastive << ',' << e.val_binary_accuracy << '\n';
  os.precision(old);
}

struct TrainResult {
  AidNetParams params;  // selected epoch
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
};

/// Predictions over `idx` (scan path only), evaluated in chunks without a graph.
inline std::vector<Prediction> predict_indices(const AidNetParams& p, const Dataset& d,
                                               std::span<const std::size_t> idx,
                                               std::size_t chunk = 8) {
  std::vector<Prediction> out;
  for (std::size_t s = 0; s < idx.size(); s += chunk) {
    const auto part = idx.subspan(s, std::min(chunk, idx.size() - s));
    const auto pr = predict(p, stack(d, part));
    out.insert(out.end(), pr.begin(), pr.end());
  }
  return out;
}

/// Fraction of samples whose control / calcium call is right.
inline double binary_accuracy(const AidNetParams& p, const Dataset& d,
                              std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  const auto pr = predict_indices(p, d, idx);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    hit += (pr[i].label > 0) == (d.samples[idx[i]].label > 0);
  }
  return static_cast<double>(hit) / static_cast<double>(idx.size());
}

/// Seeded-shuffle Adam loop. Keeps the epoch with the best validation binary
/// accuracy (earliest on ties; the last epoch when there is no validation set).
inline TrainResult train(const AidNetParams& init, const Dataset& data,
                         std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train_idx.empty()) throw DataError("training set is empty");
  if (cfg.batch_size == 0) throw ShapeError("batch_size must be >= 1");
  if (!(cfg.lr >= 0.0)) throw ShapeError("learning rate must be >= 0");
  cfg.loss.validate();
  if ((cfg.mode == Mode::Id) == init.sag.has_value()) {
    throw ShapeError("parameters do not match training mode " + mode_name(cfg.mode));
  }

  AidNetParams params = init.clone();
  std::vector<Tensor> tensors = params.tensors();
  vg::AdamState opt = vg::make_adam(tensors, cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());

  TrainResult result;
  double best_acc = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches) {
      const std::span<const std::size_t> batch(order.data() + start,
                                               std::min(cfg.batch_size, order.size() - start));
      const auto labels = labels_of(data, batch);
      LossParts parts;
      try {
        if (cfg.mode == Mode::Single) {
          const Forward f = forward_single(params, stack(data, batch));
          parts.ce1 = cross_entropy(f.logits, labels, cfg.loss.class_weights);
          parts.total = parts.ce1;
        } else {
          const PairForward f = forward_pair(params, stack(data, batch), stack(data, batch, true));
          const auto y = similarity_from_labels(labels, labels);
          parts = total_loss(f, labels, labels, y, cfg.loss);
        }
        for (auto& t : tensors) t.zero_grad();
        parts.total.backward();
        vg::adam_step(tensors, opt);
      } catch (const NumericError& e) {
        throw NumericError("non-finite value in epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": " + e.what());
      }
      log.total_loss += parts.total.item();
      log.ce1 += parts.ce1.item();
      if (parts.ce2.defined()) log.ce2 += parts.ce2.item();
      if (parts.contrastive.defined()) {
        log.contrastive += parts.contrastive.item();
        log.weighted_contrastive += cfg.loss.lambda * parts.contrastive.item();
      }
    }
    const double nb = static_cast<double>(batches);
    log.total_loss /= nb;
    log.ce1 /= nb;
    log.ce2 /= nb;
    log.contrastive /= nb;
    log.weighted_contrastive /= nb;
    log.val_binary_accuracy = binary_accuracy(params, data, val_idx);
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (val_idx.empty() || log.val_binary_accuracy > best_acc) {
      best_acc = log.val_binary_accuracy;
      result.best_epoch = epoch;
      result.params = params.clone();
    }
  }
  if (cfg.max_epochs == 0) result.params = params.clone();
  return result;
}

// -- checkpoints -------------------------------------------------------------

inline void save_model(const std::filesystem::path& path, const AidNetParams& p) {
  auto entries = p.named();
  entries.emplace_back("arch.pooled_blocks",
                       Tensor::scalar(static_cast<double>(p.arch.pooled_blocks)));
  vg::save_checkpoint(path, entries);
}

inline AidNetParams load_model(const std::filesystem::path& path) {
  auto entries = vg::load_checkpoint(path);
  std::size_t pooled = 2;
  for (auto it = entries.begin(); it != entries.end(); ++it) {
    if (it->first == "arch.pooled_blocks") {
      const double v = it->second.item();
      if (v < 0.0 || v > 4.0 || v != std::floor(v)) throw DataError("bad arch.pooled_blocks");
      pooled = static_cast<std::size_t>(v);
      entries.erase(it);
      break;
    }
  }
  return params_from_named(entries, pooled);
}

}  // namespace aidnet::net
