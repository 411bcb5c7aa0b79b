#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "treeseg/error.hpp"
#include "treeseg/eval.hpp"
#include "treeseg/kde.hpp"
#include "treeseg/point_cloud.hpp"
#include "treeseg/rater_net.hpp"
#include "treeseg/ratings.hpp"

namespace treeseg {

/// w_i = (sum c / K) / c_i, so every class carries the same total weight
/// w_i c_i = sum c / K.
inline std::array<double, kNumClasses> class_weights(const std::array<std::size_t, kNumClasses>& counts) {
  double total = 0;
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (counts[i] == 0)
      throw InvalidArgument("class " + to_string(static_cast<RatingClass>(i)) + " is absent from the training set");
    total += static_cast<double>(counts[i]);
  }
  std::array<double, kNumClasses> w{};
  for (std::size_t i = 0; i < kNumClasses; ++i)
    w[i] = total / static_cast<double>(kNumClasses) / static_cast<double>(counts[i]);
  return w;
}

/// Cluster members with z replaced by hag: the terrain-free frame the rater
/// sees, so clusters on slopes voxelize like clusters on flat ground.
inline PointCloud normalized_cluster(const PointCloud& tile, std::span<const std::uint32_t> members) {
  PointCloud out;
  out.reserve(members.size());
  for (auto i : members) out.push_back(tile.x[i], tile.y[i], tile.hag[i], tile.hag[i]);
  return out;
}

struct RatedCluster {
  PointCloud points;
  RatingClass label = RatingClass::Single;
};

struct Split {
  std::vector<std::size_t> train, validation;
};

/// Per-class shuffle, then the first round(fraction * n_c) of each class go
/// to validation (at least one when the class has two or more examples).
inline Split stratified_split(std::span<const RatingClass> labels, double validation_fraction, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Split s;
  for (auto cls : kAllClasses) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto nv = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(idx.size())));
    if (validation_fraction > 0 && nv == 0 && idx.size() >= 2) nv = 1;
    nv = std::min(nv, idx.size() > 0 ? idx.size() - 1 : 0);
    s.validation.insert(s.validation.end(), idx.begin(), idx.begin() + static_cast<long>(nv));
    s.train.insert(s.train.end(), idx.begin() + static_cast<long>(nv), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  return s;
}

struct RaterTrainConfig {
  RaterTopology topology;
  AdamConfig adam;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  double validation_fraction = 0.2;
  bool augment = true;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const {
    return {{"topology", topology.to_json()},
            {"learning_rate", adam.learning_rate},
            {"weight_decay", adam.weight_decay},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"validation_fraction", validation_fraction},
            {"augment", augment},
            {"seed", seed}};
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_accuracy = 0;
  double val_weighted_accuracy = 0;
};

struct RaterTrainResult {
  RaterNet<float> net;  // parameters of the best validation epoch
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  ConfusionMatrix val_confusion;  // of the returned parameters
  std::array<double, kNumClasses> weights{};
  std::array<std::size_t, kNumClasses> train_counts{};
};

/// Class and confidence (max softmax probability) for one cluster.
struct Prediction {
  RatingClass cls = RatingClass::Single;
  double confidence = 0;
};

template <class T>
std::vector<Prediction> rate_grids(RaterNet<T>& net, std::span<const T> grids, std::size_t n,
                                   std::size_t batch_size = 16) {
  std::vector<Prediction> out;
  out.reserve(n);
  const std::size_t v = net.input_size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::size_t m = std::min(batch_size, n - start);
    auto p = net.predict(grids.subspan(start * v, m * v), m);
    for (std::size_t i = 0; i < m; ++i) {
      auto* row = p.data() + i * kNumClasses;
      auto k = static_cast<std::size_t>(std::max_element(row, row + kNumClasses) - row);
      out.push_back({static_cast<RatingClass>(k), static_cast<double>(row[k])});
    }
  }
  return out;
}

template <class T>
std::vector<Prediction> rate_clusters(RaterNet<T>& net, std::span<const PointCloud> clusters,
                                      std::size_t batch_size = 16) {
  const auto& topo = net.topology();
  std::vector<Prediction> out;
  out.reserve(clusters.size());
  std::vector<T> buf;
  for (std::size_t start = 0; start < clusters.size(); start += batch_size) {
    std::size_t m = std::min(batch_size, clusters.size() - start);
    buf.clear();
    for (std::size_t i = 0; i < m; ++i) {
      auto g = kde_voxelize<T>(clusters[start + i], topo.resolution, topo.extent);
      buf.insert(buf.end(), g.values.begin(), g.values.end());
    }
    auto part = rate_grids<T>(net, buf, m, m);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <class T>
ConfusionMatrix evaluate_rater(RaterNet<T>& net, std::span<const PointCloud> clusters,
                               std::span<const RatingClass> labels) {
  ConfusionMatrix cm;
  auto preds = rate_clusters(net, clusters);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(labels[i], preds[i].cls);
  return cm;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains on `train`, selecting the epoch with the best validation weighted
/// accuracy (accuracy breaks ties, earlier epochs win exact ties). Without a
/// validation set the last epoch is returned. Deterministic for a fixed seed.
inline RaterTrainResult train_rater(std::span<const RatedCluster> train, std::span<const RatedCluster> validation,
                                    const RaterTrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (train.empty()) throw InvalidArgument("empty training set");
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw InvalidArgument("batch size and epochs must be positive");
  RaterTrainResult result{RaterNet<float>(cfg.topology, cfg.seed), {}, 0, {}, {}, {}};
  for (const auto& ex : train) ++result.train_counts[static_cast<std::size_t>(ex.label)];
  result.weights = class_weights(result.train_counts);

  auto& net = result.net;
  const auto& topo = net.topology();
  const std::size_t v = net.input_size();
  Adam<float> adam(cfg.adam);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<PointCloud> val_points;
  std::vector<RatingClass> val_labels;
  for (const auto& ex : validation) {
    val_points.push_back(ex.points);
    val_labels.push_back(ex.label);
  }

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<float> batch;
  std::vector<RatingClass> labels;
  std::vector<float> dlogits;
  double best_wacc = -1, best_acc = -1;
  std::vector<NamedTensor<float>> best = net.tensors();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t m = std::min(cfg.batch_size, order.size() - start);
      batch.assign(m * v, 0.0f);
      labels.clear();
      for (std::size_t i = 0; i < m; ++i) {
        const auto& ex = train[order[start + i]];
        VoxelGrid<float> g = cfg.augment ? kde_voxelize<float>(augment_rotation_z(ex.points, rng), topo.resolution, topo.extent)
                                         : kde_voxelize<float>(ex.points, topo.resolution, topo.extent);
        std::copy(g.values.begin(), g.values.end(), batch.begin() + static_cast<long>(i * v));
        labels.push_back(ex.label);
      }
      net.zero_grad();
      auto logits = net.forward(batch, m, Mode::train);
      float loss = weighted_cross_entropy<float>(logits, labels, result.weights, &dlogits);
      if (!std::isfinite(loss))
        throw Error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(batches) + " (learning rate " + std::to_string(cfg.adam.learning_rate) + ")");
      net.backward(dlogits);
      adam.step(net);
      loss_sum += loss;
      ++batches;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(batches);
    if (!val_points.empty()) {
      auto am = accuracy_metrics(evaluate_rater(net, std::span<const PointCloud>(val_points), val_labels));
      em.val_accuracy = am.accuracy;
      em.val_weighted_accuracy = am.weighted_accuracy;
      if (em.val_weighted_accuracy > best_wacc || (em.val_weighted_accuracy == best_wacc && em.val_accuracy > best_acc)) {
        best_wacc = em.val_weighted_accuracy;
        best_acc = em.val_accuracy;
        best = net.tensors();
        result.best_epoch = epoch;
      }
    } else {
      result.best_epoch = epoch;
      best = net.tensors();
    }
    result.history.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  net.tensors() = best;
  if (!val_points.empty()) result.val_confusion = evaluate_rater(net, std::span<const PointCloud>(val_points), val_labels);
  return result;
}

/// Stratified split of `data` followed by train_rater.
inline RaterTrainResult train_rater(std::span<const RatedCluster> data, const RaterTrainConfig& cfg,
                                    const EpochCallback& on_epoch = {}) {
  std::vector<RatingClass> labels;
  for (const auto& ex : data) labels.push_back(ex.label);
  auto split = stratified_split(labels, cfg.validation_fraction, cfg.seed);
  std::vector<RatedCluster> tr, va;
  for (auto i : split.train) tr.push_back(data[i]);
  for (auto i : split.validation) va.push_back(data[i]);
  return train_rater(tr, va, cfg, on_epoch);
}

}  // namespace treeseg
