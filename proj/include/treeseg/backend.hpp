#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeseg/cluster.hpp"
#include "treeseg/error.hpp"
#include "treeseg/features.hpp"
#include "treeseg/grid_index.hpp"
#include "treeseg/io.hpp"
#include "treeseg/labels.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg {

namespace fs = std::filesystem;

/// Loss weight of a pseudo-label: Gray points carry no supervision.
inline double semantic_weight(Semantic s) { return s == Semantic::Gray ? 0.0 : 1.0; }

/// Two-layer perceptron scoring P(tree) from standardized point features.
struct BackendParams {
  static constexpr std::size_t kHidden = 16;
  std::array<double, kFeatureCount> mean{}, scale{};
  std::vector<double> w1, b1, w2;  // [H x F], [H], [H]
  double b2 = 0;
  std::uint64_t epochs_trained = 0;

  static BackendParams initial(std::uint64_t seed) {
    BackendParams p;
    p.scale.fill(1.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    p.w1.resize(kHidden * kFeatureCount);
    for (auto& v : p.w1) v = n(rng) * std::sqrt(2.0 / kFeatureCount);
    p.b1.assign(kHidden, 0.0);
    p.w2.resize(kHidden);
    for (auto& v : p.w2) v = n(rng) * std::sqrt(1.0 / kHidden);
    return p;
  }

  std::array<double, kFeatureCount> standardize(const std::array<float, kFeatureCount>& raw) const {
    std::array<double, kFeatureCount> x{};
    for (std::size_t f = 0; f < kFeatureCount; ++f) x[f] = (raw[f] - mean[f]) / scale[f];
    return x;
  }

  /// Logit of P(tree); fills the hidden activations when asked.
  double logit(const std::array<double, kFeatureCount>& x, double* hidden = nullptr) const {
    double z = b2;
    for (std::size_t h = 0; h < kHidden; ++h) {
      double a = b1[h];
      for (std::size_t f = 0; f < kFeatureCount; ++f) a += w1[h * kFeatureCount + f] * x[f];
      a = std::max(0.0, a);
      if (hidden) hidden[h] = a;
      z += w2[h] * a;
    }
    return z;
  }

  bool operator==(const BackendParams&) const = default;
};

inline nlohmann::json to_json(const BackendParams& p) {
  return {{"model", "mlp"},
          {"hidden", BackendParams::kHidden},
          {"mean", p.mean},
          {"scale", p.scale},
          {"w1", p.w1},
          {"b1", p.b1},
          {"w2", p.w2},
          {"b2", p.b2},
          {"epochs_trained", p.epochs_trained}};
}

inline BackendParams backend_params_from_json(const nlohmann::json& j, const std::string& context) {
  try {
    BackendParams p;
    if (j.at("model") != "mlp" || j.at("hidden").get<std::size_t>() != BackendParams::kHidden)
      throw FormatError("unsupported model");
    p.mean = j.at("mean").get<std::array<double, kFeatureCount>>();
    p.scale = j.at("scale").get<std::array<double, kFeatureCount>>();
    p.w1 = j.at("w1").get<std::vector<double>>();
    p.b1 = j.at("b1").get<std::vector<double>>();
    p.w2 = j.at("w2").get<std::vector<double>>();
    p.b2 = j.at("b2").get<double>();
    p.epochs_trained = j.value("epochs_trained", std::uint64_t{0});
    if (p.w1.size() != BackendParams::kHidden * kFeatureCount || p.b1.size() != BackendParams::kHidden ||
        p.w2.size() != BackendParams::kHidden)
      throw FormatError("parameter shapes do not match");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": malformed backend parameters: " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(context + ": " + e.what());
  }
}

inline void write_backend_params(const fs::path& path, const BackendParams& p) {
  // max_digits10 round trip keeps resumed runs bit-identical
  io::write_atomic(path, to_json(p).dump());
}

inline BackendParams read_backend_params(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return backend_params_from_json(j, path.string());
}

/// One supervised example for the scorer.
struct LabeledFeature {
  std::array<float, kFeatureCount> x{};
  Semantic label = Semantic::Ground;
};

inline std::vector<LabeledFeature> labeled_features(const PointFeatures& f, const LabelMap& labels) {
  if (f.size() != labels.size()) throw InvalidArgument("features and labels cover different point counts");
  std::vector<LabeledFeature> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = {f.row(i), labels.semantic[i]};
  return out;
}

/// Weighted binary cross-entropy, Tree = 1, Ground = 0, normalized by the
/// summed weights; Gray points have weight 0 and so cannot affect it.
inline double backend_loss(const BackendParams& p, std::span<const LabeledFeature> data) {
  double loss = 0, wsum = 0;
  for (const auto& d : data) {
    double w = semantic_weight(d.label);
    if (w == 0) continue;
    double z = p.logit(p.standardize(d.x));
    double y = d.label == Semantic::Tree ? 1.0 : 0.0;
    // log(1 + e^-|z|) form of the logistic loss
    loss += w * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
    wsum += w;
  }
  if (wsum == 0) throw Error("no supervised points");
  return loss / wsum;
}

struct BackendTrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 256;
  double learning_rate = 1e-2;
  std::uint64_t seed = 1;
};

/// Adam on the weighted loss over the supervised (non-Gray) points.
/// Standardization statistics are fixed on the first training run and kept
/// when training continues from `init`.
inline BackendParams train_backend(std::span<const LabeledFeature> data, const BackendTrainConfig& cfg,
                                   const BackendParams* init = nullptr) {
  if (cfg.epochs == 0) throw InvalidArgument("epochs must be at least 1");
  std::vector<std::uint32_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (semantic_weight(data[i].label) > 0) idx.push_back(static_cast<std::uint32_t>(i));
  if (idx.empty()) throw Error("no supervised points");

  BackendParams p = init ? *init : BackendParams::initial(cfg.seed);
  if (!init) {
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      double s = 0, s2 = 0;
      for (auto i : idx) {
        s += data[i].x[f];
        s2 += static_cast<double>(data[i].x[f]) * data[i].x[f];
      }
      double n = static_cast<double>(idx.size());
      p.mean[f] = s / n;
      double var = std::max(0.0, s2 / n - p.mean[f] * p.mean[f]);
      p.scale[f] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
  }

  const std::size_t H = BackendParams::kHidden, F = kFeatureCount;
  const std::size_t nparam = H * F + H + H + 1;
  std::vector<double> m(nparam, 0.0), v(nparam, 0.0), g(nparam);
  auto param = [&](std::size_t k) -> double& {
    if (k < H * F) return p.w1[k];
    k -= H * F;
    if (k < H) return p.b1[k];
    k -= H;
    if (k < H) return p.w2[k];
    return p.b2;
  };
  const double b1c = 0.9, b2c = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::mt19937_64 rng(cfg.seed + 0x51ed2701ULL * (p.epochs_trained + 1));
  std::array<double, BackendParams::kHidden> hidden{};

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      std::size_t end = std::min(idx.size(), start + cfg.batch_size);
      std::fill(g.begin(), g.end(), 0.0);
      double wsum = 0;
      for (std::size_t b = start; b < end; ++b) {
        const auto& d = data[idx[b]];
        double w = semantic_weight(d.label);
        auto x = p.standardize(d.x);
        double z = p.logit(x, hidden.data());
        double y = d.label == Semantic::Tree ? 1.0 : 0.0;
        double dz = w * (1.0 / (1.0 + std::exp(-z)) - y);
        wsum += w;
        g[nparam - 1] += dz;
        for (std::size_t h = 0; h < H; ++h) {
          g[H * F + H + h] += dz * hidden[h];
          if (hidden[h] <= 0) continue;
          double da = dz * p.w2[h];
          g[H * F + h] += da;
          for (std::size_t f = 0; f < F; ++f) g[h * F + f] += da * x[f];
        }
      }
      ++t;
      double c1 = 1 - std::pow(b1c, static_cast<double>(t)), c2 = 1 - std::pow(b2c, static_cast<double>(t));
      for (std::size_t k = 0; k < nparam; ++k) {
        double gk = g[k] / wsum;
        m[k] = b1c * m[k] + (1 - b1c) * gk;
        v[k] = b2c * v[k] + (1 - b2c) * gk * gk;
        param(k) -= cfg.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      }
    }
  }
  p.epochs_trained += cfg.epochs;
  return p;
}

inline std::vector<float> tree_probability(const BackendParams& p, const PointFeatures& f) {
  std::vector<float> prob(f.size());
  for (std::size_t i = 0; i < f.size(); ++i)
    prob[i] = static_cast<float>(1.0 / (1.0 + std::exp(-p.logit(p.standardize(f.row(i))))));
  return prob;
}

struct InstanceParams {
  double threshold = 0.5;            // P(tree) above which a point is a tree point
  double seed_radius = 3.5;          // m, largest seed window (horizontal)
  double min_seed_radius = 1.5;      // m, smallest seed window; candidates are
                                     // the top point of each 1 m cell, so anything
                                     // under the cell diagonal acts like it
  double seed_radius_per_m = 0.15;   // window growth per metre of hag
  std::size_t min_points = 10;

  double window(double hag) const { return std::clamp(seed_radius_per_m * hag, min_seed_radius, seed_radius); }
};

/// Seeds are tree points with the largest hag within a horizontal window
/// that widens with their height (tall crowns are wide, short trees next to
/// them keep their own top), ties to the lower index. Every tree point joins
/// the seed with the smallest horizontal distance relative to the seed's
/// height; clusters below min_points are dropped. Clusters are numbered
/// id_base + 1, ... in seed index order.
inline ClusterSet extract_instances(const PointCloud& pc, std::span<const float> prob, const InstanceParams& ip = {},
                                    std::uint32_t id_base = 0) {
  if (prob.size() != pc.size()) throw InvalidArgument("probabilities do not match the cloud");
  ClusterSet set(pc.size());
  std::vector<std::uint32_t> tree;
  for (std::size_t i = 0; i < pc.size(); ++i)
    if (prob[i] > ip.threshold) tree.push_back(static_cast<std::uint32_t>(i));
  if (tree.empty()) return set;

  std::vector<double> tx(tree.size()), ty(tree.size());
  for (std::size_t k = 0; k < tree.size(); ++k) {
    tx[k] = pc.x[tree[k]];
    ty[k] = pc.y[tree[k]];
  }
  const double cell = 1.0;
  GridIndex index(tx, ty, cell);
  auto higher = [&](std::uint32_t a, std::uint32_t b) {  // local ids; is a above b?
    float ha = pc.hag[tree[a]], hb = pc.hag[tree[b]];
    return ha > hb || (ha == hb && a < b);
  };
  // Highest point per index cell, to skip whole cells below a candidate.
  double minx = *std::min_element(tx.begin(), tx.end()), miny = *std::min_element(ty.begin(), ty.end());
  auto col = [&](double x) { return static_cast<long>(std::floor((x - minx) / cell)); };
  auto row = [&](double y) { return static_cast<long>(std::floor((y - miny) / cell)); };
  std::map<std::pair<long, long>, std::uint32_t> top;
  for (std::uint32_t k = 0; k < tree.size(); ++k) {
    auto [it, fresh] = top.try_emplace({row(ty[k]), col(tx[k])}, k);
    if (!fresh && higher(k, it->second)) it->second = k;
  }

  std::vector<std::uint32_t> seeds;  // local ids
  for (const auto& [rc, k] : top) {
    bool is_seed = true;
    const double w = ip.window(pc.hag[tree[k]]);
    const double r2 = w * w;
    long reach = static_cast<long>(std::ceil(w / cell));
    for (long r = rc.first - reach; r <= rc.first + reach && is_seed; ++r)
      for (long c = rc.second - reach; c <= rc.second + reach && is_seed; ++c) {
        auto it = top.find({r, c});
        if (it == top.end() || it->second == k || !higher(it->second, k)) continue;
        for (auto q : index.cell_points(c, r)) {
          double dx = tx[q] - tx[k], dy = ty[q] - ty[k];
          if (dx * dx + dy * dy <= r2 && higher(q, k)) {
            is_seed = false;
            break;
          }
        }
      }
    if (is_seed) seeds.push_back(k);
  }
  std::sort(seeds.begin(), seeds.end());

  std::vector<double> reach(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s) reach[s] = std::max(1.0, static_cast<double>(pc.hag[tree[seeds[s]]]));
  std::vector<std::vector<std::uint32_t>> members(seeds.size());
  for (std::uint32_t k = 0; k < tree.size(); ++k) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t owner = 0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      double cost = std::hypot(tx[k] - tx[seeds[s]], ty[k] - ty[seeds[s]]) / reach[s];
      if (cost < best) {
        best = cost;
        owner = s;
      }
    }
    members[owner].push_back(tree[k]);
  }
  std::uint32_t next = id_base;
  for (auto& m : members) {
    if (m.size() < ip.min_points) continue;
    set.add(make_cluster(pc, ++next, std::move(m), ClusterSource::backend));
  }
  return set;
}

// --- Backend contract ---------------------------------------------------------

/// A segmentation model the loop can retrain and query. Parameters live in
/// a directory so that external processes can own their own formats.
class SegmentationBackend {
public:
  virtual ~SegmentationBackend() = default;
  virtual std::string name() const = 0;
  /// Trains for `epochs` on the labels (one LabelMap per tile), continuing
  /// from the parameters in `from` when it is non-empty; writes to `to`.
  virtual void train(const TileStore& tiles, const std::vector<LabelMap>& labels, std::size_t epochs,
                     std::uint64_t seed, const fs::path& from, const fs::path& to) = 0;
  /// One ClusterSet per tile, ids unique across tiles and above id_base.
  virtual std::vector<ClusterSet> predict(const TileStore& tiles, const fs::path& params, std::uint32_t id_base) = 0;
  /// Scratch directory for the next train/predict calls (job files, logs).
  virtual void set_workspace(const fs::path&) {}
};

/// Built-in backend: per-point scorer on geometric features plus geometric
/// instance grouping. Features are computed once per tile and cached.
class ReferenceBackend : public SegmentationBackend {
public:
  static constexpr const char* kParamsFile = "backend.json";

  explicit ReferenceBackend(InstanceParams ip = {}, BackendTrainConfig cfg = {}) : ip_(ip), cfg_(cfg) {}

  std::string name() const override { return "reference"; }

  void train(const TileStore& tiles, const std::vector<LabelMap>& labels, std::size_t epochs, std::uint64_t seed,
             const fs::path& from, const fs::path& to) override {
    if (labels.size() != tiles.tiles.size()) throw InvalidArgument("one label map per tile required");
    const auto& feats = features(tiles);
    std::vector<LabeledFeature> data;
    for (std::size_t t = 0; t < tiles.tiles.size(); ++t) {
      auto part = labeled_features(feats[t], labels[t]);
      data.insert(data.end(), part.begin(), part.end());
    }
    BackendTrainConfig cfg = cfg_;
    cfg.epochs = epochs;
    cfg.seed = seed;
    BackendParams p;
    if (!from.empty()) {
      auto prev = read_backend_params(from / kParamsFile);
      p = train_backend(data, cfg, &prev);
    } else {
      p = train_backend(data, cfg);
    }
    fs::create_directories(to);
    write_backend_params(to / kParamsFile, p);
  }

  std::vector<ClusterSet> predict(const TileStore& tiles, const fs::path& params, std::uint32_t id_base) override {
    auto p = read_backend_params(params / kParamsFile);
    const auto& feats = features(tiles);
    std::vector<ClusterSet> out;
    for (std::size_t t = 0; t < tiles.tiles.size(); ++t) {
      auto prob = tree_probability(p, feats[t]);
      out.push_back(extract_instances(tiles.tiles[t].points, prob, ip_, id_base));
      id_base = std::max(id_base, out.back().max_id());
    }
    return out;
  }

  const std::vector<PointFeatures>& features(const TileStore& tiles) {
    std::size_t total = tiles.total_points();
    if (cached_tiles_ != tiles.tiles.size() || cached_points_ != total) {
      cache_.clear();
      for (const auto& t : tiles.tiles) cache_.push_back(extract_features(t.points));
      cached_tiles_ = tiles.tiles.size();
      cached_points_ = total;
    }
    return cache_;
  }

private:
  InstanceParams ip_;
  BackendTrainConfig cfg_;
  std::vector<PointFeatures> cache_;
  std::size_t cached_tiles_ = 0, cached_points_ = 0;
};

}  // namespace treeseg
