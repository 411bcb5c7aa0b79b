#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "treeseg/backend.hpp"
#include "treeseg/cluster.hpp"
#include "treeseg/eval.hpp"
#include "treeseg/labels.hpp"
#include "treeseg/loop.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg {

/// Per-point ground truth carried onto the tiles of a run.
struct TruthTiles {
  std::vector<std::vector<std::int32_t>> object;  // per tile: tree id > 0, confuser < 0, ground 0
  std::vector<ClusterSet> trees;                   // per tile, cluster id = tree id
  std::map<std::int32_t, std::size_t> tree_sizes;  // points per tree over the whole cloud
};

/// Splits per-point object ids of `cloud` (the cloud the run was tiled
/// from) the same way the run's tiles were built.
inline TruthTiles truth_tiles(const PointCloud& cloud, std::span<const std::int32_t> object, const TileStore& store) {
  if (object.size() != cloud.size()) throw InvalidArgument("object ids do not match the point cloud");
  auto members = tile_membership(cloud, store.tile_size);
  if (members.size() != store.tiles.size()) throw InvalidArgument("ground truth does not tile like the run");
  TruthTiles truth;
  for (auto o : object)
    if (o > 0) ++truth.tree_sizes[o];
  for (std::size_t t = 0; t < members.size(); ++t) {
    const auto& tile = store.tiles[t];
    const auto& m = members[t];
    if (m.ix != tile.ix || m.iy != tile.iy || m.points.size() != tile.points.size())
      throw InvalidArgument("ground truth does not tile like the run (tile " + tile.name() + ")");
    std::vector<std::int32_t> local;
    std::map<std::int32_t, std::vector<std::uint32_t>> trees;
    for (std::size_t i = 0; i < m.points.size(); ++i) {
      auto o = object[m.points[i]];
      local.push_back(o);
      if (o > 0) trees[o].push_back(static_cast<std::uint32_t>(i));
    }
    ClusterSet set(tile.points.size());
    for (auto& [id, pts] : trees)
      set.add(make_cluster(tile.points, static_cast<std::uint32_t>(id), std::move(pts), ClusterSource::truth));
    truth.object.push_back(std::move(local));
    truth.trees.push_back(std::move(set));
  }
  return truth;
}

/// Confirmed instances of a LabelMap as clusters (cluster id = instance id).
inline ClusterSet labels_to_clusters(const LabelMap& labels, const PointCloud& pc) {
  ClusterSet set(labels.size());
  for (auto& [id, pts] : collect_instances(labels)) set.add(make_cluster(pc, id, pts, ClusterSource::backend));
  return set;
}

/// Magnitude of the least-squares plane gradient of the terrain (z - hag).
inline double mean_terrain_gradient(const PointCloud& pc) {
  if (pc.size() < 3) return 0.0;
  Eigen::MatrixXd a(pc.size(), 3);
  Eigen::VectorXd b(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    a.row(static_cast<Eigen::Index>(i)) << pc.x[i] - pc.x[0], pc.y[i] - pc.y[0], 1.0;
    b(static_cast<Eigen::Index>(i)) = pc.z[i] - pc.hag[i];
  }
  Eigen::Vector3d coef = a.colPivHouseholderQr().solve(b);
  return std::hypot(coef(0), coef(1));
}

struct StageScore {
  std::size_t clusters = 0, detected = 0;
  double detection_rate = 0, mean_iou = 0;
};

inline StageScore score(const std::vector<MatchReport>& reports) {
  StageScore s;
  std::size_t gt = 0;
  double iou = 0;
  for (const auto& r : reports) {
    s.clusters += r.pred_count;
    s.detected += r.detected();
    gt += r.gt_count;
    for (const auto& m : r.matches) iou += m.iou;
  }
  if (gt > 0) {
    s.detection_rate = static_cast<double>(s.detected) / static_cast<double>(gt);
    s.mean_iou = iou / static_cast<double>(gt);
  }
  return s;
}

/// Run against ground truth: initial clusters, final pseudo-label
/// instances, and the predictions of the final backend parameters.
struct RunEvaluation {
  std::size_t last_iteration = 0;
  std::size_t gt_trees = 0;
  std::vector<std::string> tiles;
  std::vector<MatchReport> initial, pseudo_labels, prediction;
  std::vector<CountRow> counts;
  std::vector<MetricsRow> rows;

  std::vector<TrajectoryPoint> trajectory() const {
    std::vector<TrajectoryPoint> pts;
    for (const auto& r : rows) {
      pts.push_back({r.iteration, "avg_trees_per_tile", r.avg_trees_per_tile()});
      pts.push_back({r.iteration, "pct_single", r.proportion(RatingClass::Single)});
      pts.push_back({r.iteration, "pct_multi", r.proportion(RatingClass::Multi)});
      pts.push_back({r.iteration, "pct_nontree", r.proportion(RatingClass::NonTree)});
      pts.push_back({r.iteration, "new_instances", static_cast<double>(r.new_instances)});
    }
    return pts;
  }

  nlohmann::json summary() const {
    auto stage = [](const std::vector<MatchReport>& r) {
      auto s = score(r);
      return nlohmann::json{{"clusters", s.clusters},
                            {"detected", s.detected},
                            {"detection_rate", s.detection_rate},
                            {"mean_iou", s.mean_iou}};
    };
    nlohmann::json counts_json = nlohmann::json::array();
    for (const auto& c : counts)
      counts_json.push_back(
          {{"category", c.category}, {"baseline", c.baseline}, {"predicted", c.predicted}, {"ground_truth", c.ground_truth}});
    return {{"matching_rule", kMatchingRule},
            {"iou_threshold", 0.5},
            {"last_iteration", last_iteration},
            {"gt_trees", gt_trees},
            {"initial", stage(initial)},
            {"pseudo_labels", stage(pseudo_labels)},
            {"prediction", stage(prediction)},
            {"counts", counts_json}};
  }
};

inline RunEvaluation evaluate_run(const fs::path& run_dir, const TruthTiles& truth, SegmentationBackend& backend,
                                  ClusterRater* rater_override = nullptr) {
  RunLayout run{run_dir};
  auto store = load_run_tiles(run);
  if (truth.trees.size() != store.tiles.size()) throw InvalidArgument("ground truth does not cover the run's tiles");
  auto last = last_completed_iteration(run);
  if (!last) throw MissingPrerequisite("no completed iteration in " + run.root.string() + "; run `loop` first");
  const auto last_dir = run.iteration(*last);

  RunEvaluation ev;
  ev.last_iteration = *last;
  ev.rows = parse_metrics_csv(io::read_text(last_dir / "metrics.csv"), store.tiles.size());
  auto initial = read_cluster_sets(run.clusters(), store);
  auto labels = read_label_maps(last_dir / "labels", store);
  backend.set_workspace(run.root / "eval" / "backend");
  auto predicted = backend.predict(store, last_dir / "params", static_cast<std::uint32_t>(1'000'000 * (*last + 1)));

  std::unique_ptr<ClusterRater> owned;
  ClusterRater* rater = rater_override;
  if (!rater) {
    owned = std::make_unique<NetRater>(read_rater_file(last_dir / "params" / kRaterFile).net);
    rater = owned.get();
  }
  // Baseline ratings: human where given, model otherwise (as in iteration 0).
  std::map<std::uint32_t, RatingClass> baseline;
  auto model_log = RatingLog::load(run.iteration(0) / "ratings.jsonl");
  auto human_log = RatingLog::load(run.ratings());
  for (const auto& [id, r] : model_log.active(RatingSource::model)) baseline[id] = r.cls;
  for (const auto& [id, r] : human_log.active(RatingSource::human)) baseline[id] = r.cls;

  std::map<std::string, CountRow> by_category;
  for (std::size_t t = 0; t < store.tiles.size(); ++t) {
    const auto& tile = store.tiles[t];
    ev.tiles.push_back(tile.name());
    ev.gt_trees += truth.trees[t].size();
    ev.initial.push_back(match_instances(truth.trees[t], initial[t]));
    ev.pseudo_labels.push_back(match_instances(truth.trees[t], labels_to_clusters(labels[t], tile.points)));
    ev.prediction.push_back(match_instances(truth.trees[t], predicted[t]));

    std::map<std::uint32_t, RatingClass> final_ratings;
    auto preds = rater->rate(tile.points, predicted[t]);
    std::size_t i = 0;
    for (const auto& [id, c] : predicted[t].clusters()) final_ratings[id] = preds[i++].cls;
    auto category = tile_category(truth.trees[t].size(), tile.size * tile.size, mean_terrain_gradient(tile.points));
    auto& row = by_category[category];
    row.category = category;
    row.baseline += count_single(initial[t], baseline);
    row.predicted += count_single(predicted[t], final_ratings);
    row.ground_truth += truth.trees[t].size();
  }
  for (auto& [k, row] : by_category) ev.counts.push_back(row);
  return ev;
}

/// matches.csv (final predictions), metrics.csv (per tile and stage),
/// counts.csv, trajectory.csv and summary.json.
inline void write_evaluation(const fs::path& dir, const RunEvaluation& ev) {
  fs::create_directories(dir);
  std::ostringstream matches;
  matches << "# matching=" << kMatchingRule << " threshold=0.5\ntile,gt_id,pred_id,iou\n";
  for (std::size_t t = 0; t < ev.tiles.size(); ++t)
    for (const auto& m : ev.prediction[t].matches) matches << ev.tiles[t] << "," << m.gt << "," << m.pred << "," << m.iou << "\n";
  io::write_atomic(dir / "matches.csv", matches.str());

  std::ostringstream metrics;
  metrics << "tile,stage,gt_trees,clusters,detected,detection_rate,mean_iou\n";
  auto emit = [&](const std::string& stage, const std::vector<MatchReport>& reports) {
    for (std::size_t t = 0; t < ev.tiles.size(); ++t) {
      const auto& r = reports[t];
      metrics << ev.tiles[t] << "," << stage << "," << r.gt_count << "," << r.pred_count << "," << r.detected() << ","
              << r.detection_rate() << "," << r.mean_iou() << "\n";
    }
  };
  emit("initial", ev.initial);
  emit("pseudo_labels", ev.pseudo_labels);
  emit("prediction", ev.prediction);
  io::write_atomic(dir / "metrics.csv", metrics.str());
  io::write_atomic(dir / "counts.csv", count_report_csv(ev.counts));
  io::write_atomic(dir / "trajectory.csv", trajectory_csv(ev.trajectory()));
  io::write_atomic(dir / "summary.json", ev.summary().dump(2));
}

}  // namespace treeseg
