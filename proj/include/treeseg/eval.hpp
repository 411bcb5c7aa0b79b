#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "treeseg/cluster.hpp"
#include "treeseg/error.hpp"
#include "treeseg/ratings.hpp"

namespace treeseg {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts{};

  void add(RatingClass truth, RatingClass predicted) {
    ++counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)];
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : counts)
      for (auto c : row) n += c;
    return n;
  }
};

struct AccuracyMetrics {
  double accuracy = 0;
  double weighted_accuracy = 0;  // mean recall over classes present in the truth
};

inline AccuracyMetrics accuracy_metrics(const ConfusionMatrix& cm) {
  std::size_t total = cm.total();
  if (total == 0) throw InvalidArgument("accuracy of an empty confusion matrix");
  std::size_t diag = 0;
  double recall_sum = 0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    diag += cm.counts[i][i];
    std::size_t row = 0;
    for (auto c : cm.counts[i]) row += c;
    if (row == 0) continue;
    recall_sum += static_cast<double>(cm.counts[i][i]) / static_cast<double>(row);
    ++present;
  }
  return {static_cast<double>(diag) / static_cast<double>(total), recall_sum / static_cast<double>(present)};
}

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : cm.counts) rows.push_back(r);
  return rows;
}

// --- Instance matching -------------------------------------------------------

inline const char* kMatchingRule = "greedy-iou/1";

struct InstanceMatch {
  std::uint32_t gt = 0;
  std::uint32_t pred = 0;  // 0 = unmatched
  double iou = 0;
};

struct MatchReport {
  std::vector<InstanceMatch> matches;  // one per gt instance, ascending gt id
  std::size_t gt_count = 0, pred_count = 0;
  double threshold = 0.5;

  std::size_t detected() const {
    return static_cast<std::size_t>(std::count_if(matches.begin(), matches.end(),
                                                  [&](const auto& m) { return m.pred != 0 && m.iou >= threshold; }));
  }
  double detection_rate() const {
    return gt_count == 0 ? 0.0 : static_cast<double>(detected()) / static_cast<double>(gt_count);
  }
  double mean_iou() const {
    if (matches.empty()) return 0.0;
    double s = 0;
    for (const auto& m : matches) s += m.iou;
    return s / static_cast<double>(matches.size());
  }
};

/// Point-set IoU of two ascending index lists.
inline double point_iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  std::size_t inter = 0;
  auto i = a.begin(), j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else { ++inter; ++i; ++j; }
  }
  std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Greedy one-to-one matching: candidate pairs in descending IoU (ties by
/// lower gt id, then lower prediction id); a pair is taken when neither side
/// is matched yet. Unmatched gt instances get IoU 0.
inline MatchReport match_instances(const ClusterSet& gt, const ClusterSet& pred, double threshold = 0.5) {
  if (gt.point_count() != pred.point_count()) throw InvalidArgument("cluster sets cover different point counts");
  MatchReport report;
  report.gt_count = gt.size();
  report.pred_count = pred.size();
  report.threshold = threshold;

  // Only overlapping pairs can have IoU > 0; find them through the owner map.
  std::vector<std::tuple<double, std::uint32_t, std::uint32_t>> pairs;
  for (const auto& [gid, g] : gt.clusters()) {
    std::vector<std::uint32_t> touched;
    for (auto p : g.points)
      if (auto o = pred.owner(p); o != 0) touched.push_back(o);
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    for (auto pid : touched) pairs.emplace_back(point_iou(g.points, pred.at(pid).points), gid, pid);
  }
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    return std::tie(std::get<1>(a), std::get<2>(a)) < std::tie(std::get<1>(b), std::get<2>(b));
  });
  std::map<std::uint32_t, InstanceMatch> by_gt;
  for (const auto& [gid, g] : gt.clusters()) by_gt[gid] = {gid, 0, 0.0};
  std::map<std::uint32_t, bool> used;
  for (auto [iou, gid, pid] : pairs) {
    if (by_gt[gid].pred != 0 || used[pid]) continue;
    by_gt[gid] = {gid, pid, iou};
    used[pid] = true;
  }
  for (auto& [gid, m] : by_gt) report.matches.push_back(m);
  return report;
}

inline std::string match_report_csv(const MatchReport& r, const std::string& tile = {}) {
  std::ostringstream out;
  out << "# matching=" << kMatchingRule << " threshold=" << r.threshold << "\n";
  out << "tile,gt_id,pred_id,iou\n";
  for (const auto& m : r.matches) out << tile << "," << m.gt << "," << m.pred << "," << m.iou << "\n";
  return out.str();
}

// --- Instance counts -----------------------------------------------------------

/// One block of the count table: a tile category with its baseline count,
/// the count after the loop, and the ground truth. Predicted counts include
/// only clusters the rating model calls Single.
struct CountRow {
  std::string category;
  std::size_t baseline = 0;
  std::size_t predicted = 0;
  std::size_t ground_truth = 0;
};

/// Number of clusters whose rating is Single. Unrated clusters do not count.
inline std::size_t count_single(const ClusterSet& pred, const std::map<std::uint32_t, RatingClass>& ratings) {
  std::size_t n = 0;
  for (const auto& [id, c] : pred.clusters()) {
    auto it = ratings.find(id);
    if (it != ratings.end() && it->second == RatingClass::Single) ++n;
  }
  return n;
}

/// Table category for a tile: crowded when it holds at least
/// `crowded_per_ha` trees per hectare, steep when the mean terrain gradient
/// exceeds `steep_gradient`.
inline std::string tile_category(std::size_t gt_trees, double tile_area_m2, double mean_gradient,
                                 double crowded_per_ha = 50.0, double steep_gradient = 0.3) {
  double per_ha = static_cast<double>(gt_trees) / (tile_area_m2 / 10000.0);
  return std::string(per_ha >= crowded_per_ha ? "crowded" : "empty") + "-" +
         (mean_gradient > steep_gradient ? "steep" : "flat");
}

inline std::string count_report_csv(const std::vector<CountRow>& rows) {
  std::ostringstream out;
  out << "category,baseline,predicted,ground_truth\n";
  for (const auto& r : rows) out << r.category << "," << r.baseline << "," << r.predicted << "," << r.ground_truth << "\n";
  return out.str();
}

// --- Loop trajectories -----------------------------------------------------------

/// Long-format rows (iteration, metric, value) for plotting loop metrics.
struct TrajectoryPoint {
  std::size_t iteration;
  std::string metric;
  double value;
};

inline std::string trajectory_csv(const std::vector<TrajectoryPoint>& pts) {
  std::ostringstream out;
  out.precision(10);
  out << "iteration,metric,value\n";
  for (const auto& p : pts) out << p.iteration << "," << p.metric << "," << p.value << "\n";
  return out.str();
}

}  // namespace treeseg
