#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "run_fixture.hpp"
#include "test_util.hpp"
#include "treeseg/eval.hpp"
#include "treeseg/report.hpp"

using namespace treeseg;

namespace {

ConfusionMatrix matrix(std::array<std::array<std::size_t, 3>, 3> rows) {
  ConfusionMatrix cm;
  cm.counts = rows;
  return cm;
}

ClusterSet partition(const PointCloud& pc, const std::vector<std::uint32_t>& owner) {
  std::map<std::uint32_t, std::vector<std::uint32_t>> groups;
  for (std::uint32_t i = 0; i < owner.size(); ++i)
    if (owner[i]) groups[owner[i]].push_back(i);
  ClusterSet set(pc.size());
  for (auto& [id, pts] : groups) set.add(make_cluster(pc, id, pts, ClusterSource::truth));
  return set;
}

double naive_iou(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  std::set<std::uint32_t> sa(a.begin(), a.end()), sb(b.begin(), b.end()), all = sa;
  all.insert(sb.begin(), sb.end());
  std::size_t inter = 0;
  for (auto p : sa) inter += sb.count(p);
  return all.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(all.size());
}

// Largest number of one-to-one gt/pred pairs with IoU above the threshold,
// over every assignment.
std::size_t best_assignment(const ClusterSet& gt, const ClusterSet& pred, double threshold) {
  std::vector<const Cluster*> g, p;
  for (const auto& [id, c] : gt.clusters()) g.push_back(&c);
  for (const auto& [id, c] : pred.clusters()) p.push_back(&c);
  while (p.size() < g.size()) p.push_back(nullptr);
  std::vector<std::size_t> perm(p.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t n = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Cluster* q = p[perm[i]];
      n += q && naive_iou(g[i]->points, q->points) > threshold;
    }
    best = std::max(best, n);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST(Accuracy, PerfectAndUniform) {
  auto perfect = accuracy_metrics(matrix({{{5, 0, 0}, {0, 7, 0}, {0, 0, 2}}}));
  EXPECT_DOUBLE_EQ(perfect.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(perfect.weighted_accuracy, 1.0);
  auto chance = accuracy_metrics(matrix({{{1, 1, 1}, {1, 1, 1}, {1, 1, 1}}}));
  EXPECT_DOUBLE_EQ(chance.accuracy, 1.0 / 3);
  EXPECT_DOUBLE_EQ(chance.weighted_accuracy, 1.0 / 3);
}

TEST(Accuracy, WorkedExample) {
  auto m = accuracy_metrics(matrix({{{8, 2, 0}, {0, 5, 5}, {0, 0, 10}}}));
  EXPECT_DOUBLE_EQ(m.accuracy, 23.0 / 30.0);
  EXPECT_DOUBLE_EQ(m.weighted_accuracy, (0.8 + 0.5 + 1.0) / 3.0);
}

TEST(Accuracy, ImbalanceSeparatesTheMetrics) {
  // Always predicting the majority class.
  auto m = accuracy_metrics(matrix({{{90, 0, 0}, {5, 0, 0}, {5, 0, 0}}}));
  EXPECT_DOUBLE_EQ(m.accuracy, 0.9);
  EXPECT_DOUBLE_EQ(m.weighted_accuracy, 1.0 / 3);
  // Classes absent from the truth do not dilute the mean recall.
  auto two = accuracy_metrics(matrix({{{4, 1, 0}, {0, 0, 0}, {0, 0, 3}}}));
  EXPECT_DOUBLE_EQ(two.weighted_accuracy, (0.8 + 1.0) / 2);
  EXPECT_THROW(accuracy_metrics(ConfusionMatrix{}), InvalidArgument);
}

TEST(Matching, IdenticalSetsMatchCompletely) {
  PointCloud pc = test::lattice(4, 1, [](double, double) { return 0.0; });
  std::vector<std::uint32_t> owner(pc.size());
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = 1 + static_cast<std::uint32_t>(i % 4);
  auto gt = partition(pc, owner);
  auto r = match_instances(gt, gt);
  EXPECT_EQ(r.detected(), 4u);
  EXPECT_DOUBLE_EQ(r.mean_iou(), 1.0);
  EXPECT_DOUBLE_EQ(r.detection_rate(), 1.0);
}

TEST(Matching, HalfOverlapIsNotADetectionBelowThreshold) {
  PointCloud pc = test::lattice(4, 1, [](double, double) { return 0.0; });  // 16 points
  std::vector<std::uint32_t> g(16, 0), p(16, 0);
  for (std::uint32_t i = 0; i < 8; ++i) g[i] = 1;
  for (std::uint32_t i = 3; i < 12; ++i) p[i] = 7;  // IoU 5 / 12
  auto r = match_instances(partition(pc, g), partition(pc, p));
  ASSERT_EQ(r.matches.size(), 1u);
  EXPECT_EQ(r.matches[0].pred, 7u);
  EXPECT_NEAR(r.matches[0].iou, 5.0 / 12.0, 1e-12);
  EXPECT_EQ(r.detected(), 0u);
  EXPECT_EQ(match_instances(partition(pc, g), partition(pc, p), 0.4).detected(), 1u);
}

TEST(Matching, GreedyAgreesWithExhaustiveSearch) {
  std::mt19937_64 rng(13);
  PointCloud pc = test::lattice(6, 1, [](double, double) { return 0.0; });  // 36 points
  for (int trial = 0; trial < 300; ++trial) {
    std::uniform_int_distribution<std::uint32_t> ng(1, 6), np(0, 6);
    std::uint32_t kg = ng(rng), kp = np(rng);
    std::vector<std::uint32_t> g(pc.size()), p(pc.size());
    std::uniform_int_distribution<std::uint32_t> pick_g(0, kg), pick_p(0, kp);
    for (std::size_t i = 0; i < pc.size(); ++i) {
      g[i] = pick_g(rng);
      p[i] = kp ? pick_p(rng) : 0;
      // Copy the truth for a share of the points so that good matches exist.
      if (rng() % 3 == 0 && g[i] <= kp) p[i] = g[i];
    }
    auto gt = partition(pc, g), pred = partition(pc, p);
    auto r = match_instances(gt, pred);
    ASSERT_EQ(r.matches.size(), gt.size());
    // Reported IoUs are the real ones and predictions are used at most once.
    std::set<std::uint32_t> used;
    for (const auto& m : r.matches) {
      if (m.pred == 0) continue;
      EXPECT_TRUE(used.insert(m.pred).second);
      EXPECT_NEAR(m.iou, naive_iou(gt.at(m.gt).points, pred.at(m.pred).points), 1e-12);
    }
    // With disjoint clusters an IoU above 0.5 pairs each cluster with at most
    // one partner, so greedy reaches the exhaustive optimum.
    std::size_t above = 0;
    for (const auto& m : r.matches) above += m.pred != 0 && m.iou > 0.5;
    EXPECT_EQ(above, best_assignment(gt, pred, 0.5)) << "trial " << trial;
  }
}

TEST(Matching, DifferentPointCountsThrow) {
  EXPECT_THROW(match_instances(ClusterSet(3), ClusterSet(4)), InvalidArgument);
}

TEST(Counts, OnlySingleRatedClustersCount) {
  PointCloud pc = test::lattice(4, 1, [](double, double) { return 0.0; });
  std::vector<std::uint32_t> owner(pc.size());
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = 1 + static_cast<std::uint32_t>(i % 4);
  auto set = partition(pc, owner);
  std::map<std::uint32_t, RatingClass> r{{1, RatingClass::Single}, {2, RatingClass::Multi}, {3, RatingClass::Single}};
  EXPECT_EQ(count_single(set, r), 2u);
}

TEST(Counts, TileCategories) {
  EXPECT_EQ(tile_category(60, 10000, 0.05), "crowded-flat");
  EXPECT_EQ(tile_category(49, 10000, 0.05), "empty-flat");
  EXPECT_EQ(tile_category(10, 1000, 0.5), "crowded-steep");
  EXPECT_EQ(tile_category(0, 10000, 0.31), "empty-steep");
}

TEST(Report, TerrainGradientOfAPlane) {
  PointCloud pc;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j) pc.push_back(i, j, 100 + 0.3 * i - 0.4 * j + (i == j ? 5 : 0), i == j ? 5.0f : 0.0f);
  EXPECT_NEAR(mean_terrain_gradient(pc), 0.5, 1e-9);
}

TEST(Report, EvaluateRunAgainstTruth) {
  test::TempDir dir;
  test::SmallRun fx(dir / "run", 16, 8);
  test::TruthBackend backend(fx.truth);
  auto rater = fx.oracle();
  LoopOptions opt;
  opt.rater = &rater;
  run_loop(fx.run.root, Config{}, backend, opt);

  auto truth = truth_tiles(fx.scene.cloud, fx.scene.object, fx.store);
  ASSERT_EQ(truth.trees[0].size(), 16u);
  auto ev = evaluate_run(fx.run.root, truth, backend, &rater);
  EXPECT_EQ(ev.gt_trees, 16u);
  EXPECT_EQ(score(ev.initial).detected, 8u);
  EXPECT_EQ(score(ev.pseudo_labels).detected, 16u);
  EXPECT_EQ(score(ev.prediction).detected, 16u);
  EXPECT_DOUBLE_EQ(score(ev.prediction).mean_iou, 1.0);
  ASSERT_EQ(ev.counts.size(), 1u);
  EXPECT_EQ(ev.counts[0].baseline, 8u);
  EXPECT_EQ(ev.counts[0].predicted, 16u);
  EXPECT_EQ(ev.counts[0].ground_truth, 16u);
  EXPECT_EQ(ev.rows.size(), ev.last_iteration + 1);

  write_evaluation(dir / "eval", ev);
  for (const char* f : {"matches.csv", "metrics.csv", "counts.csv", "trajectory.csv", "summary.json"})
    EXPECT_TRUE(fs::exists(dir / "eval" / f)) << f;
  auto summary = nlohmann::json::parse(io::read_text(dir / "eval" / "summary.json"));
  EXPECT_EQ(summary["prediction"]["detected"], 16);
  EXPECT_EQ(summary["matching_rule"], kMatchingRule);
  auto counts = io::read_text(dir / "eval" / "counts.csv");
  EXPECT_EQ(counts.substr(0, counts.find('\n')), "category,baseline,predicted,ground_truth");
}

TEST(Report, TruthMustTileLikeTheRun) {
  test::TempDir dir;
  test::SmallRun fx(dir / "run", 4, 2);
  auto cloud = fx.scene.cloud;
  auto object = fx.scene.object;
  cloud.push_back(10, 10, 500, 0.0f);
  object.push_back(0);
  EXPECT_THROW(truth_tiles(cloud, object, fx.store), InvalidArgument);
  std::vector<std::int32_t> short_ids(3, 0);
  EXPECT_THROW(truth_tiles(fx.scene.cloud, short_ids, fx.store), InvalidArgument);
}
