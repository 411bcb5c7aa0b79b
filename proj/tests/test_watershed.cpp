#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "treeseg/ground.hpp"
#include "treeseg/watershed.hpp"

using namespace treeseg;
using treeseg::test::tile_of;

namespace {

struct Cone {
  double cx, cy, apex, radius;
};

// Flat terrain at z = 0 with conical crowns; hag equals z. Ground returns
// sit at the origin corner and the far corner so the tile covers 40 x 40 m.
Tile cone_tile(const std::vector<Cone>& cones, double step = 0.16) {
  PointCloud pc;
  for (double y = 0.05; y < 40; y += step)
    for (double x = 0.05; x < 40; x += step) {
      double z = 0;
      for (const auto& c : cones) {
        double d = std::hypot(x - c.cx, y - c.cy);
        if (d < c.radius) z = std::max(z, c.apex * (1 - d / c.radius));
      }
      pc.push_back(x, y, z, static_cast<float>(z));
    }
  return tile_of(std::move(pc), 40.0);
}

std::vector<std::uint32_t> cone_points(const Tile& t, const Cone& c, double min_hag) {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < t.points.size(); ++i)
    if (std::hypot(t.points.x[i] - c.cx, t.points.y[i] - c.cy) < c.radius && t.points.hag[i] >= min_hag)
      out.push_back(static_cast<std::uint32_t>(i));
  return out;
}

}  // namespace

TEST(Smooth, ZeroSigmaIsBitIdentical) {
  Raster r(0, 0, 0.5, 7, 5, 0.0f);
  for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = static_cast<float>(std::sin(i * 1.3) * 4);
  Raster s = smooth_chm(r, 0.0);
  EXPECT_EQ(s.values, r.values);
}

TEST(Smooth, ImpulseMatchesKernelProduct) {
  Raster r(0, 0, 1.0, 21, 21, 0.0f);
  r.at(10, 10) = 1.0f;
  Raster s = smooth_chm(r, 1.0);

  // Independent discrete kernel: exp(-i^2/2) for |i| <= 3, normalized.
  double k[7], sum = 0;
  for (int i = -3; i <= 3; ++i) sum += k[i + 3] = std::exp(-0.5 * i * i);
  for (double& v : k) v /= sum;
  EXPECT_NEAR(s.at(10, 10), k[3] * k[3], 1e-6);
  EXPECT_NEAR(s.at(10, 12), k[3] * k[5], 1e-6);
  EXPECT_NEAR(s.at(13, 7), k[6] * k[0], 1e-6);
  EXPECT_FLOAT_EQ(s.at(10, 14), 0.0f);

  double mass = 0;
  for (float v : s.values) mass += v;
  EXPECT_NEAR(mass, 1.0, 1e-3);
}

TEST(Smooth, ConstantRasterUnchanged) {
  Raster r(0, 0, 0.5, 30, 17, 7.25f);
  Raster s = smooth_chm(r, 1.0);
  for (float v : s.values) EXPECT_NEAR(v, 7.25, 1e-6);
}

TEST(Smooth, NegativeSigmaThrows) {
  Raster r(0, 0, 0.5, 3, 3, 0.0f);
  EXPECT_THROW(smooth_chm(r, -1.0), InvalidArgument);
}

TEST(Maxima, TwoConesGiveTwoSeeds) {
  Tile t = cone_tile({{15, 20, 10, 3}, {25, 20, 10, 3}});
  Raster chm = smooth_chm(rasterize_chm(t), 1.0);
  auto seeds = detect_maxima(chm, 2.0, 2.0);
  ASSERT_EQ(seeds.size(), 2u);
  for (const auto& s : seeds) {
    double x = chm.center_x(s.col), y = chm.center_y(s.row);
    double d = std::min(std::hypot(x - 15, y - 20), std::hypot(x - 25, y - 20));
    EXPECT_LT(d, 0.75);
  }
}

TEST(Maxima, FlatZeroHasNoSeeds) {
  Raster r(0, 0, 0.5, 40, 40, 0.0f);
  EXPECT_TRUE(detect_maxima(r).empty());
}

TEST(Maxima, ShortConeBelowThreshold) {
  Tile t = cone_tile({{20, 20, 1.5, 2}});
  EXPECT_TRUE(detect_maxima(rasterize_chm(t), 2.0, 2.0).empty());
}

TEST(Maxima, PlateauYieldsOneSeedAtLowestRowCol) {
  Raster r(0, 0, 0.5, 20, 20, 0.0f);
  for (std::size_t row = 8; row < 11; ++row)
    for (std::size_t col = 8; col < 11; ++col) r.at(row, col) = 5.0f;
  auto seeds = detect_maxima(r, 2.0, 2.0);
  ASSERT_EQ(seeds.size(), 1u);
  EXPECT_EQ(seeds[0].row, 8u);
  EXPECT_EQ(seeds[0].col, 8u);
}

TEST(Maxima, RadiusBelowPitchThrows) {
  Raster r(0, 0, 0.5, 4, 4, 0.0f);
  EXPECT_THROW(detect_maxima(r, 2.0, 0.25), InvalidArgument);
}

TEST(Watershed, SingleConeCapturesItsPoints) {
  Cone c{20, 20, 12, 3.5};
  Tile t = cone_tile({c});
  auto set = segment_tile(t);
  ASSERT_EQ(set.size(), 1u);
  const auto& cl = set.clusters().begin()->second;
  auto truth = cone_points(t, c, 0.5);
  std::set<std::uint32_t> got(cl.points.begin(), cl.points.end());
  std::size_t hit = 0;
  for (auto p : truth) hit += got.count(p);
  EXPECT_GE(static_cast<double>(hit), 0.95 * static_cast<double>(truth.size()));
  EXPECT_EQ(cl.source, ClusterSource::watershed);
  EXPECT_EQ(cl.apex, apex_of(t.points, cl.points));
}

TEST(Watershed, TwoConesAreDisjoint) {
  Cone a{12, 20, 10, 3}, b{28, 20, 14, 3};
  Tile t = cone_tile({a, b});
  auto set = segment_tile(t);
  ASSERT_EQ(set.size(), 2u);
  std::vector<int> seen(t.points.size(), 0);
  for (const auto& [id, cl] : set.clusters())
    for (auto p : cl.points) ++seen[p];
  for (int s : seen) ASSERT_LE(s, 1);
  for (const auto& [id, cl] : set.clusters())
    for (auto p : cl.points) EXPECT_EQ(set.owner(p), id);
}

TEST(Watershed, NoSeedsGivesEmptySet) {
  Tile t = cone_tile({{20, 20, 10, 3}});
  Raster chm = rasterize_chm(t);
  auto set = watershed_clusters(t, chm, {});
  EXPECT_EQ(set.size(), 0u);
  for (std::size_t i = 0; i < t.points.size(); ++i) EXPECT_EQ(set.owner(i), 0u);
}

TEST(Watershed, DeterministicAndBoundedBySeeds) {
  Tile t = cone_tile({{8, 8, 9, 2.5}, {15, 9, 13, 3}, {22, 30, 16, 3.5}, {30, 12, 11, 3}, {9, 30, 20, 3}});
  WatershedParams p;
  Raster chm = smooth_chm(rasterize_chm(t, p.chm_pitch), p.smooth_sigma);
  auto seeds = detect_maxima(chm, p.min_height, p.seed_radius);
  auto a = segment_tile(t, p, 100);
  auto b = segment_tile(t, p, 100);
  EXPECT_LE(a.size(), seeds.size());
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [id, cl] : a.clusters()) {
    EXPECT_GT(id, 100u);
    EXPECT_EQ(cl.points, b.at(id).points);
  }
}

TEST(Watershed, FloodRespectsBackground) {
  Raster r(0, 0, 1.0, 5, 1, 0.0f);
  r.values = {3.0f, 0.2f, 4.0f, 2.0f, 0.6f};
  auto label = flood_labels(r, {{0, 0, 3.0f}, {0, 2, 4.0f}}, 0.5);
  EXPECT_EQ(label, (std::vector<std::uint32_t>{1, 0, 2, 2, 2}));
}
