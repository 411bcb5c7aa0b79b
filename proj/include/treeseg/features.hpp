#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "treeseg/grid_index.hpp"
#include "treeseg/point_cloud.hpp"

namespace treeseg {

inline constexpr std::size_t kFeatureCount = 6;
inline constexpr std::size_t kNeighbourCount = 20;

/// Per-point geometric descriptors. Shape features use the square roots of
/// the neighbourhood covariance eigenvalues s1 >= s2 >= s3:
/// linearity (s1 - s2) / s1, planarity (s2 - s3) / s1, sphericity s3 / s1,
/// which sum to one.
struct PointFeatures {
  std::vector<float> hag;
  std::vector<float> density;  // points within 1 m (3D), the point included
  std::vector<float> extent;   // vertical span of the 20 nearest neighbours, m
  std::vector<float> linearity, planarity, sphericity;

  std::size_t size() const { return hag.size(); }

  std::array<float, kFeatureCount> row(std::size_t i) const {
    return {hag[i], density[i], extent[i], linearity[i], planarity[i], sphericity[i]};
  }
};

struct ShapeFeatures {
  double linearity = 0, planarity = 0, sphericity = 0;
};

inline ShapeFeatures shape_features(const std::vector<Eigen::Vector3d>& pts) {
  if (pts.size() < 3) return {};
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  cov /= static_cast<double>(pts.size());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov, Eigen::EigenvaluesOnly);
  // Ascending eigenvalues; clamp round-off below zero.
  double s3 = std::sqrt(std::max(0.0, es.eigenvalues()[0]));
  double s2 = std::sqrt(std::max(0.0, es.eigenvalues()[1]));
  double s1 = std::sqrt(std::max(0.0, es.eigenvalues()[2]));
  if (!(s1 > 1e-12)) return {};
  return {(s1 - s2) / s1, (s2 - s3) / s1, s3 / s1};
}

/// Features for every point of a height-normalized cloud. Points with
/// fewer than three neighbours within `search_radius` get zero extent and
/// zero shape features.
inline PointFeatures extract_features(const PointCloud& pc, double search_radius = 5.0) {
  PointFeatures f;
  const std::size_t n = pc.size();
  f.hag.assign(pc.hag.begin(), pc.hag.end());
  f.density.assign(n, 0.0f);
  f.extent.assign(n, 0.0f);
  f.linearity.assign(n, 0.0f);
  f.planarity.assign(n, 0.0f);
  f.sphericity.assign(n, 0.0f);
  if (n == 0) return f;
  GridIndex index(pc, 1.0);
  std::vector<Eigen::Vector3d> nb;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pc.x[i], y = pc.y[i], z = pc.z[i];
    std::uint32_t dens = 0;
    index.for_each_within_xy(x, y, 1.0, [&](std::uint32_t j) {
      double dz = pc.z[j] - z, dx = pc.x[j] - x, dy = pc.y[j] - y;
      if (dx * dx + dy * dy + dz * dz <= 1.0) ++dens;
    });
    f.density[i] = static_cast<float>(dens);

    auto knn = index.knn(pc.z, x, y, z, kNeighbourCount, search_radius);
    if (knn.size() < 3) continue;
    nb.clear();
    double lo = z, hi = z;
    for (auto [d, j] : knn) {
      nb.emplace_back(pc.x[j] - x, pc.y[j] - y, pc.z[j] - z);
      lo = std::min(lo, pc.z[j]);
      hi = std::max(hi, pc.z[j]);
    }
    f.extent[i] = static_cast<float>(hi - lo);
    auto s = shape_features(nb);
    f.linearity[i] = static_cast<float>(s.linearity);
    f.planarity[i] = static_cast<float>(s.planarity);
    f.sphericity[i] = static_cast<float>(s.sphericity);
  }
  return f;
}

}  // namespace treeseg
