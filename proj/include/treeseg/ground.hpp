#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "treeseg/raster.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg {

inline constexpr float kMinHag = -0.5f;

namespace detail {

struct GroundSample {
  double x = 0, y = 0, z = std::numeric_limits<double>::infinity();
  bool valid() const { return std::isfinite(z); }
};

}  // namespace detail

/// Terrain model on a regular grid covering the tile's points.
///
/// Each cell keeps its lowest return. The terrain value at a cell center
/// comes from a least-squares plane through the lowest returns of the 3x3
/// neighbourhood, trimmed iteratively: while some sample sits more than
/// `trim` metres off the plane (and more than three remain), the worst one is
/// dropped and the plane refitted. This removes isolated outliers the way a
/// 3x3 median would, without the half-cell bias that raw minima show on
/// slopes. Degenerate neighbourhoods fall back to the 3x3 median of the
/// minima. Empty cells take the value of the nearest filled cell.
inline Raster estimate_ground(const Tile& tile, double cell = 2.0, double trim = 0.5) {
  const PointCloud& pc = tile.points;
  if (pc.empty()) throw InvalidArgument("cannot estimate ground of an empty tile");
  if (!(cell > 0)) throw InvalidArgument("ground cell must be positive");
  Bounds b = pc.bounds();
  double ox = std::floor(b.min.x / cell) * cell;
  double oy = std::floor(b.min.y / cell) * cell;
  auto w = static_cast<std::size_t>(std::floor((b.max.x - ox) / cell)) + 1;
  auto h = static_cast<std::size_t>(std::floor((b.max.y - oy) / cell)) + 1;
  Raster ground(ox, oy, cell, w, h, static_cast<float>(b.min.z));
  if (pc.size() < 4) return ground;

  std::vector<detail::GroundSample> lowest(w * h);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    auto c = static_cast<std::size_t>(ground.col_of(pc.x[i]));
    auto r = static_cast<std::size_t>(ground.row_of(pc.y[i]));
    auto& s = lowest[r * w + c];
    if (pc.z[i] < s.z) s = {pc.x[i], pc.y[i], pc.z[i]};
  }

  std::vector<char> filled(w * h, 0);
  std::vector<detail::GroundSample> window;
  std::vector<char> keep;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (!lowest[r * w + c].valid()) continue;
      window.clear();
      for (long dr = -1; dr <= 1; ++dr)
        for (long dc = -1; dc <= 1; ++dc) {
          long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if (!ground.contains(rr, cc)) continue;
          const auto& s = lowest[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)];
          if (s.valid()) window.push_back(s);
        }
      double cx = ground.center_x(c), cy = ground.center_y(r);

      std::vector<double> zs;
      for (const auto& s : window) zs.push_back(s.z);
      auto mid = zs.begin() + static_cast<long>((zs.size() - 1) / 2);
      std::nth_element(zs.begin(), mid, zs.end());
      double value = *mid;

      keep.assign(window.size(), 1);
      std::size_t n = window.size();
      while (n >= 3) {
        Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
        Eigen::Vector3d atb = Eigen::Vector3d::Zero();
        for (std::size_t k = 0; k < window.size(); ++k) {
          if (!keep[k]) continue;
          Eigen::Vector3d row(1.0, window[k].x - cx, window[k].y - cy);
          ata += row * row.transpose();
          atb += row * window[k].z;
        }
        // Collinear or clustered samples do not pin down a plane.
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(ata);
        if (eig.eigenvalues()[0] < 1e-6 * cell * cell) break;
        Eigen::Vector3d coef = ata.ldlt().solve(atb);
        std::size_t worst = window.size();
        double worst_res = trim;
        for (std::size_t k = 0; k < window.size(); ++k) {
          if (!keep[k]) continue;
          double res = std::abs(coef[0] + coef[1] * (window[k].x - cx) + coef[2] * (window[k].y - cy) - window[k].z);
          if (res > worst_res) {
            worst_res = res;
            worst = k;
          }
        }
        if (worst == window.size() || n == 3) {
          if (worst == window.size() && coef.allFinite()) value = coef[0];
          break;
        }
        keep[worst] = 0;
        --n;
      }
      ground.at(r, c) = static_cast<float>(value);
      filled[r * w + c] = 1;
    }

  // Nearest filled cell by BFS over the 8-neighbourhood.
  std::deque<std::size_t> queue;
  for (std::size_t k = 0; k < w * h; ++k)
    if (filled[k]) queue.push_back(k);
  while (!queue.empty()) {
    std::size_t k = queue.front();
    queue.pop_front();
    long r = static_cast<long>(k / w), c = static_cast<long>(k % w);
    for (long dr = -1; dr <= 1; ++dr)
      for (long dc = -1; dc <= 1; ++dc) {
        if (!ground.contains(r + dr, c + dc)) continue;
        std::size_t nk = static_cast<std::size_t>(r + dr) * w + static_cast<std::size_t>(c + dc);
        if (filled[nk]) continue;
        filled[nk] = 1;
        ground.values[nk] = ground.values[k];
        queue.push_back(nk);
      }
  }
  return ground;
}

/// hag = z - terrain(x, y), clamped from below at -0.5 m.
inline void normalize_heights(Tile& tile, const Raster& ground) {
  auto& pc = tile.points;
  pc.hag.resize(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    double h = pc.z[i] - ground.bilinear(pc.x[i], pc.y[i]);
    pc.hag[i] = std::max(static_cast<float>(h), kMinHag);
  }
}

/// Canopy height model over the tile square: max hag per cell, 0 where empty.
inline Raster rasterize_chm(const Tile& tile, double pitch = 0.5) {
  if (!(pitch > 0)) throw InvalidArgument("chm pitch must be positive");
  auto n = static_cast<std::size_t>(std::ceil(tile.size / pitch - 1e-9));
  Raster chm(tile.origin_x, tile.origin_y, pitch, std::max<std::size_t>(n, 1), std::max<std::size_t>(n, 1), 0.0f);
  const auto& pc = tile.points;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    long c = chm.col_of(pc.x[i]), r = chm.row_of(pc.y[i]);
    c = std::clamp(c, 0L, static_cast<long>(chm.width) - 1);
    r = std::clamp(r, 0L, static_cast<long>(chm.height) - 1);
    float& v = chm.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    v = std::max(v, pc.hag[i]);
  }
  return chm;
}

}  // namespace treeseg
