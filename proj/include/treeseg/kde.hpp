#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "treeseg/error.hpp"
#include "treeseg/point_cloud.hpp"

namespace treeseg {

/// Dense R x R x R grid, x fastest: values[(k * R + j) * R + i].
template <class T>
struct VoxelGrid {
  std::size_t resolution = 0;
  double extent = 0;  // m covered by the grid along each axis
  std::vector<T> values;

  VoxelGrid() = default;
  VoxelGrid(std::size_t r, double e) : resolution(r), extent(e), values(r * r * r, T(0)) {}

  T& at(std::size_t i, std::size_t j, std::size_t k) { return values[(k * resolution + j) * resolution + i]; }
  T at(std::size_t i, std::size_t j, std::size_t k) const { return values[(k * resolution + j) * resolution + i]; }
  double scale() const { return static_cast<double>(resolution) / extent; }
};

inline constexpr int kKdeRadius = 3;  // kernel truncation, in voxels per axis

/// Maps cluster points into voxel-index space: the XY centroid lands on the
/// grid's horizontal center ((R - 1) / 2), the lowest z on voxel layer 0,
/// and one metre spans R / E voxels on every axis.
struct VoxelFrame {
  double cx = 0, cy = 0, z0 = 0, scale = 1, center = 0;

  static VoxelFrame of(const PointCloud& pts, std::size_t resolution, double extent) {
    if (pts.empty()) throw InvalidArgument("cannot voxelize an empty cluster");
    VoxelFrame f;
    for (std::size_t p = 0; p < pts.size(); ++p) {
      f.cx += pts.x[p];
      f.cy += pts.y[p];
    }
    f.cx /= static_cast<double>(pts.size());
    f.cy /= static_cast<double>(pts.size());
    f.z0 = *std::min_element(pts.z.begin(), pts.z.end());
    f.scale = static_cast<double>(resolution) / extent;
    f.center = (static_cast<double>(resolution) - 1.0) / 2.0;
    return f;
  }

  Vec3 apply(double x, double y, double z) const {
    return {(x - cx) * scale + center, (y - cy) * scale + center, (z - z0) * scale};
  }
};

namespace detail {

// Per-axis weights of the unit Gaussian over the 2 * radius + 1 voxels
// centred on the voxel nearest to u; returns the first voxel index and
// fills w. Centring on the voxel (rather than on u) keeps seven samples per
// axis for every placement, so the in-grid mass never drops below ~0.997.
inline long kde_axis(double u, std::size_t resolution, double (&w)[2 * kKdeRadius + 1], int& count) {
  long nearest = static_cast<long>(std::floor(u + 0.5));
  long lo = nearest - kKdeRadius;
  long hi = nearest + kKdeRadius;
  lo = std::max(lo, 0L);
  hi = std::min(hi, static_cast<long>(resolution) - 1);
  count = hi >= lo ? static_cast<int>(hi - lo + 1) : 0;
  for (int k = 0; k < count; ++k) {
    double d = u - static_cast<double>(lo + k);
    w[k] = std::exp(-0.5 * d * d);
  }
  return lo;
}

}  // namespace detail

/// Adds the kernel of one point, given in voxel-index space, to the grid:
/// V[i] += (2 pi)^(-3/2) exp(-|p - i|^2 / 2) over the 7x7x7 voxels around
/// the voxel nearest to p. Mass falling outside the grid is dropped.
template <class T>
void kde_splat(VoxelGrid<T>& grid, const Vec3& p) {
  static const double norm = 1.0 / std::pow(2.0 * std::numbers::pi, 1.5);
  double wx[2 * kKdeRadius + 1], wy[2 * kKdeRadius + 1], wz[2 * kKdeRadius + 1];
  int nx, ny, nz;
  long ix = detail::kde_axis(p.x, grid.resolution, wx, nx);
  long iy = detail::kde_axis(p.y, grid.resolution, wy, ny);
  long iz = detail::kde_axis(p.z, grid.resolution, wz, nz);
  const std::size_t r = grid.resolution;
  for (int c = 0; c < nz; ++c)
    for (int b = 0; b < ny; ++b) {
      double wzy = norm * wz[c] * wy[b];
      T* row = &grid.values[(static_cast<std::size_t>(iz + c) * r + static_cast<std::size_t>(iy + b)) * r +
                            static_cast<std::size_t>(ix)];
      for (int a = 0; a < nx; ++a) row[a] += static_cast<T>(wzy * wx[a]);
    }
}

/// Kernel density voxel grid of a cluster (see VoxelFrame for placement).
template <class T = float>
VoxelGrid<T> kde_voxelize(const PointCloud& pts, std::size_t resolution = 32, double extent = 20.0) {
  if (resolution == 0 || !(extent > 0)) throw InvalidArgument("voxel grid needs positive resolution and extent");
  auto frame = VoxelFrame::of(pts, resolution, extent);
  VoxelGrid<T> grid(resolution, extent);
  for (std::size_t p = 0; p < pts.size(); ++p) kde_splat(grid, frame.apply(pts.x[p], pts.y[p], pts.z[p]));
  return grid;
}

/// Rotation about the vertical axis through the XY centroid; z and hag are kept.
inline PointCloud rotate_z(const PointCloud& pts, double angle) {
  PointCloud out = pts;
  if (pts.empty()) return out;
  double cx = 0, cy = 0;
  for (std::size_t p = 0; p < pts.size(); ++p) {
    cx += pts.x[p];
    cy += pts.y[p];
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t p = 0; p < pts.size(); ++p) {
    double dx = pts.x[p] - cx, dy = pts.y[p] - cy;
    out.x[p] = cx + c * dx - s * dy;
    out.y[p] = cy + s * dx + c * dy;
  }
  return out;
}

/// Random rotation about z by an angle uniform in [0, 2 pi).
template <class Rng>
PointCloud augment_rotation_z(const PointCloud& pts, Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  return rotate_z(pts, angle(rng));
}

}  // namespace treeseg
