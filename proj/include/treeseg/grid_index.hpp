#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "treeseg/point_cloud.hpp"

namespace treeseg {

/// Uniform 2D bucket grid over XY in compressed-row layout: the point ids of
/// cell c are ids_[starts_[c] .. starts_[c+1]). Ids within a cell ascend.
/// Holds views of the coordinate arrays; they must outlive the index.
class GridIndex {
public:
  GridIndex() = default;

  GridIndex(std::span<const double> xs, std::span<const double> ys, double cell = 1.0) : cell_(cell) {
    if (xs.empty()) return;
    min_x_ = *std::min_element(xs.begin(), xs.end());
    min_y_ = *std::min_element(ys.begin(), ys.end());
    double max_x = *std::max_element(xs.begin(), xs.end());
    double max_y = *std::max_element(ys.begin(), ys.end());
    cols_ = static_cast<long>(std::floor((max_x - min_x_) / cell_)) + 1;
    rows_ = static_cast<long>(std::floor((max_y - min_y_) / cell_)) + 1;
    std::vector<std::uint32_t> counts(static_cast<std::size_t>(cols_ * rows_) + 1, 0);
    std::vector<std::uint32_t> cell_of(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      cell_of[i] = static_cast<std::uint32_t>(cell_id(col_of(xs[i]), row_of(ys[i])));
      ++counts[cell_of[i] + 1];
    }
    for (std::size_t c = 1; c < counts.size(); ++c) counts[c] += counts[c - 1];
    starts_ = counts;
    ids_.resize(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) ids_[counts[cell_of[i]]++] = static_cast<std::uint32_t>(i);
    xs_ = xs;
    ys_ = ys;
  }

  explicit GridIndex(const PointCloud& cloud, double cell = 1.0) : GridIndex(cloud.x, cloud.y, cell) {}

  double cell_size() const { return cell_; }
  std::size_t size() const { return ids_.size(); }

  std::span<const std::uint32_t> cell_points(long col, long row) const {
    if (col < 0 || row < 0 || col >= cols_ || row >= rows_) return {};
    auto c = cell_id(col, row);
    return std::span<const std::uint32_t>(ids_).subspan(starts_[c], starts_[c + 1] - starts_[c]);
  }

  /// Calls fn(id) for every point whose XY distance to (x, y) is <= radius.
  template <class Fn>
  void for_each_within_xy(double x, double y, double radius, Fn&& fn) const {
    if (ids_.empty()) return;
    long c0 = col_of(x - radius), c1 = col_of(x + radius);
    long r0 = row_of(y - radius), r1 = row_of(y + radius);
    double r2 = radius * radius;
    for (long r = std::max(r0, 0L); r <= std::min(r1, rows_ - 1); ++r)
      for (long c = std::max(c0, 0L); c <= std::min(c1, cols_ - 1); ++c)
        for (auto id : cell_points(c, r)) {
          double dx = xs_[id] - x, dy = ys_[id] - y;
          if (dx * dx + dy * dy <= r2) fn(id);
        }
  }

  /// Up to k nearest neighbours in 3D (query point included when indexed),
  /// searched within max_radius. Sorted by distance, ties by id.
  std::vector<std::pair<double, std::uint32_t>> knn(std::span<const double> zs, double x, double y, double z,
                                                    std::size_t k, double max_radius) const {
    std::vector<std::pair<double, std::uint32_t>> best;
    if (ids_.empty() || k == 0) return best;
    long qc = col_of(x), qr = row_of(y);
    long max_ring = static_cast<long>(std::ceil(max_radius / cell_)) + 1;
    double max_d2 = max_radius * max_radius;
    for (long ring = 0; ring <= max_ring; ++ring) {
      for (long r = qr - ring; r <= qr + ring; ++r)
        for (long c = qc - ring; c <= qc + ring; ++c) {
          if (std::max(std::abs(r - qr), std::abs(c - qc)) != ring) continue;
          for (auto id : cell_points(c, r)) {
            double dx = xs_[id] - x, dy = ys_[id] - y, dz = zs[id] - z;
            double d2 = dx * dx + dy * dy + dz * dz;
            if (d2 <= max_d2) best.emplace_back(d2, id);
          }
        }
      // Every unvisited point is at least ring*cell away horizontally.
      if (best.size() >= k) {
        std::sort(best.begin(), best.end());
        double reach = static_cast<double>(ring) * cell_;
        if (best[k - 1].first <= reach * reach) break;
      }
    }
    std::sort(best.begin(), best.end());
    if (best.size() > k) best.resize(k);
    for (auto& b : best) b.first = std::sqrt(b.first);
    return best;
  }

private:
  long col_of(double x) const { return static_cast<long>(std::floor((x - min_x_) / cell_)); }
  long row_of(double y) const { return static_cast<long>(std::floor((y - min_y_) / cell_)); }
  std::size_t cell_id(long col, long row) const { return static_cast<std::size_t>(row * cols_ + col); }

  double cell_ = 1.0;
  double min_x_ = 0, min_y_ = 0;
  long cols_ = 0, rows_ = 0;
  std::vector<std::uint32_t> starts_;
  std::vector<std::uint32_t> ids_;
  std::span<const double> xs_, ys_;
};

}  // namespace treeseg
