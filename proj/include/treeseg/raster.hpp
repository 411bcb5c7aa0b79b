#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "treeseg/error.hpp"

namespace treeseg {

/// Row-major f32 grid anchored at its lower-left corner. Row index grows
/// with y, column index with x. NaN marks "no data".
struct Raster {
  double origin_x = 0, origin_y = 0;
  double pitch = 1;
  std::size_t width = 0, height = 0;
  std::vector<float> values;

  Raster() = default;
  Raster(double ox, double oy, double cell, std::size_t w, std::size_t h, float fill = 0.0f)
      : origin_x(ox), origin_y(oy), pitch(cell), width(w), height(h), values(w * h, fill) {
    if (!(cell > 0)) throw InvalidArgument("raster pitch must be positive");
    if (w == 0 || h == 0) throw InvalidArgument("raster dimensions must be positive");
  }

  float& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  float at(std::size_t row, std::size_t col) const { return values[row * width + col]; }

  bool contains(long row, long col) const {
    return row >= 0 && col >= 0 && static_cast<std::size_t>(row) < height && static_cast<std::size_t>(col) < width;
  }

  long col_of(double x) const { return static_cast<long>(std::floor((x - origin_x) / pitch)); }
  long row_of(double y) const { return static_cast<long>(std::floor((y - origin_y) / pitch)); }

  double center_x(std::size_t col) const { return origin_x + (static_cast<double>(col) + 0.5) * pitch; }
  double center_y(std::size_t row) const { return origin_y + (static_cast<double>(row) + 0.5) * pitch; }

  // Bilinear interpolation between cell centers, clamped at the border.
  /// Bilinear between cell centers; linear extrapolation across the outer
  /// half cell, constant beyond the raster edge.
  double bilinear(double x, double y) const {
    auto axis = [](double f, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
      f = std::clamp(f, -0.5, static_cast<double>(n) - 0.5);
      if (n < 2) {
        i0 = i1 = 0;
        t = 0;
        return;
      }
      auto i = static_cast<std::size_t>(std::clamp(std::floor(f), 0.0, static_cast<double>(n - 2)));
      i0 = i;
      i1 = i + 1;
      t = f - static_cast<double>(i);
    };
    std::size_t c0, c1, r0, r1;
    double tx, ty;
    axis((x - origin_x) / pitch - 0.5, width, c0, c1, tx);
    axis((y - origin_y) / pitch - 0.5, height, r0, r1, ty);
    double top = at(r0, c0) * (1 - tx) + at(r0, c1) * tx;
    double bottom = at(r1, c0) * (1 - tx) + at(r1, c1) * tx;
    return top * (1 - ty) + bottom * ty;
  }
};

}  // namespace treeseg
