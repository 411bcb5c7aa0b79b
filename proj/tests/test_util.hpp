#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "treeseg/point_cloud.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag = "treeseg") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

// Wraps a cloud as a tile whose origin is the floor of its min corner.
inline Tile tile_of(PointCloud pc, double size = 100.0) {
  Tile t;
  Bounds b = pc.bounds();
  t.origin_x = std::floor(b.min.x);
  t.origin_y = std::floor(b.min.y);
  t.size = size;
  t.points = std::move(pc);
  return t;
}

// Regular lattice over [0, n) x [0, n) with z = f(x, y).
template <class F>
PointCloud lattice(double n, double step, F f) {
  PointCloud pc;
  for (double y = 0.1; y < n; y += step)
    for (double x = 0.1; x < n; x += step) pc.push_back(x, y, f(x, y));
  return pc;
}

}  // namespace treeseg::test
