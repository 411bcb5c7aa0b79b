#pragma once

#include <cmath>
#include <cstdint>
#include <queue>
#include <tuple>
#include <vector>

#include "treeseg/cluster.hpp"
#include "treeseg/ground.hpp"
#include "treeseg/raster.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg {

struct WatershedParams {
  double smooth_sigma = 1.0;  // m
  double min_height = 2.0;    // m
  double seed_radius = 2.0;   // m
  double background = 0.5;    // m; cells and points below stay unassigned
  double chm_pitch = 0.5;     // m
};

struct Seed {
  std::size_t row = 0, col = 0;
  float value = 0;
  bool operator==(const Seed&) const = default;
};

/// Normalized 1D Gaussian weights for sigma in cells, truncated at 3 sigma.
inline std::vector<double> gaussian_kernel_1d(double sigma_cells) {
  auto radius = static_cast<long>(std::ceil(3.0 * sigma_cells));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (long i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma_cells * sigma_cells));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

/// Separable Gaussian blur. Near the border the kernel is renormalized over
/// the cells that exist, so constant rasters stay constant. sigma = 0 returns
/// the input unchanged.
inline Raster smooth_chm(const Raster& chm, double sigma) {
  if (sigma < 0) throw InvalidArgument("smoothing sigma must be >= 0");
  if (sigma == 0) return chm;
  auto kernel = gaussian_kernel_1d(sigma / chm.pitch);
  long radius = static_cast<long>(kernel.size() / 2);
  auto w = static_cast<long>(chm.width), h = static_cast<long>(chm.height);

  std::vector<double> tmp(chm.values.size());
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      double acc = 0, norm = 0;
      for (long k = -radius; k <= radius; ++k) {
        long cc = c + k;
        if (cc < 0 || cc >= w) continue;
        double kw = kernel[static_cast<std::size_t>(k + radius)];
        acc += kw * chm.values[static_cast<std::size_t>(r * w + cc)];
        norm += kw;
      }
      tmp[static_cast<std::size_t>(r * w + c)] = acc / norm;
    }
  Raster out = chm;
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      double acc = 0, norm = 0;
      for (long k = -radius; k <= radius; ++k) {
        long rr = r + k;
        if (rr < 0 || rr >= h) continue;
        double kw = kernel[static_cast<std::size_t>(k + radius)];
        acc += kw * tmp[static_cast<std::size_t>(rr * w + c)];
        norm += kw;
      }
      out.values[static_cast<std::size_t>(r * w + c)] = static_cast<float>(acc / norm);
    }
  return out;
}

/// Cells whose value is >= min_height and that dominate every other cell in
/// the disc of the given radius: strictly larger, or equal with a larger
/// (row, col). Returned in (row, col) order.
inline std::vector<Seed> detect_maxima(const Raster& chm, double min_height = 2.0, double radius = 2.0) {
  if (radius < chm.pitch) throw InvalidArgument("maxima radius must be >= raster pitch");
  long rc = static_cast<long>(std::floor(radius / chm.pitch));
  double r2 = (radius / chm.pitch) * (radius / chm.pitch);
  std::vector<std::pair<long, long>> disc;
  for (long dr = -rc; dr <= rc; ++dr)
    for (long dc = -rc; dc <= rc; ++dc)
      if ((dr != 0 || dc != 0) && static_cast<double>(dr * dr + dc * dc) <= r2) disc.emplace_back(dr, dc);

  std::vector<Seed> seeds;
  for (std::size_t r = 0; r < chm.height; ++r)
    for (std::size_t c = 0; c < chm.width; ++c) {
      float v = chm.at(r, c);
      if (!(v >= min_height)) continue;
      bool is_max = true;
      for (auto [dr, dc] : disc) {
        long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
        if (!chm.contains(rr, cc)) continue;
        float q = chm.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
        if (q > v || (q == v && std::tie(rr, cc) < std::tuple<long, long>(static_cast<long>(r), static_cast<long>(c)))) {
          is_max = false;
          break;
        }
      }
      if (is_max) seeds.push_back({r, c, v});
    }
  return seeds;
}

/// Marker-controlled watershed by priority flood: seeds claim cells in order
/// of decreasing CHM value (ties by insertion order), spreading over the
/// 8-neighbourhood; cells below the background threshold are never claimed.
/// Returns the label raster (0 = background, k = k-th seed).
inline std::vector<std::uint32_t> flood_labels(const Raster& chm, const std::vector<Seed>& seeds,
                                               double background = 0.5) {
  std::vector<std::uint32_t> label(chm.values.size(), 0);
  struct Entry {
    float value;
    std::uint64_t order;
    std::size_t cell;
    bool operator<(const Entry& o) const {
      if (value != o.value) return value < o.value;
      return order > o.order;
    }
  };
  std::priority_queue<Entry> open;
  std::uint64_t counter = 0;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    std::size_t cell = seeds[k].row * chm.width + seeds[k].col;
    if (label[cell] != 0) continue;
    label[cell] = static_cast<std::uint32_t>(k + 1);
    open.push({chm.values[cell], counter++, cell});
  }
  while (!open.empty()) {
    Entry e = open.top();
    open.pop();
    long r = static_cast<long>(e.cell / chm.width), c = static_cast<long>(e.cell % chm.width);
    for (long dr = -1; dr <= 1; ++dr)
      for (long dc = -1; dc <= 1; ++dc) {
        if ((dr == 0 && dc == 0) || !chm.contains(r + dr, c + dc)) continue;
        std::size_t n = static_cast<std::size_t>(r + dr) * chm.width + static_cast<std::size_t>(c + dc);
        if (label[n] != 0 || !(chm.values[n] >= background)) continue;
        label[n] = label[e.cell];
        open.push({chm.values[n], counter++, n});
      }
  }
  return label;
}

/// Points with hag >= background inside a labelled cell join that seed's
/// cluster. Empty clusters are dropped; surviving clusters are numbered
/// id_base + 1, id_base + 2, ... in seed order.
inline ClusterSet watershed_clusters(const Tile& tile, const Raster& chm, const std::vector<Seed>& seeds,
                                     double background = 0.5, std::uint32_t id_base = 0) {
  const auto& pc = tile.points;
  ClusterSet set(pc.size());
  if (seeds.empty()) return set;
  auto label = flood_labels(chm, seeds, background);
  std::vector<std::vector<std::uint32_t>> members(seeds.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!(pc.hag[i] >= background)) continue;
    long c = chm.col_of(pc.x[i]), r = chm.row_of(pc.y[i]);
    if (!chm.contains(r, c)) continue;
    auto l = label[static_cast<std::size_t>(r) * chm.width + static_cast<std::size_t>(c)];
    if (l != 0) members[l - 1].push_back(static_cast<std::uint32_t>(i));
  }
  std::uint32_t next = id_base;
  for (auto& m : members) {
    if (m.empty()) continue;
    set.add(make_cluster(pc, ++next, std::move(m), ClusterSource::watershed));
  }
  return set;
}

/// CHM -> smoothing -> maxima -> flood, as one call.
inline ClusterSet segment_tile(const Tile& tile, const WatershedParams& p = {}, std::uint32_t id_base = 0) {
  Raster chm = smooth_chm(rasterize_chm(tile, p.chm_pitch), p.smooth_sigma);
  auto seeds = detect_maxima(chm, p.min_height, p.seed_radius);
  return watershed_clusters(tile, chm, seeds, p.background, id_base);
}

}  // namespace treeseg
