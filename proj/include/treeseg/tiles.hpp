#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeseg/error.hpp"
#include "treeseg/io.hpp"
#include "treeseg/point_cloud.hpp"

namespace treeseg {

/// Square chunk of a cloud. Membership is half-open: origin <= (x, y) < origin + size.
struct Tile {
  long ix = 0, iy = 0;
  double origin_x = 0, origin_y = 0;
  double size = 100.0;
  PointCloud points;

  std::string name() const { return "t_" + std::to_string(ix) + "_" + std::to_string(iy); }
  std::size_t size_points() const { return points.size(); }
};

struct TileStore {
  std::vector<Tile> tiles;  // sorted by (iy, ix)
  double tile_size = 100.0;
  std::string crs;

  std::size_t total_points() const {
    std::size_t n = 0;
    for (const auto& t : tiles) n += t.points.size();
    return n;
  }
};

struct TileMembership {
  long ix = 0, iy = 0;
  double origin_x = 0, origin_y = 0;
  std::vector<std::uint32_t> points;  // input indices, ascending
};

/// Tile assignment by floor((x - minx) / size), floor((y - miny) / size),
/// sorted by (iy, ix); empty tiles are not listed. Lets per-point side data
/// (e.g. ground truth) follow the same partition as build_tiles.
inline std::vector<TileMembership> tile_membership(const PointCloud& cloud, double tile_size = 100.0) {
  if (cloud.empty()) throw InvalidArgument("cannot tile an empty cloud");
  if (!(tile_size > 0)) throw InvalidArgument("tile size must be positive");
  Bounds b = cloud.bounds();
  std::map<std::pair<long, long>, std::vector<std::uint32_t>> members;  // (iy, ix)
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    long ix = static_cast<long>(std::floor((cloud.x[i] - b.min.x) / tile_size));
    long iy = static_cast<long>(std::floor((cloud.y[i] - b.min.y) / tile_size));
    members[{iy, ix}].push_back(static_cast<std::uint32_t>(i));
  }
  std::vector<TileMembership> out;
  for (auto& [key, idx] : members)
    out.push_back({key.second, key.first, b.min.x + static_cast<double>(key.second) * tile_size,
                   b.min.y + static_cast<double>(key.first) * tile_size, std::move(idx)});
  return out;
}

/// Partitions the cloud into tiles (see tile_membership). Point order within
/// a tile follows the input order.
inline TileStore build_tiles(const PointCloud& cloud, double tile_size = 100.0) {
  TileStore store;
  store.tile_size = tile_size;
  for (auto& m : tile_membership(cloud, tile_size)) {
    Tile t;
    t.ix = m.ix;
    t.iy = m.iy;
    t.size = tile_size;
    t.origin_x = m.origin_x;
    t.origin_y = m.origin_y;
    t.points = cloud.subset(m.points);
    store.tiles.push_back(std::move(t));
  }
  return store;
}

// --- Binary tile format ----------------------------------------------------
//
// magic "TRLT", version u32 = 1, field bitmask u32 (bit0 intensity, bit1 rgb),
// point count u64, then columnar blocks x f64[n], y f64[n], z f64[n],
// hag f32[n], [intensity f32[n]], [rgb u8[3n]]. Little-endian.

inline constexpr std::uint32_t kTileVersion = 1;

inline std::vector<unsigned char> encode_tile(const PointCloud& pc) {
  io::ByteWriter w;
  w.put_bytes("TRLT");
  w.put(kTileVersion);
  std::uint32_t mask = (pc.has_intensity() ? 1u : 0u) | (pc.has_rgb() ? 2u : 0u);
  w.put(mask);
  w.put(static_cast<std::uint64_t>(pc.size()));
  w.put_array<double>(pc.x);
  w.put_array<double>(pc.y);
  w.put_array<double>(pc.z);
  w.put_array<float>(pc.hag);
  if (pc.has_intensity()) w.put_array<float>(pc.intensity);
  if (pc.has_rgb()) w.put_array<std::uint8_t>(pc.rgb);
  return w.bytes();
}

inline PointCloud decode_tile(std::span<const unsigned char> bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  r.expect_magic("TRLT");
  if (auto v = r.get<std::uint32_t>(); v != kTileVersion) r.fail("unsupported version " + std::to_string(v));
  auto mask = r.get<std::uint32_t>();
  if (mask & ~3u) r.fail("unknown field bits");
  auto n64 = r.get<std::uint64_t>();
  if (n64 > r.remaining()) r.fail("point count exceeds file size");
  auto n = static_cast<std::size_t>(n64);
  PointCloud pc;
  pc.x = r.get_array<double>(n);
  pc.y = r.get_array<double>(n);
  pc.z = r.get_array<double>(n);
  pc.hag = r.get_array<float>(n);
  if (mask & 1u) pc.intensity = r.get_array<float>(n);
  if (mask & 2u) pc.rgb = r.get_array<std::uint8_t>(3 * n);
  if (!r.at_end()) r.fail("trailing bytes");
  return pc;
}

inline void write_tile_file(const std::filesystem::path& path, const PointCloud& pc) {
  io::write_atomic(path, encode_tile(pc));
}

inline PointCloud read_tile_file(const std::filesystem::path& path) {
  return decode_tile(io::read_file(path), path.string());
}

/// Writes `<dir>/t_<ix>_<iy>.bin` per tile plus `<dir>/manifest.json`.
inline void write_tile_store(const std::filesystem::path& dir, const TileStore& store) {
  std::filesystem::create_directories(dir);
  nlohmann::json tiles = nlohmann::json::array();
  for (const auto& t : store.tiles) {
    write_tile_file(dir / (t.name() + ".bin"), t.points);
    Bounds b = t.points.bounds();
    tiles.push_back({{"name", t.name()},
                     {"ix", t.ix},
                     {"iy", t.iy},
                     {"origin", {t.origin_x, t.origin_y}},
                     {"size", t.size},
                     {"count", t.points.size()},
                     {"bounds", {b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z}}});
  }
  nlohmann::json manifest = {{"format", "TRLT"},
                             {"version", kTileVersion},
                             {"tile_size", store.tile_size},
                             {"crs", store.crs},
                             {"total_points", store.total_points()},
                             {"tiles", tiles}};
  io::write_atomic(dir / "manifest.json", manifest.dump(2));
}

inline TileStore read_tile_store(const std::filesystem::path& dir) {
  auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw IoError("no tile manifest at " + manifest_path.string() + " (run `tile` or `synth` first)");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  TileStore store;
  store.tile_size = manifest.value("tile_size", 100.0);
  store.crs = manifest.value("crs", std::string{});
  for (const auto& jt : manifest.at("tiles")) {
    Tile t;
    t.ix = jt.at("ix").get<long>();
    t.iy = jt.at("iy").get<long>();
    t.origin_x = jt.at("origin").at(0).get<double>();
    t.origin_y = jt.at("origin").at(1).get<double>();
    t.size = jt.value("size", store.tile_size);
    t.points = read_tile_file(dir / (t.name() + ".bin"));
    if (t.points.size() != jt.at("count").get<std::size_t>())
      throw FormatError(t.name() + ": manifest count disagrees with tile file");
    store.tiles.push_back(std::move(t));
  }
  return store;
}

}  // namespace treeseg
