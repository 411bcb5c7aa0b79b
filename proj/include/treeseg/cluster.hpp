#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeseg/error.hpp"
#include "treeseg/io.hpp"
#include "treeseg/point_cloud.hpp"

namespace treeseg {

enum class ClusterSource { watershed, backend, truth };

inline std::string to_string(ClusterSource s) {
  switch (s) {
    case ClusterSource::watershed: return "watershed";
    case ClusterSource::backend: return "backend";
    case ClusterSource::truth: return "truth";
  }
  return "unknown";
}

inline ClusterSource cluster_source_from_string(const std::string& s) {
  if (s == "watershed") return ClusterSource::watershed;
  if (s == "backend") return ClusterSource::backend;
  if (s == "truth") return ClusterSource::truth;
  throw FormatError("unknown cluster source '" + s + "'");
}

/// Instance hypothesis over one tile. `points` ascend and are unique; `apex`
/// is the member with maximal hag (lowest index on ties).
struct Cluster {
  std::uint32_t id = 0;
  std::vector<std::uint32_t> points;
  std::uint32_t apex = 0;
  Vec3 centroid;
  ClusterSource source = ClusterSource::watershed;

  std::size_t size() const { return points.size(); }
};

inline Vec3 centroid_of(const PointCloud& pc, std::span<const std::uint32_t> idx) {
  Vec3 c;
  for (auto i : idx) {
    c.x += pc.x[i];
    c.y += pc.y[i];
    c.z += pc.z[i];
  }
  double n = static_cast<double>(idx.size());
  return {c.x / n, c.y / n, c.z / n};
}

inline std::uint32_t apex_of(const PointCloud& pc, std::span<const std::uint32_t> idx) {
  std::uint32_t best = idx.front();
  for (auto i : idx)
    if (pc.hag[i] > pc.hag[best] || (pc.hag[i] == pc.hag[best] && i < best)) best = i;
  return best;
}

/// Builds a cluster from arbitrary member indices (sorted and deduplicated here).
inline Cluster make_cluster(const PointCloud& pc, std::uint32_t id, std::vector<std::uint32_t> members,
                            ClusterSource source) {
  if (members.empty()) throw InvalidArgument("cluster " + std::to_string(id) + " has no points");
  std::sort(members.begin(), members.end());
  members.erase(std::unique(members.begin(), members.end()), members.end());
  if (members.back() >= pc.size()) throw InvalidArgument("cluster point index out of range");
  Cluster c;
  c.id = id;
  c.points = std::move(members);
  c.apex = apex_of(pc, c.points);
  c.centroid = centroid_of(pc, c.points);
  c.source = source;
  return c;
}

/// Disjoint clusters over one tile plus the point -> cluster inverse map.
class ClusterSet {
public:
  ClusterSet() = default;
  explicit ClusterSet(std::size_t point_count) : owner_(point_count, 0) {}

  std::size_t point_count() const { return owner_.size(); }
  std::size_t size() const { return clusters_.size(); }
  bool empty() const { return clusters_.empty(); }

  const std::map<std::uint32_t, Cluster>& clusters() const { return clusters_; }
  const Cluster& at(std::uint32_t id) const {
    auto it = clusters_.find(id);
    if (it == clusters_.end()) throw InvalidArgument("no cluster " + std::to_string(id));
    return it->second;
  }
  bool contains(std::uint32_t id) const { return clusters_.count(id) != 0; }

  // 0 = unassigned.
  std::uint32_t owner(std::size_t point) const { return owner_[point]; }
  std::span<const std::uint32_t> owners() const { return owner_; }

  void add(Cluster c) {
    if (c.id == 0) throw InvalidArgument("cluster id 0 is reserved");
    if (clusters_.count(c.id)) throw InvalidArgument("duplicate cluster id " + std::to_string(c.id));
    for (auto p : c.points) {
      if (p >= owner_.size()) throw InvalidArgument("cluster point index out of range");
      if (owner_[p] != 0)
        throw InvalidArgument("clusters " + std::to_string(owner_[p]) + " and " + std::to_string(c.id) +
                              " share point " + std::to_string(p));
    }
    for (auto p : c.points) owner_[p] = c.id;
    clusters_.emplace(c.id, std::move(c));
  }

  std::uint32_t max_id() const { return clusters_.empty() ? 0 : clusters_.rbegin()->first; }

private:
  std::map<std::uint32_t, Cluster> clusters_;
  std::vector<std::uint32_t> owner_;
};

// --- ClusterSet file -------------------------------------------------------
// { "tile": name, "point_count": n, "clusters": [ {id, point_indices,
//   apex_index, centroid: [x,y,z], source} ] }

inline nlohmann::json to_json(const ClusterSet& set, const std::string& tile_name) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [id, c] : set.clusters())
    arr.push_back({{"id", id},
                   {"point_indices", c.points},
                   {"apex_index", c.apex},
                   {"centroid", {c.centroid.x, c.centroid.y, c.centroid.z}},
                   {"source", to_string(c.source)}});
  return {{"tile", tile_name}, {"point_count", set.point_count()}, {"clusters", std::move(arr)}};
}

inline ClusterSet cluster_set_from_json(const nlohmann::json& j, const std::string& context) {
  try {
    ClusterSet set(j.at("point_count").get<std::size_t>());
    for (const auto& jc : j.at("clusters")) {
      Cluster c;
      c.id = jc.at("id").get<std::uint32_t>();
      c.points = jc.at("point_indices").get<std::vector<std::uint32_t>>();
      c.apex = jc.at("apex_index").get<std::uint32_t>();
      const auto& cen = jc.at("centroid");
      c.centroid = {cen.at(0).get<double>(), cen.at(1).get<double>(), cen.at(2).get<double>()};
      c.source = cluster_source_from_string(jc.at("source").get<std::string>());
      if (c.points.empty()) throw FormatError("cluster " + std::to_string(c.id) + " is empty");
      if (!std::is_sorted(c.points.begin(), c.points.end()) ||
          std::adjacent_find(c.points.begin(), c.points.end()) != c.points.end())
        throw FormatError("cluster " + std::to_string(c.id) + " indices not ascending/unique");
      if (!std::binary_search(c.points.begin(), c.points.end(), c.apex))
        throw FormatError("cluster " + std::to_string(c.id) + " apex is not a member");
      set.add(std::move(c));
    }
    return set;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": malformed cluster file: " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(context + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(context + ": " + e.what());
  }
}

inline void write_cluster_file(const std::filesystem::path& path, const ClusterSet& set, const std::string& tile) {
  io::write_atomic(path, to_json(set, tile).dump());
}

inline ClusterSet read_cluster_file(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed cluster file: " + e.what());
  }
  return cluster_set_from_json(j, path.string());
}

}  // namespace treeseg
