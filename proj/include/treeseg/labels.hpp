#pragma once

#include <algorithm>
#include <array>
#include <iterator>
#include <limits>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treeseg/cluster.hpp"
#include "treeseg/error.hpp"
#include "treeseg/io.hpp"
#include "treeseg/point_cloud.hpp"
#include "treeseg/ratings.hpp"

namespace treeseg {

enum class Semantic : std::uint8_t { Ground = 0, Gray = 1, Tree = 2 };

/// Pseudo-label state of one tile.
///
/// Invariants: instance != 0 implies semantic == Tree; next_instance is
/// larger than every instance id in use; both arrays have one entry per point.
struct LabelMap {
  std::vector<Semantic> semantic;
  std::vector<std::uint32_t> instance;
  std::uint32_t next_instance = 1;

  LabelMap() = default;
  explicit LabelMap(std::size_t n) : semantic(n, Semantic::Ground), instance(n, 0) {}

  std::size_t size() const { return semantic.size(); }

  std::size_t count(Semantic s) const { return static_cast<std::size_t>(std::count(semantic.begin(), semantic.end(), s)); }

  std::vector<std::uint32_t> instance_ids() const {
    std::vector<std::uint32_t> ids;
    for (auto id : instance)
      if (id != 0) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  std::size_t instance_count() const { return instance_ids().size(); }

  // Empty string when consistent, otherwise a description of the first violation.
  std::string check() const {
    if (semantic.size() != instance.size()) return "semantic/instance length mismatch";
    for (std::size_t i = 0; i < size(); ++i) {
      if (static_cast<std::uint8_t>(semantic[i]) > 2) return "bad semantic value at " + std::to_string(i);
      if (instance[i] != 0 && semantic[i] != Semantic::Tree) return "instance on non-tree point " + std::to_string(i);
      if (instance[i] >= next_instance) return "instance id not below counter at " + std::to_string(i);
    }
    return {};
  }
};

/// Point lists of the instances present in a LabelMap, kept in step with it
/// by merge_candidate.
using InstanceTable = std::map<std::uint32_t, std::vector<std::uint32_t>>;

inline InstanceTable collect_instances(const LabelMap& labels) {
  InstanceTable table;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels.instance[i] != 0) table[labels.instance[i]].push_back(static_cast<std::uint32_t>(i));
  return table;
}

/// All points Ground; Multi-rated clusters become Gray; Single-rated
/// clusters become Tree with a fresh instance id (assigned in cluster-id
/// order, overriding Gray). NonTree clusters stay Ground.
inline LabelMap build_initial_labels(std::size_t point_count, const ClusterSet& clusters,
                                     const std::function<std::optional<RatingClass>(std::uint32_t)>& rating_of) {
  LabelMap labels(point_count);
  std::vector<std::pair<const Cluster*, RatingClass>> rated;
  for (const auto& [id, c] : clusters.clusters()) {
    auto r = rating_of(id);
    if (!r) throw InvalidArgument("cluster " + std::to_string(id) + " has no rating");
    rated.emplace_back(&c, *r);
  }
  for (auto [c, r] : rated)
    if (r == RatingClass::Multi)
      for (auto p : c->points) labels.semantic[p] = Semantic::Gray;
  for (auto [c, r] : rated) {
    if (r != RatingClass::Single) continue;
    std::uint32_t id = labels.next_instance++;
    for (auto p : c->points) {
      labels.semantic[p] = Semantic::Tree;
      labels.instance[p] = id;
    }
  }
  return labels;
}

inline LabelMap build_initial_labels(std::size_t point_count, const ClusterSet& clusters,
                                     const std::map<std::uint32_t, RatingClass>& ratings) {
  return build_initial_labels(point_count, clusters, [&](std::uint32_t id) -> std::optional<RatingClass> {
    auto it = ratings.find(id);
    if (it == ratings.end()) return std::nullopt;
    return it->second;
  });
}

// --- Intersection over cluster --------------------------------------------

inline std::size_t intersection_size(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  std::size_t n = 0;
  auto i = a.begin(), j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else { ++n; ++i; ++j; }
  }
  return n;
}

struct IocPair {
  double first = 0;   // |a ∩ b| / |a|
  double second = 0;  // |a ∩ b| / |b|
};

/// Intersection over cluster for both operands. Inputs are ascending index lists.
inline IocPair ioc(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("intersection over cluster of an empty cluster");
  double n = static_cast<double>(intersection_size(a, b));
  return {n / static_cast<double>(a.size()), n / static_cast<double>(b.size())};
}

inline IocPair ioc(const Cluster& candidate, const Cluster& other) { return ioc(candidate.points, other.points); }

// --- Candidate acceptance ---------------------------------------------------

enum class OverlapMeasure {
  diameter,  // max pairwise XY distance inside the intersection
  depth,     // how far the intersection reaches into the candidate, in XY
};

struct AcceptanceRules {
  double apex_tolerance = 0.01;   // m, apexes closer than this are "the same tip"
  double max_overlap = 2.0;       // m
  double max_ioc = 0.7;           // strict upper bound, both clusters
  OverlapMeasure measure = OverlapMeasure::diameter;
};

enum class RejectTest { tip, overlap, ioc };

inline std::string to_string(RejectTest t) {
  switch (t) {
    case RejectTest::tip: return "tip";
    case RejectTest::overlap: return "overlap";
    case RejectTest::ioc: return "ioc";
  }
  return "unknown";
}

struct Rejection {
  RejectTest test;
  std::uint32_t instance;
  double value;
  bool operator==(const Rejection&) const = default;
};

struct Decision {
  bool accepted = false;
  std::vector<std::uint32_t> intersecting;  // ascending instance ids
  std::vector<Rejection> reasons;           // empty when accepted
};

namespace detail {

inline double cross(const std::array<double, 2>& o, const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

}  // namespace detail

/// Largest XY distance between two of the given points (convex hull, then
/// all hull pairs).
inline double xy_diameter(const PointCloud& pc, std::span<const std::uint32_t> idx) {
  if (idx.size() < 2) return 0.0;
  std::vector<std::array<double, 2>> pts;
  pts.reserve(idx.size());
  for (auto i : idx) pts.push_back({pc.x[i], pc.y[i]});
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) {
    double dx = pts.front()[0] - pts.back()[0], dy = pts.front()[1] - pts.back()[1];
    return std::sqrt(dx * dx + dy * dy);
  }
  std::vector<std::array<double, 2>> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && detail::cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && detail::cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
    hull[k++] = pts[i - 1];
  }
  hull.resize(k - 1);
  double best = 0;
  for (std::size_t i = 0; i < hull.size(); ++i)
    for (std::size_t j = i + 1; j < hull.size(); ++j) {
      double dx = hull[i][0] - hull[j][0], dy = hull[i][1] - hull[j][1];
      best = std::max(best, dx * dx + dy * dy);
    }
  return std::sqrt(best);
}

/// Max over intersection points of the XY distance to the nearest candidate
/// point outside the intersection.
inline double xy_overlap_depth(const PointCloud& pc, std::span<const std::uint32_t> intersection,
                               std::span<const std::uint32_t> candidate) {
  std::vector<std::uint32_t> outside;
  std::set_difference(candidate.begin(), candidate.end(), intersection.begin(), intersection.end(),
                      std::back_inserter(outside));
  if (outside.empty()) return std::numeric_limits<double>::infinity();
  double depth = 0;
  for (auto p : intersection) {
    double nearest = std::numeric_limits<double>::infinity();
    for (auto q : outside) {
      double dx = pc.x[p] - pc.x[q], dy = pc.y[p] - pc.y[q];
      nearest = std::min(nearest, dx * dx + dy * dy);
    }
    depth = std::max(depth, std::sqrt(nearest));
  }
  return depth;
}

/// Decides whether a Single-rated candidate becomes a new instance.
///
/// A candidate touching only Ground/Gray points is accepted outright.
/// Otherwise, against every instance it intersects: the apexes must differ
/// (3D distance > apex_tolerance), the intersection must stay within
/// max_overlap metres, and the intersection over cluster must be below
/// max_ioc for the candidate and for the instance. Every failed test is
/// reported.
inline Decision accept_candidate(const Cluster& candidate, const PointCloud& pc, const LabelMap& labels,
                                 const InstanceTable& instances, const AcceptanceRules& rules = {}) {
  Decision d;
  std::map<std::uint32_t, std::vector<std::uint32_t>> shared;
  for (auto p : candidate.points)
    if (labels.instance[p] != 0) shared[labels.instance[p]].push_back(p);
  if (shared.empty()) {
    d.accepted = true;
    return d;
  }
  for (auto& [id, inter] : shared) {
    d.intersecting.push_back(id);
    const auto& members = instances.at(id);
    auto apex = apex_of(pc, members);
    double tip_gap = distance(pc.position(apex), pc.position(candidate.apex));
    if (!(tip_gap > rules.apex_tolerance)) d.reasons.push_back({RejectTest::tip, id, tip_gap});

    double extent = rules.measure == OverlapMeasure::diameter ? xy_diameter(pc, inter)
                                                              : xy_overlap_depth(pc, inter, candidate.points);
    if (extent > rules.max_overlap) d.reasons.push_back({RejectTest::overlap, id, extent});

    double n = static_cast<double>(inter.size());
    double ioc_candidate = n / static_cast<double>(candidate.points.size());
    double ioc_instance = n / static_cast<double>(members.size());
    double worst = std::max(ioc_candidate, ioc_instance);
    if (!(worst < rules.max_ioc)) d.reasons.push_back({RejectTest::ioc, id, worst});
  }
  d.accepted = d.reasons.empty();
  return d;
}

/// Adds an accepted candidate as a new instance. Points that belong to no
/// instance go to the new one; a contested point goes to whichever 3D
/// centroid (both taken before reassignment) is nearer, the existing owner
/// keeping it on ties. Returns the new instance id.
inline std::uint32_t merge_candidate(const Cluster& candidate, const PointCloud& pc, LabelMap& labels,
                                     InstanceTable& instances) {
  std::uint32_t id = labels.next_instance++;
  Vec3 cand_c = centroid_of(pc, candidate.points);
  std::map<std::uint32_t, Vec3> old_c;
  for (auto p : candidate.points) {
    auto owner = labels.instance[p];
    if (owner != 0 && !old_c.count(owner)) old_c[owner] = centroid_of(pc, instances.at(owner));
  }
  std::map<std::uint32_t, std::vector<std::uint32_t>> lost;
  std::vector<std::uint32_t> gained;
  for (auto p : candidate.points) {
    auto owner = labels.instance[p];
    if (owner != 0) {
      Vec3 q = pc.position(p);
      if (!(distance(q, cand_c) < distance(q, old_c[owner]))) continue;
      lost[owner].push_back(p);
    }
    labels.semantic[p] = Semantic::Tree;
    labels.instance[p] = id;
    gained.push_back(p);
  }
  for (auto& [owner, pts] : lost) {
    auto& members = instances.at(owner);
    std::vector<std::uint32_t> kept;
    std::set_difference(members.begin(), members.end(), pts.begin(), pts.end(), std::back_inserter(kept));
    members = std::move(kept);
    if (members.empty()) instances.erase(owner);
  }
  if (!gained.empty()) instances[id] = std::move(gained);
  return id;
}

// --- LabelMap file -----------------------------------------------------------
// magic "LBLM", version u32 = 1, count u64, semantic u8[n], instance u32[n].

inline constexpr std::uint32_t kLabelVersion = 1;

inline std::vector<unsigned char> encode_labels(const LabelMap& labels) {
  io::ByteWriter w;
  w.put_bytes("LBLM");
  w.put(kLabelVersion);
  w.put(static_cast<std::uint64_t>(labels.size()));
  std::vector<std::uint8_t> sem(labels.size());
  for (std::size_t i = 0; i < sem.size(); ++i) sem[i] = static_cast<std::uint8_t>(labels.semantic[i]);
  w.put_array<std::uint8_t>(sem);
  w.put_array<std::uint32_t>(labels.instance);
  return w.bytes();
}

inline LabelMap decode_labels(std::span<const unsigned char> bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  r.expect_magic("LBLM");
  if (auto v = r.get<std::uint32_t>(); v != kLabelVersion) r.fail("unsupported version " + std::to_string(v));
  auto n64 = r.get<std::uint64_t>();
  if (n64 > r.remaining()) r.fail("count exceeds file size");
  auto n = static_cast<std::size_t>(n64);
  auto sem = r.get_array<std::uint8_t>(n);
  LabelMap labels;
  labels.instance = r.get_array<std::uint32_t>(n);
  if (!r.at_end()) r.fail("trailing bytes");
  labels.semantic.resize(n);
  std::uint32_t max_id = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (sem[i] > 2) r.fail("semantic value out of range");
    labels.semantic[i] = static_cast<Semantic>(sem[i]);
    max_id = std::max(max_id, labels.instance[i]);
  }
  labels.next_instance = max_id + 1;
  if (auto err = labels.check(); !err.empty()) r.fail(err);
  return labels;
}

inline void write_label_file(const std::filesystem::path& path, const LabelMap& labels) {
  io::write_atomic(path, encode_labels(labels));
}

inline LabelMap read_label_file(const std::filesystem::path& path) {
  return decode_labels(io::read_file(path), path.string());
}

}  // namespace treeseg
