#pragma once

// Synthetic ALS scenes with exact ground truth: sloped terrain, parametric
// crowns (cones and ellipsoids), rock blobs and shrubs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeseg/cluster.hpp"
#include "treeseg/io.hpp"
#include "treeseg/labels.hpp"
#include "treeseg/point_cloud.hpp"
#include "treeseg/ratings.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg {

enum class CrownShape { cone, ellipsoid };

struct SceneSpec {
  double extent = 100.0;         // m, square scene starting at (0, 0)
  double base_elevation = 500.0;  // m
  double slope = 0.0;            // rise/run along +x
  std::size_t tree_count = 20;
  double min_spacing = 6.0;      // m between stems
  double min_apex = 8.0, max_apex = 22.0;          // m
  double min_crown_radius = 2.0, max_crown_radius = 3.5;  // m
  double crown_depth_ratio = 0.6;                  // crown length / apex height
  double cone_fraction = 0.6;                      // share of conical crowns
  std::size_t rocks = 0;
  std::size_t shrubs = 0;
  double clearing_width = 0.0;       // m; treeless strip along the x = extent edge
  double confuser_clearance = -1.0;  // m; when >= 0, confusers stay this far outside every crown
  double density = 38.0;         // returns per m^2
  double noise_sigma = 0.05;     // m, vertical
  double surface_fraction = 0.85;   // returns from the top crown surface
  double interior_fraction = 0.10;  // returns from inside the crown; rest hit the ground
  std::uint64_t seed = 1;
};

enum class ObjectKind { tree, rock, shrub };

struct SceneObject {
  std::int32_t id = 0;   // trees: 1..n; confusers: -1, -2, ...
  ObjectKind kind = ObjectKind::tree;
  CrownShape shape = CrownShape::cone;
  double cx = 0, cy = 0;
  double base_z = 0;     // terrain elevation at the stem
  double height = 0;     // apex height above base_z
  double radius = 0;     // horizontal crown radius
  double crown_bottom = 0;  // height above base_z where the crown starts; -height for rocks

  // Top surface height above base_z at horizontal distance d (< 0 when outside).
  double surface(double d) const {
    if (d > radius) return -1.0;
    double t = d / radius;
    if (shape == CrownShape::cone) return height - (height - crown_bottom) * t;
    double half = 0.5 * (height - crown_bottom);
    return crown_bottom + half + half * std::sqrt(std::max(0.0, 1.0 - t * t));
  }
  // Lowest crown height at distance d (interior returns lie between this and the surface).
  double underside(double d) const {
    if (shape == CrownShape::cone || kind == ObjectKind::rock) return crown_bottom;
    double half = 0.5 * (height - crown_bottom);
    double t = d / radius;
    return crown_bottom + half - half * std::sqrt(std::max(0.0, 1.0 - t * t));
  }
};

struct Scene {
  SceneSpec spec;
  PointCloud cloud;                  // hag holds the true height above terrain
  std::vector<std::int32_t> object;  // per point: tree id > 0, confuser < 0, ground 0
  std::vector<SceneObject> objects;

  double terrain(double x, double) const { return spec.base_elevation + spec.slope * x; }
  std::size_t tree_count() const {
    return static_cast<std::size_t>(std::count_if(objects.begin(), objects.end(),
                                                  [](const auto& o) { return o.kind == ObjectKind::tree; }));
  }
};

namespace detail {

inline bool place_disc(std::mt19937_64& rng, double extent, double margin, double spacing,
                       const std::vector<SceneObject>& others, double& x, double& y, int retries = 2000,
                       const std::function<bool(double, double)>& allowed = {}) {
  std::uniform_real_distribution<double> u(margin, extent - margin);
  for (int k = 0; k < retries; ++k) {
    x = u(rng);
    y = u(rng);
    bool ok = !allowed || allowed(x, y);
    for (const auto& o : others) {
      double dx = o.cx - x, dy = o.cy - y;
      if (dx * dx + dy * dy < spacing * spacing) {
        ok = false;
        break;
      }
    }
    if (ok) return true;
  }
  return false;
}

}  // namespace detail

/// Samples one return per pulse, pulses uniform at the requested density.
/// A pulse under one or more objects returns from the highest surface with
/// probability surface_fraction, from inside that crown with probability
/// interior_fraction, and from the terrain otherwise.
inline Scene generate_forest(const SceneSpec& spec) {
  if (!(spec.density > 0)) throw InvalidArgument("density must be positive");
  if (!(spec.min_spacing > 0)) throw InvalidArgument("min spacing must be positive");
  if (!(spec.min_apex > 0) || spec.max_apex < spec.min_apex) throw InvalidArgument("invalid apex height range");
  if (!(spec.extent > 0)) throw InvalidArgument("extent must be positive");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Scene scene;
  scene.spec = spec;

  for (std::size_t t = 0; t < spec.tree_count; ++t) {
    SceneObject o;
    auto outside_clearing = [&](double x, double) { return x < spec.extent - spec.clearing_width; };
    if (!detail::place_disc(rng, spec.extent, 1.0, spec.min_spacing, scene.objects, o.cx, o.cy, 2000,
                            spec.clearing_width > 0 ? std::function<bool(double, double)>(outside_clearing)
                                                    : std::function<bool(double, double)>()))
      throw InvalidArgument("cannot place " + std::to_string(spec.tree_count) + " trees with spacing " +
                            std::to_string(spec.min_spacing) + " m");
    o.id = static_cast<std::int32_t>(t + 1);
    o.kind = ObjectKind::tree;
    o.shape = unit(rng) < spec.cone_fraction ? CrownShape::cone : CrownShape::ellipsoid;
    o.height = spec.min_apex + (spec.max_apex - spec.min_apex) * unit(rng);
    o.radius = spec.min_crown_radius + (spec.max_crown_radius - spec.min_crown_radius) * unit(rng);
    o.crown_bottom = o.height * (1.0 - spec.crown_depth_ratio);
    o.base_z = scene.terrain(o.cx, o.cy);
    scene.objects.push_back(o);
  }
  std::int32_t next_confuser = -1;
  auto place_confuser = [&](ObjectKind kind) {
    SceneObject o;
    double r = kind == ObjectKind::rock ? 1.5 + 1.5 * unit(rng) : 0.6 + 0.8 * unit(rng);
    // Confusers never overlap each other; unless a clearance is set they may
    // sit under tree crowns.
    std::vector<SceneObject> blockers;
    for (const auto& b : scene.objects)
      if (b.kind != ObjectKind::tree) blockers.push_back(b);
    auto in_open = [&](double x, double y) {
      for (const auto& t : scene.objects)
        if (t.kind == ObjectKind::tree && std::hypot(t.cx - x, t.cy - y) < t.radius + r + spec.confuser_clearance)
          return false;
      return true;
    };
    bool placed = spec.confuser_clearance >= 0
                      ? detail::place_disc(rng, spec.extent, r, 2.0 * r + 1.0, blockers, o.cx, o.cy, 20000, in_open)
                      : detail::place_disc(rng, spec.extent, r, 2.0 * r + 1.0, blockers, o.cx, o.cy);
    if (!placed)
      throw InvalidArgument("cannot place confusers");
    o.id = next_confuser--;
    o.kind = kind;
    o.radius = r;
    if (kind == ObjectKind::rock) {
      o.shape = CrownShape::ellipsoid;
      o.height = 1.0 + 2.5 * unit(rng);
      o.crown_bottom = -o.height;  // hemispheroid resting on the terrain
    } else {
      o.shape = unit(rng) < 0.5 ? CrownShape::cone : CrownShape::ellipsoid;
      o.height = 0.8 + 1.1 * unit(rng);
      o.crown_bottom = 0.2;
    }
    o.base_z = scene.terrain(o.cx, o.cy);
    scene.objects.push_back(o);
  };
  for (std::size_t k = 0; k < spec.rocks; ++k) place_confuser(ObjectKind::rock);
  for (std::size_t k = 0; k < spec.shrubs; ++k) place_confuser(ObjectKind::shrub);

  // Bucket objects on a coarse grid for the pulse lookup.
  const double bucket = 5.0;
  auto nb = static_cast<long>(std::ceil(spec.extent / bucket));
  std::vector<std::vector<std::size_t>> buckets(static_cast<std::size_t>(nb * nb));
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const auto& o = scene.objects[k];
    long c0 = std::max(0L, static_cast<long>(std::floor((o.cx - o.radius) / bucket)));
    long c1 = std::min(nb - 1, static_cast<long>(std::floor((o.cx + o.radius) / bucket)));
    long r0 = std::max(0L, static_cast<long>(std::floor((o.cy - o.radius) / bucket)));
    long r1 = std::min(nb - 1, static_cast<long>(std::floor((o.cy + o.radius) / bucket)));
    for (long r = r0; r <= r1; ++r)
      for (long c = c0; c <= c1; ++c) buckets[static_cast<std::size_t>(r * nb + c)].push_back(k);
  }

  std::poisson_distribution<std::uint64_t> count_dist(spec.density * spec.extent * spec.extent);
  auto pulses = count_dist(rng);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  scene.cloud.reserve(pulses);
  scene.object.reserve(pulses);
  for (std::uint64_t p = 0; p < pulses; ++p) {
    double x = spec.extent * unit(rng), y = spec.extent * unit(rng);
    double u = unit(rng);
    double depth_u = unit(rng);
    double n = spec.noise_sigma > 0 ? noise(rng) : 0.0;
    long bc = std::min(nb - 1, static_cast<long>(x / bucket)), br = std::min(nb - 1, static_cast<long>(y / bucket));
    const SceneObject* top = nullptr;
    double top_z = -1e300;
    for (auto k : buckets[static_cast<std::size_t>(br * nb + bc)]) {
      const auto& o = scene.objects[k];
      double d = std::hypot(x - o.cx, y - o.cy);
      if (d > o.radius) continue;
      double zs = o.base_z + o.surface(d) + spec.slope * (x - o.cx);
      if (zs > top_z) {
        top_z = zs;
        top = &o;
      }
    }
    double g = scene.terrain(x, y);
    double z = g;
    std::int32_t owner = 0;
    if (top && u < spec.surface_fraction + spec.interior_fraction) {
      owner = top->id;
      if (u < spec.surface_fraction || top->kind == ObjectKind::rock) {
        z = top_z;
      } else {
        double d = std::hypot(x - top->cx, y - top->cy);
        double lo = top->base_z + top->underside(d) + spec.slope * (x - top->cx);
        z = lo + depth_u * (top_z - lo);
      }
    }
    z += n;
    scene.cloud.push_back(x, y, z, static_cast<float>(z - g));
    scene.object.push_back(owner);
  }
  return scene;
}

/// Tree instances of the scene as a ClusterSet (cluster id = tree id).
inline ClusterSet truth_clusters(const Scene& scene) {
  std::map<std::int32_t, std::vector<std::uint32_t>> members;
  for (std::size_t i = 0; i < scene.object.size(); ++i)
    if (scene.object[i] > 0) members[scene.object[i]].push_back(static_cast<std::uint32_t>(i));
  ClusterSet set(scene.cloud.size());
  for (auto& [id, m] : members)
    set.add(make_cluster(scene.cloud, static_cast<std::uint32_t>(id), std::move(m), ClusterSource::truth));
  return set;
}

/// Ground-truth pseudo-label map: tree points Tree with their tree id,
/// everything else Ground.
inline LabelMap truth_labels(const Scene& scene) {
  LabelMap labels(scene.cloud.size());
  std::uint32_t max_id = 0;
  for (std::size_t i = 0; i < scene.object.size(); ++i)
    if (scene.object[i] > 0) {
      labels.semantic[i] = Semantic::Tree;
      labels.instance[i] = static_cast<std::uint32_t>(scene.object[i]);
      max_id = std::max(max_id, labels.instance[i]);
    }
  labels.next_instance = max_id + 1;
  return labels;
}

/// Stand-in for the human operator on synthetic data: NonTree when tree
/// returns are under half of the cluster, Multi when two or more trees each
/// supply >= 20% of its tree returns and >= 25% of their own returns,
/// Single otherwise.
inline RatingClass rate_from_truth(std::span<const std::uint32_t> cluster_points, std::span<const std::int32_t> object,
                                   const std::map<std::int32_t, std::size_t>& tree_sizes) {
  std::map<std::int32_t, std::size_t> counts;
  std::size_t tree_pts = 0;
  for (auto p : cluster_points)
    if (object[p] > 0) {
      ++counts[object[p]];
      ++tree_pts;
    }
  if (2 * tree_pts < cluster_points.size()) return RatingClass::NonTree;
  int significant = 0;
  for (auto [id, c] : counts) {
    auto it = tree_sizes.find(id);
    double own = it == tree_sizes.end() ? 1.0 : static_cast<double>(c) / static_cast<double>(it->second);
    if (static_cast<double>(c) >= 0.2 * static_cast<double>(tree_pts) && own >= 0.25) ++significant;
  }
  return significant >= 2 ? RatingClass::Multi : RatingClass::Single;
}

inline std::map<std::int32_t, std::size_t> tree_sizes(const Scene& scene) {
  std::map<std::int32_t, std::size_t> sizes;
  for (auto o : scene.object)
    if (o > 0) ++sizes[o];
  return sizes;
}

// --- Rating corpus -------------------------------------------------------------

struct CorpusExample {
  PointCloud points;  // z equals hag; terrain at 0
  RatingClass label = RatingClass::Single;
  std::vector<Vec3> apexes;  // crown tops present in the example
};

/// Isolated clusters with exact labels: Single = one crown; Multi = two or
/// three overlapping crowns with tops more than 1 m apart; NonTree = a rock
/// blob or a shrub patch. Only returns with hag >= 0.5 are kept, like
/// watershed clusters.
inline std::vector<CorpusExample> generate_rating_corpus(std::array<std::size_t, kNumClasses> per_class,
                                                         std::uint64_t seed, double density = 38.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto make_tree = [&](double cx, double cy) {
    SceneObject o;
    o.kind = ObjectKind::tree;
    o.shape = unit(rng) < 0.6 ? CrownShape::cone : CrownShape::ellipsoid;
    o.cx = cx;
    o.cy = cy;
    o.height = 8.0 + 14.0 * unit(rng);
    o.radius = 2.0 + 1.5 * unit(rng);
    o.crown_bottom = o.height * 0.4;
    return o;
  };
  auto render = [&](const std::vector<SceneObject>& objs) {
    double reach = 0;
    for (const auto& o : objs) reach = std::max(reach, std::hypot(o.cx, o.cy) + o.radius);
    double area = 4 * reach * reach;
    std::poisson_distribution<std::uint64_t> count(density * area);
    auto n = count(rng);
    PointCloud pc;
    for (std::uint64_t k = 0; k < n; ++k) {
      double x = (2 * unit(rng) - 1) * reach, y = (2 * unit(rng) - 1) * reach;
      double u = unit(rng), depth_u = unit(rng);
      const SceneObject* top = nullptr;
      double top_z = -1;
      for (const auto& o : objs) {
        double d = std::hypot(x - o.cx, y - o.cy);
        if (d > o.radius) continue;
        double s = o.surface(d);
        if (s > top_z) {
          top_z = s;
          top = &o;
        }
      }
      if (!top || u >= 0.95) continue;
      double z = top_z;
      if (u >= 0.85 && top->kind != ObjectKind::rock) {
        double lo = top->underside(std::hypot(x - top->cx, y - top->cy));
        z = lo + depth_u * (top_z - lo);
      }
      if (z < 0.5) continue;
      pc.push_back(x, y, z, static_cast<float>(z));
    }
    return pc;
  };

  std::vector<CorpusExample> out;
  for (std::size_t cls = 0; cls < kNumClasses; ++cls)
    for (std::size_t k = 0; k < per_class[cls]; ++k) {
      CorpusExample ex;
      ex.label = static_cast<RatingClass>(cls);
      std::vector<SceneObject> objs;
      if (ex.label == RatingClass::Single) {
        objs.push_back(make_tree(0, 0));
      } else if (ex.label == RatingClass::Multi) {
        std::size_t n = unit(rng) < 0.6 ? 2 : 3;
        objs.push_back(make_tree(0, 0));
        while (objs.size() < n) {
          double ang = 2 * std::numbers::pi * unit(rng);
          double sep = 2.5 + 2.5 * unit(rng);
          const auto& anchor = objs[static_cast<std::size_t>(unit(rng) * static_cast<double>(objs.size()))];
          objs.push_back(make_tree(anchor.cx + sep * std::cos(ang), anchor.cy + sep * std::sin(ang)));
        }
      } else if (unit(rng) < 0.5) {
        SceneObject rock;
        rock.kind = ObjectKind::rock;
        rock.radius = 1.5 + 2.0 * unit(rng);
        rock.shape = CrownShape::ellipsoid;
        rock.height = 1.0 + 2.5 * unit(rng);
        rock.crown_bottom = -rock.height;
        objs.push_back(rock);
      } else {
        std::size_t n = 2 + static_cast<std::size_t>(4 * unit(rng));
        for (std::size_t s = 0; s < n; ++s) {
          SceneObject shrub;
          shrub.kind = ObjectKind::shrub;
          shrub.shape = unit(rng) < 0.5 ? CrownShape::cone : CrownShape::ellipsoid;
          shrub.cx = (2 * unit(rng) - 1) * 3.0;
          shrub.cy = (2 * unit(rng) - 1) * 3.0;
          shrub.radius = 0.6 + 0.9 * unit(rng);
          shrub.height = 1.0 + 1.2 * unit(rng);
          shrub.crown_bottom = 0.2;
          objs.push_back(shrub);
        }
      }
      ex.points = render(objs);
      if (ex.points.empty()) ex.points.push_back(0, 0, 0.5, 0.5f);
      for (const auto& o : objs)
        if (o.kind == ObjectKind::tree) ex.apexes.push_back({o.cx, o.cy, o.height});
      out.push_back(std::move(ex));
    }
  return out;
}

/// Splits `total` over the classes in the given proportions (largest remainder).
inline std::array<std::size_t, kNumClasses> class_counts_for(std::size_t total,
                                                             const std::array<double, kNumClasses>& proportions) {
  std::array<std::size_t, kNumClasses> counts{};
  std::array<double, kNumClasses> rem{};
  std::size_t used = 0;
  double sum = proportions[0] + proportions[1] + proportions[2];
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    double exact = static_cast<double>(total) * proportions[c] / sum;
    counts[c] = static_cast<std::size_t>(std::floor(exact));
    rem[c] = exact - std::floor(exact);
    used += counts[c];
  }
  while (used < total) {
    auto c = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++counts[c];
    rem[c] = -1;
    ++used;
  }
  return counts;
}

// --- Scene files ----------------------------------------------------------------

inline nlohmann::json scene_truth_json(const Scene& scene) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : scene.objects)
    objs.push_back({{"id", o.id},
                    {"kind", o.kind == ObjectKind::tree ? "tree" : o.kind == ObjectKind::rock ? "rock" : "shrub"},
                    {"shape", o.shape == CrownShape::cone ? "cone" : "ellipsoid"},
                    {"center", {o.cx, o.cy, o.base_z}},
                    {"height", o.height},
                    {"radius", o.radius}});
  const auto& s = scene.spec;
  return {{"spec",
           {{"extent", s.extent}, {"slope", s.slope}, {"tree_count", s.tree_count}, {"min_spacing", s.min_spacing},
            {"rocks", s.rocks}, {"shrubs", s.shrubs}, {"density", s.density}, {"noise_sigma", s.noise_sigma},
            {"seed", s.seed}}},
          {"point_count", scene.cloud.size()},
          {"objects", objs}};
}

inline constexpr std::uint32_t kObjectsVersion = 1;

/// Scene directory: `cloud.xyz` (x y z per line, 0.1 mm resolution),
/// `objects.bin` (per-point object id, same order) and `truth.json`.
inline void write_scene(const std::filesystem::path& dir, const Scene& scene) {
  std::filesystem::create_directories(dir);
  std::string text;
  text.reserve(scene.cloud.size() * 36);
  char buf[96];
  for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
    int n = std::snprintf(buf, sizeof buf, "%.4f %.4f %.4f\n", scene.cloud.x[i], scene.cloud.y[i], scene.cloud.z[i]);
    text.append(buf, static_cast<std::size_t>(n));
  }
  io::write_atomic(dir / "cloud.xyz", text);
  io::ByteWriter w;
  w.put_bytes("TROB");
  w.put(kObjectsVersion);
  w.put(static_cast<std::uint64_t>(scene.object.size()));
  w.put_array(std::span<const std::int32_t>(scene.object));
  io::write_atomic(dir / "objects.bin", w.bytes());
  io::write_atomic(dir / "truth.json", scene_truth_json(scene).dump(2));
}

inline std::vector<std::int32_t> read_scene_objects(const std::filesystem::path& path) {
  auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  r.expect_magic("TROB");
  if (r.get<std::uint32_t>() != kObjectsVersion) throw FormatError(path.string() + ": unsupported version");
  auto n = r.get<std::uint64_t>();
  return r.get_array<std::int32_t>(static_cast<std::size_t>(n));
}

}  // namespace treeseg
