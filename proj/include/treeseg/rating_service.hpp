#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

// <resolv.h>, pulled in by httplib, breaks Eigen's headers if it comes first.
#include <Eigen/Core>
#include <httplib.h>
#include <json.hpp>

#include "treeseg/cluster.hpp"
#include "treeseg/error.hpp"
#include "treeseg/ratings.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg {

struct SessionProgress {
  std::size_t total = 0, rated = 0, remaining = 0;
};

/// Human rating state over a fixed set of clusters. Clusters are offered in
/// a seeded random order (uniform sampling without replacement); ratings go
/// straight to the append-only log, so a restarted session replays it and
/// continues where it stopped. Safe for concurrent use.
class RatingSession {
public:
  RatingSession(TileStore tiles, std::vector<ClusterSet> clusters, RatingLog log, std::uint64_t sample_seed)
      : tiles_(std::move(tiles)), clusters_(std::move(clusters)), log_(std::move(log)) {
    if (clusters_.size() != tiles_.tiles.size()) throw InvalidArgument("one cluster set per tile required");
    for (std::size_t t = 0; t < clusters_.size(); ++t)
      for (const auto& [id, c] : clusters_[t].clusters()) {
        if (!where_.emplace(id, t).second) throw InvalidArgument("cluster id " + std::to_string(id) + " repeats across tiles");
        order_.push_back(id);
      }
    std::mt19937_64 rng(sample_seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  SessionProgress progress() const {
    std::shared_lock lock(mutex_);
    SessionProgress p;
    p.total = order_.size();
    for (const auto& [id, r] : log_.active()) p.rated += where_.count(id);
    p.remaining = p.total - p.rated;
    return p;
  }

  std::optional<std::uint32_t> next() const {
    std::shared_lock lock(mutex_);
    const auto& active = log_.active();
    for (auto id : order_)
      if (!active.count(id)) return id;
    return std::nullopt;
  }

  bool contains(std::uint32_t id) const { return where_.count(id) != 0; }

  /// {id, tile, points: {x[], y[], hag[], rgb[]?}, centroid, bbox: {min, max}}.
  nlohmann::json cluster_json(std::uint32_t id) const {
    auto it = where_.find(id);
    if (it == where_.end()) throw InvalidArgument("no cluster " + std::to_string(id));
    const auto& tile = tiles_.tiles[it->second];
    const auto& pc = tile.points;
    const auto& c = clusters_[it->second].at(id);
    std::vector<double> xs, ys;
    std::vector<float> hag;
    std::vector<std::uint8_t> rgb;
    Bounds b;
    for (auto i : c.points) {
      xs.push_back(pc.x[i]);
      ys.push_back(pc.y[i]);
      hag.push_back(pc.hag[i]);
      b.extend(pc.x[i], pc.y[i], pc.z[i]);
      if (pc.has_rgb()) rgb.insert(rgb.end(), pc.rgb.begin() + 3 * i, pc.rgb.begin() + 3 * i + 3);
    }
    nlohmann::json points = {{"x", xs}, {"y", ys}, {"hag", hag}};
    if (pc.has_rgb()) points["rgb"] = rgb;
    return {{"id", id},
            {"tile", tile.name()},
            {"points", points},
            {"centroid", {c.centroid.x, c.centroid.y, c.centroid.z}},
            {"bbox", {{"min", {b.min.x, b.min.y, b.min.z}}, {"max", {b.max.x, b.max.y, b.max.z}}}}};
  }

  /// False for an unknown cluster id.
  bool rate(std::uint32_t id, RatingClass cls) {
    auto it = where_.find(id);
    if (it == where_.end()) return false;
    std::unique_lock lock(mutex_);
    log_.append({id, tiles_.tiles[it->second].name(), cls, RatingSource::human, 1.0, utc_timestamp()});
    return true;
  }

  std::optional<std::uint32_t> undo() {
    std::unique_lock lock(mutex_);
    return log_.undo_last(RatingSource::human);
  }

private:
  TileStore tiles_;
  std::vector<ClusterSet> clusters_;
  RatingLog log_;
  std::map<std::uint32_t, std::size_t> where_;  // cluster id -> tile
  std::vector<std::uint32_t> order_;
  mutable std::shared_mutex mutex_;
};

inline constexpr const char* kFallbackPage =
    "<!doctype html><title>treeseg rating</title><p>Rating API: GET /api/session, GET /api/clusters/next, "
    "GET /api/clusters/{id}, POST /api/clusters/{id}/rating, POST /api/ratings/undo.";

/// HTTP front end of a RatingSession. Static files of the rating UI are
/// served from `static_dir` when it exists.
class RatingServer {
public:
  explicit RatingServer(RatingSession& session, const std::filesystem::path& static_dir = {}) : session_(session) {
    // SO_REUSEADDR only: httplib's default SO_REUSEPORT would let two
    // servers share a port silently.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    auto json = [](httplib::Response& res, const nlohmann::json& body, int status = 200) {
      res.status = status;
      res.set_content(body.dump(), "application/json");
    };
    server_.Get("/api/session", [this, json](const httplib::Request&, httplib::Response& res) {
      auto p = session_.progress();
      json(res, {{"total", p.total}, {"rated", p.rated}, {"remaining", p.remaining}});
    });
    server_.Get("/api/clusters/next", [this, json](const httplib::Request&, httplib::Response& res) {
      auto id = session_.next();
      if (!id) {
        res.status = 204;
        return;
      }
      json(res, {{"id", *id}});
    });
    server_.Get(R"(/api/clusters/(\d+))", [this, json](const httplib::Request& req, httplib::Response& res) {
      auto id = parse_id(req.matches[1]);
      if (!id || !session_.contains(*id)) return json(res, {{"error", "unknown cluster"}}, 404);
      json(res, session_.cluster_json(*id));
    });
    server_.Post(R"(/api/clusters/(\d+)/rating)", [this, json](const httplib::Request& req, httplib::Response& res) {
      auto id = parse_id(req.matches[1]);
      if (!id || !session_.contains(*id)) return json(res, {{"error", "unknown cluster"}}, 404);
      auto body = nlohmann::json::parse(req.body, nullptr, false);
      std::optional<RatingClass> cls;
      if (body.is_object() && body.contains("class") && body["class"].is_string())
        cls = parse_rating_class(body["class"].get<std::string>());
      if (!cls) return json(res, {{"error", "class must be single, multi or non_tree"}}, 400);
      session_.rate(*id, *cls);
      json(res, {{"id", *id}, {"class", to_string(*cls)}});
    });
    server_.Post("/api/ratings/undo", [this, json](const httplib::Request&, httplib::Response& res) {
      auto id = session_.undo();
      json(res, id ? nlohmann::json{{"id", *id}} : nlohmann::json{{"id", nullptr}});
    });
    if (!static_dir.empty() && std::filesystem::is_directory(static_dir)) {
      server_.set_mount_point("/", static_dir.string());
    } else {
      server_.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kFallbackPage, "text/html"); });
    }
  }

  /// Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot listen on " + host + ":" + std::to_string(port) + " (port busy?)");
    return bound;
  }

  // Blocks until stop() is called.
  void serve() { server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  bool running() const { return server_.is_running(); }

private:
  static std::optional<std::uint32_t> parse_id(const std::string& s) {
    try {
      auto v = std::stoull(s);
      if (v > UINT32_MAX) return std::nullopt;
      return static_cast<std::uint32_t>(v);
    } catch (const std::logic_error&) {
      return std::nullopt;
    }
  }

  RatingSession& session_;
  httplib::Server server_;
};

}  // namespace treeseg
