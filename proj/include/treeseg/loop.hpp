#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "treeseg/backend.hpp"
#include "treeseg/cluster.hpp"
#include "treeseg/config.hpp"
#include "treeseg/error.hpp"
#include "treeseg/ground.hpp"
#include "treeseg/io.hpp"
#include "treeseg/labels.hpp"
#include "treeseg/rater_io.hpp"
#include "treeseg/rater_train.hpp"
#include "treeseg/ratings.hpp"
#include "treeseg/tiles.hpp"
#include "treeseg/watershed.hpp"

namespace treeseg {

// --- Metrics -------------------------------------------------------------------

struct MetricsRow {
  std::size_t iteration = 0;
  std::size_t instances = 0;  // confirmed instances summed over tiles
  std::size_t tiles = 1;
  std::array<std::size_t, kNumClasses> counts{};  // ratings of this iteration's clusters
  std::size_t new_instances = 0;

  double avg_trees_per_tile() const { return static_cast<double>(instances) / static_cast<double>(tiles); }

  std::size_t rated() const { return counts[0] + counts[1] + counts[2]; }

  // 0 when nothing was rated.
  double proportion(RatingClass c) const {
    auto n = rated();
    return n == 0 ? 0.0 : static_cast<double>(counts[static_cast<std::size_t>(c)]) / static_cast<double>(n);
  }

  bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsHeader =
    "iteration,avg_trees_per_tile,n_single,n_multi,n_nontree,pct_single,pct_multi,pct_nontree,new_instances";

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.10f,%zu,%zu,%zu,%.10f,%.10f,%.10f,%zu\n", r.iteration,
                  r.avg_trees_per_tile(), r.counts[0], r.counts[1], r.counts[2], r.proportion(RatingClass::Single),
                  r.proportion(RatingClass::Multi), r.proportion(RatingClass::NonTree), r.new_instances);
    out += buf;
  }
  return out;
}

/// Inverse of metrics_csv for a run with `tiles` tiles.
inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text, std::size_t tiles,
                                                 const std::string& context = "metrics.csv") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError(context + ": unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 9) throw FormatError(context + ": expected 9 columns in '" + line + "'");
    try {
      MetricsRow r;
      r.iteration = std::stoul(f[0]);
      r.tiles = tiles;
      r.instances = static_cast<std::size_t>(std::llround(std::stod(f[1]) * static_cast<double>(tiles)));
      for (std::size_t c = 0; c < kNumClasses; ++c) r.counts[c] = std::stoul(f[2 + c]);
      r.new_instances = std::stoul(f[8]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError(context + ": bad number in '" + line + "'");
    }
  }
  return rows;
}

struct StopDecision {
  bool stop = false;
  std::string reason;  // "stabilized" or "max_iterations"
};

/// The loop has stabilized once the newly accepted instances stayed below
/// max(min_new_instances, min_new_fraction * total) for `patience`
/// consecutive iterations (iteration 0, the initialization, never counts).
inline StopDecision stop_check(std::span<const MetricsRow> rows, const LoopConfig& cfg) {
  if (rows.empty()) throw InvalidArgument("stop_check needs at least one completed iteration");
  std::size_t quiet = 0;
  for (auto it = rows.rbegin(); it != rows.rend() && it->iteration >= 1; ++it) {
    double limit = std::max(static_cast<double>(cfg.min_new_instances),
                            cfg.min_new_fraction * static_cast<double>(it->instances));
    if (static_cast<double>(it->new_instances) >= limit) break;
    ++quiet;
  }
  if (quiet >= cfg.patience) return {true, "stabilized"};
  if (rows.back().iteration >= cfg.max_iterations) return {true, "max_iterations"};
  return {};
}

// --- Rating clusters -----------------------------------------------------------

class ClusterRater {
public:
  virtual ~ClusterRater() = default;
  /// One prediction per cluster, in cluster-id order.
  virtual std::vector<Prediction> rate(const PointCloud& tile, const ClusterSet& clusters) = 0;
};

class NetRater : public ClusterRater {
public:
  explicit NetRater(RaterNet<float> net, std::size_t batch_size = 16) : net_(std::move(net)), batch_(batch_size) {}

  std::vector<Prediction> rate(const PointCloud& tile, const ClusterSet& clusters) override {
    std::vector<PointCloud> clouds;
    clouds.reserve(clusters.size());
    for (const auto& [id, c] : clusters.clusters()) clouds.push_back(normalized_cluster(tile, c.points));
    return rate_clusters(net_, std::span<const PointCloud>(clouds), batch_);
  }

private:
  RaterNet<float> net_;
  std::size_t batch_;
};

/// Trains the rating model on rated clusters (cluster id -> class) drawn
/// from `clusters`, one ClusterSet per tile. Ratings of unknown ids are ignored.
inline RaterTrainResult train_rater_from_ratings(const TileStore& tiles, const std::vector<ClusterSet>& clusters,
                                                 const std::map<std::uint32_t, RatingClass>& ratings,
                                                 const RaterTrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  std::vector<RatedCluster> data;
  std::vector<RatingClass> labels;
  for (std::size_t t = 0; t < tiles.tiles.size(); ++t)
    for (const auto& [id, c] : clusters[t].clusters()) {
      auto it = ratings.find(id);
      if (it == ratings.end()) continue;
      data.push_back({normalized_cluster(tiles.tiles[t].points, c.points), it->second});
      labels.push_back(it->second);
    }
  if (data.empty()) throw MissingPrerequisite("no rated clusters; run serve and rate clusters first");
  for (auto cls : kAllClasses)
    if (std::find(labels.begin(), labels.end(), cls) == labels.end())
      throw InvalidArgument("no cluster rated " + to_string(cls) + "; the rating model needs examples of every class");
  auto split = stratified_split(labels, cfg.validation_fraction, cfg.seed);
  std::vector<RatedCluster> train, val;
  for (auto i : split.train) train.push_back(data[i]);
  for (auto i : split.validation) val.push_back(data[i]);
  return train_rater(train, val, cfg, on_epoch);
}

inline nlohmann::json training_summary(const RaterTrainResult& r, const RaterTrainConfig& cfg) {
  nlohmann::json j = {{"config", cfg.to_json()},
                      {"best_epoch", r.best_epoch},
                      {"train_counts", r.train_counts},
                      {"class_weights", r.weights}};
  if (r.val_confusion.total() > 0) {
    auto m = accuracy_metrics(r.val_confusion);
    j["val_accuracy"] = m.accuracy;
    j["val_weighted_accuracy"] = m.weighted_accuracy;
    j["val_confusion"] = to_json(r.val_confusion);
  }
  return j;
}

// --- Run directory ----------------------------------------------------------------

struct RunLayout {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path tiles() const { return root / "tiles"; }
  fs::path clusters() const { return root / "clusters"; }
  fs::path ratings() const { return root / "ratings.jsonl"; }
  fs::path metrics() const { return root / "metrics.csv"; }
  fs::path iteration(std::size_t k) const { return root / ("iter_" + std::to_string(k)); }
};

inline constexpr const char* kRaterFile = "rater.bin";

/// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
public:
  explicit RunLock(const fs::path& root) {
    fs::create_directories(root);
    auto path = root / ".lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw Error("run directory " + root.string() + " is in use by another process");
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() { ::close(fd_); }

private:
  int fd_ = -1;
};

inline TileStore load_run_tiles(const RunLayout& run) {
  if (!fs::exists(run.tiles() / "manifest.json"))
    throw MissingPrerequisite("no tiles in " + run.root.string() + "; run `tile` first");
  return read_tile_store(run.tiles());
}

/// One cluster file `<tile>.json` per tile.
inline std::vector<ClusterSet> read_cluster_sets(const fs::path& dir, const TileStore& store) {
  std::vector<ClusterSet> sets;
  for (const auto& t : store.tiles) {
    auto path = dir / (t.name() + ".json");
    if (!fs::exists(path)) throw MissingPrerequisite("missing " + path.string());
    auto set = read_cluster_file(path);
    if (set.point_count() != t.points.size())
      throw FormatError(path.string() + ": point count does not match tile " + t.name());
    sets.push_back(std::move(set));
  }
  return sets;
}

inline void write_cluster_sets(const fs::path& dir, const TileStore& store, const std::vector<ClusterSet>& sets) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < store.tiles.size(); ++t)
    write_cluster_file(dir / (store.tiles[t].name() + ".json"), sets[t], store.tiles[t].name());
}

inline std::vector<LabelMap> read_label_maps(const fs::path& dir, const TileStore& store) {
  std::vector<LabelMap> maps;
  for (const auto& t : store.tiles) {
    auto path = dir / (t.name() + ".lbl");
    auto labels = read_label_file(path);
    if (labels.size() != t.points.size())
      throw FormatError(path.string() + ": point count does not match tile " + t.name());
    maps.push_back(std::move(labels));
  }
  return maps;
}

inline void write_label_maps(const fs::path& dir, const TileStore& store, const std::vector<LabelMap>& maps) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < store.tiles.size(); ++t) write_label_file(dir / (store.tiles[t].name() + ".lbl"), maps[t]);
}

/// Tiles `cloud` and replaces each tile's hag with height above its
/// estimated ground.
inline TileStore prepare_tiles(const PointCloud& cloud, const Config& cfg) {
  auto store = build_tiles(cloud, cfg.tile_size);
  for (auto& t : store.tiles) normalize_heights(t, estimate_ground(t, cfg.ground.cell, cfg.ground.trim));
  return store;
}

/// Watershed clusters of every tile, numbered uniquely across tiles.
inline std::vector<ClusterSet> initial_segmentation(const TileStore& store, const WatershedParams& params) {
  std::vector<ClusterSet> sets;
  std::uint32_t id_base = 0;
  for (const auto& t : store.tiles) {
    sets.push_back(segment_tile(t, params, id_base));
    id_base = std::max(id_base, sets.back().max_id());
  }
  return sets;
}

inline std::size_t total_instances(const std::vector<LabelMap>& maps) {
  std::size_t n = 0;
  for (const auto& m : maps) n += m.instance_count();
  return n;
}

// --- Loop ---------------------------------------------------------------------------

using LogFn = std::function<void(const std::string&)>;

struct LoopState {
  RunLayout run;
  Config config;
  TileStore tiles;
  std::vector<MetricsRow> rows;  // one per completed iteration

  std::size_t iteration() const { return rows.back().iteration; }
};

struct LoopOptions {
  LogFn log;
  ClusterRater* rater = nullptr;          // replaces the trained rating model when set
  std::optional<std::size_t> halt_after;  // return once this iteration is complete
};

namespace detail {

inline std::uint64_t iteration_seed(const Config& cfg, std::size_t k) { return cfg.seed + k; }

inline void say(const LoopOptions& opt, const std::string& msg) {
  if (opt.log) opt.log(msg);
}

/// Stages an iteration in `iter_<k>.tmp` and renames it into place once it
/// is complete, so a crash never leaves a half-written iteration visible.
class StagedIteration {
public:
  StagedIteration(const RunLayout& run, std::size_t k) : final_(run.iteration(k)), tmp_(final_) {
    tmp_ += ".tmp";
    fs::remove_all(tmp_);
    fs::create_directories(tmp_ / "params");
  }
  const fs::path& dir() const { return tmp_; }
  void commit() {
    fs::remove_all(final_);
    fs::rename(tmp_, final_);
  }

private:
  fs::path final_, tmp_;
};

inline void finish_iteration(LoopState& state, StagedIteration& stage, const MetricsRow& row) {
  state.rows.push_back(row);
  auto csv = metrics_csv(state.rows);
  io::write_atomic(stage.dir() / "metrics.csv", csv);
  io::write_atomic(stage.dir() / "config.json", to_json(state.config).dump(2));
  stage.commit();
  io::write_atomic(state.run.metrics(), csv);
}

inline std::string describe(const MetricsRow& r) {
  return "iteration " + std::to_string(r.iteration) + ": " + std::to_string(r.rated()) + " clusters rated S/M/N " +
         std::to_string(r.counts[0]) + "/" + std::to_string(r.counts[1]) + "/" + std::to_string(r.counts[2]) + ", " +
         std::to_string(r.new_instances) + " new, " + std::to_string(r.instances) + " instances";
}

}  // namespace detail

/// Iteration 0: trains the rating model on the human ratings of the initial
/// clusters, model-rates the clusters nobody rated, builds the first
/// pseudo-labels and trains the backend on them.
inline void initialize_loop(LoopState& state, SegmentationBackend& backend, const LoopOptions& opt = {}) {
  const auto& cfg = state.config;
  const auto& run = state.run;
  auto initial = read_cluster_sets(run.clusters(), state.tiles);
  std::vector<std::string> warnings;
  auto log = RatingLog::load(run.ratings(), &warnings);
  for (const auto& w : warnings) detail::say(opt, "warning: " + w);
  std::map<std::uint32_t, RatingClass> human;
  for (const auto& [id, r] : log.active(RatingSource::human)) human[id] = r.cls;
  if (human.empty())
    throw MissingPrerequisite("no human ratings in " + run.ratings().string() + "; run serve and rate clusters first");

  detail::StagedIteration stage(run, 0);
  std::unique_ptr<ClusterRater> owned;
  ClusterRater* rater = opt.rater;
  if (!rater) {
    detail::say(opt, "training rating model on " + std::to_string(human.size()) + " human ratings");
    auto result = train_rater_from_ratings(state.tiles, initial, human, cfg.rater, [&](const EpochMetrics& m) {
      detail::say(opt, "  rater epoch " + std::to_string(m.epoch) + " loss " + std::to_string(m.train_loss) +
                           " val acc " + std::to_string(m.val_accuracy) + " wacc " +
                           std::to_string(m.val_weighted_accuracy));
    });
    auto path = stage.dir() / "params" / kRaterFile;
    write_rater_file(path, result.net, training_summary(result, cfg.rater));
    owned = std::make_unique<NetRater>(read_rater_file(path).net);
    rater = owned.get();
  }

  MetricsRow row;
  row.iteration = 0;
  row.tiles = state.tiles.tiles.size();
  std::vector<LabelMap> labels;
  std::vector<RatingRecord> records;
  for (std::size_t t = 0; t < state.tiles.tiles.size(); ++t) {
    const auto& tile = state.tiles.tiles[t];
    auto preds = rater->rate(tile.points, initial[t]);
    std::map<std::uint32_t, RatingClass> merged;
    std::size_t i = 0;
    for (const auto& [id, c] : initial[t].clusters()) {
      const auto& p = preds[i++];
      auto h = human.find(id);
      RatingClass cls = h != human.end() ? h->second : p.cls;
      if (h == human.end()) records.push_back({id, tile.name(), p.cls, RatingSource::model, p.confidence, utc_timestamp()});
      merged[id] = cls;
      ++row.counts[static_cast<std::size_t>(cls)];
    }
    labels.push_back(build_initial_labels(tile.points.size(), initial[t], merged));
  }
  row.instances = total_instances(labels);
  row.new_instances = row.instances;

  write_cluster_sets(stage.dir() / "clusters", state.tiles, initial);
  write_label_maps(stage.dir() / "labels", state.tiles, labels);
  io::write_atomic(stage.dir() / "ratings.jsonl", ratings_to_jsonl(records));
  backend.set_workspace(stage.dir() / "backend");
  backend.train(state.tiles, labels, cfg.loop.epochs_per_iteration, detail::iteration_seed(cfg, 0), {},
                stage.dir() / "params");
  detail::finish_iteration(state, stage, row);
  detail::say(opt, detail::describe(row));
}

/// One pass of predict -> rate -> accept/merge -> retrain, producing
/// iteration state.iteration() + 1.
inline void run_iteration(LoopState& state, SegmentationBackend& backend, const LoopOptions& opt = {}) {
  const auto& cfg = state.config;
  const std::size_t k = state.iteration() + 1;
  const auto prev = state.run.iteration(k - 1);
  detail::StagedIteration stage(state.run, k);

  std::unique_ptr<ClusterRater> owned;
  ClusterRater* rater = opt.rater;
  if (!rater) {
    fs::copy_file(prev / "params" / kRaterFile, stage.dir() / "params" / kRaterFile);
    owned = std::make_unique<NetRater>(read_rater_file(stage.dir() / "params" / kRaterFile).net);
    rater = owned.get();
  }
  auto labels = read_label_maps(prev / "labels", state.tiles);
  const std::size_t before = total_instances(labels);

  backend.set_workspace(stage.dir() / "backend");
  auto predicted = backend.predict(state.tiles, prev / "params", static_cast<std::uint32_t>(1'000'000 * k));
  if (predicted.size() != state.tiles.tiles.size()) throw Error("backend returned the wrong number of tiles");

  MetricsRow row;
  row.iteration = k;
  row.tiles = state.tiles.tiles.size();
  std::vector<RatingRecord> records;
  std::size_t accepted = 0;
  for (std::size_t t = 0; t < state.tiles.tiles.size(); ++t) {
    const auto& tile = state.tiles.tiles[t];
    auto preds = rater->rate(tile.points, predicted[t]);
    auto instances = collect_instances(labels[t]);
    std::size_t i = 0;
    for (const auto& [id, c] : predicted[t].clusters()) {
      const auto& p = preds[i++];
      ++row.counts[static_cast<std::size_t>(p.cls)];
      records.push_back({id, tile.name(), p.cls, RatingSource::model, p.confidence, utc_timestamp()});
      if (p.cls != RatingClass::Single) continue;
      if (!accept_candidate(c, tile.points, labels[t], instances, cfg.acceptance).accepted) continue;
      merge_candidate(c, tile.points, labels[t], instances);
      ++accepted;
    }
  }
  row.instances = total_instances(labels);
  row.new_instances = accepted;
  if (row.instances != before + accepted) throw Error("pseudo-label merge lost an instance");

  write_cluster_sets(stage.dir() / "clusters", state.tiles, predicted);
  write_label_maps(stage.dir() / "labels", state.tiles, labels);
  io::write_atomic(stage.dir() / "ratings.jsonl", ratings_to_jsonl(records));
  backend.train(state.tiles, labels, cfg.loop.epochs_per_iteration, detail::iteration_seed(cfg, k), prev / "params",
                stage.dir() / "params");
  detail::finish_iteration(state, stage, row);
  detail::say(opt, detail::describe(row));
}

/// Highest k whose iter_<k> directory is complete, if any.
inline std::optional<std::size_t> last_completed_iteration(const RunLayout& run) {
  std::optional<std::size_t> last;
  if (!fs::is_directory(run.root)) return last;
  for (const auto& entry : fs::directory_iterator(run.root)) {
    auto name = entry.path().filename().string();
    if (name.rfind("iter_", 0) != 0 || name.find_first_not_of("0123456789", 5) != std::string::npos || name.size() == 5)
      continue;
    auto k = std::stoul(name.substr(5));
    if (fs::exists(entry.path() / "metrics.csv") && (!last || k > *last)) last = k;
  }
  return last;
}

inline void discard_partial_iterations(const RunLayout& run) {
  std::vector<fs::path> stale;
  for (const auto& entry : fs::directory_iterator(run.root)) {
    auto name = entry.path().filename().string();
    if (name.rfind("iter_", 0) == 0 && entry.path().extension() == ".tmp") stale.push_back(entry.path());
  }
  for (const auto& p : stale) fs::remove_all(p);
}

struct LoopResult {
  std::vector<MetricsRow> rows;
  std::string stop_reason;  // "stabilized", "max_iterations" or "halted"
  std::optional<std::size_t> resumed_after;
};

/// Runs (or resumes) the loop in `run_dir` until stop_check says stop.
/// Partial iterations from an interrupted run are discarded; completed ones
/// are kept and the loop continues from the last of them.
inline LoopResult run_loop(const fs::path& run_dir, const Config& cfg, SegmentationBackend& backend,
                           const LoopOptions& opt = {}) {
  RunLayout run{run_dir};
  RunLock lock(run.root);
  LoopState state{run, cfg, load_run_tiles(run), {}};
  LoopResult result;

  discard_partial_iterations(run);
  auto last = last_completed_iteration(run);

  const std::string snapshot = to_json(cfg).dump(2);
  if (last) {
    auto stored = io::read_text(run.iteration(0) / "config.json");
    if (stored != snapshot)
      throw InvalidArgument("configuration differs from the one this run was started with; use a new run directory");
    auto path = run.iteration(*last) / "metrics.csv";
    state.rows = parse_metrics_csv(io::read_text(path), state.tiles.tiles.size(), path.string());
    if (state.rows.empty() || state.iteration() != *last) throw FormatError(path.string() + ": inconsistent rows");
    result.resumed_after = last;
    detail::say(opt, "resuming after iteration " + std::to_string(*last));
  } else {
    io::write_atomic(run.config(), snapshot);
    initialize_loop(state, backend, opt);
  }

  for (;;) {
    auto decision = stop_check(state.rows, cfg.loop);
    if (decision.stop) {
      result.stop_reason = decision.reason;
      break;
    }
    if (opt.halt_after && state.iteration() >= *opt.halt_after) {
      result.stop_reason = "halted";
      break;
    }
    run_iteration(state, backend, opt);
  }
  result.rows = state.rows;
  detail::say(opt, "stopped after iteration " + std::to_string(state.iteration()) + " (" + result.stop_reason + ")");
  return result;
}

}  // namespace treeseg
