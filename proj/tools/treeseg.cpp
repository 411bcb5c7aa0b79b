#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "treeseg/treeseg.hpp"

namespace fs = std::filesystem;
using namespace treeseg;

namespace {

void say(const std::string& msg) { std::cerr << msg << std::endl; }

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", file, "JSON configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override a configuration value, e.g. --set loop.max_iterations=5");
  }

  // An explicit --config wins, then the run's snapshot, then the defaults.
  Config resolve(const RunLayout& run) const {
    fs::path source = file;
    if (source.empty() && fs::exists(run.config())) source = run.config();
    return load_config(source, sets);
  }
};

void snapshot(const RunLayout& run, const Config& cfg) { io::write_atomic(run.config(), to_json(cfg).dump(2)); }

PointCloud read_cloud(const fs::path& path, const std::string& format) {
  if (path.extension() == ".bin") return read_tile_file(path);
  TextFormat f = format == "csv" || (format.empty() && path.extension() == ".csv") ? TextFormat::csv : TextFormat::xyz;
  auto r = ingest_xyz(path, f);
  if (r.rejected_rows > 0)
    say("warning: " + std::to_string(r.rejected_rows) + " malformed rows skipped (first at line " +
        std::to_string(r.first_rejected_line) + ")");
  return std::move(r.cloud);
}

struct Truth {
  PointCloud cloud;
  std::vector<std::int32_t> object;
};

Truth read_truth(const fs::path& scene_dir) {
  if (!fs::exists(scene_dir / "objects.bin"))
    throw MissingPrerequisite("no ground truth in " + scene_dir.string() + "; expected a `synth` scene directory");
  Truth t;
  t.cloud = ingest_xyz(scene_dir / "cloud.xyz", TextFormat::xyz).cloud;
  t.object = read_scene_objects(scene_dir / "objects.bin");
  return t;
}

RatingSession open_session(const RunLayout& run, const Config& cfg) {
  auto store = load_run_tiles(run);
  auto clusters = read_cluster_sets(run.clusters(), store);
  std::vector<std::string> warnings;
  auto ratings = RatingLog::load(run.ratings(), &warnings);
  for (const auto& w : warnings) say("warning: " + w);
  return RatingSession(std::move(store), std::move(clusters), std::move(ratings), cfg.server.sample_seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised tree instance segmentation for airborne lidar"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic forest scene with ground truth");
  SceneSpec spec;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Scene directory")->required();
  synth->add_option("--trees", spec.tree_count, "Number of trees");
  synth->add_option("--seed", spec.seed, "Random seed");
  synth->add_option("--extent", spec.extent, "Side length of the square scene, m");
  synth->add_option("--spacing", spec.min_spacing, "Minimum stem spacing, m");
  synth->add_option("--rocks", spec.rocks, "Number of rock blobs");
  synth->add_option("--shrubs", spec.shrubs, "Number of shrub patches");
  synth->add_option("--slope", spec.slope, "Terrain rise per metre along x");
  synth->add_option("--density", spec.density, "Returns per square metre");
  synth->add_option("--min-apex", spec.min_apex, "Lowest tree height, m");
  synth->add_option("--max-apex", spec.max_apex, "Highest tree height, m");
  synth->add_option("--clearing", spec.clearing_width, "Width of a treeless strip along the far x edge, m");
  synth->add_option("--clearance", spec.confuser_clearance, "Keep rocks and shrubs this far outside crowns, m");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Parse an xyz/csv point file into the binary point format");
  std::string ingest_in, ingest_out, ingest_format;
  ingest->add_option("--in", ingest_in, "Point file (x y z [i] [r g b])")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_out, "Output .bin file")->required();
  ingest->add_option("--format", ingest_format, "xyz or csv (default: from the extension)")
      ->check(CLI::IsMember({"xyz", "csv"}));

  // tile
  auto* tile = app.add_subcommand("tile", "Tile a point cloud into a run directory and normalize heights");
  std::string tile_in, tile_format;
  tile->add_option("--in", tile_in, "Point file (.xyz, .csv or .bin from ingest)")->required()->check(CLI::ExistingFile);
  tile->add_option("--format", tile_format, "xyz or csv (default: from the extension)")
      ->check(CLI::IsMember({"xyz", "csv"}));

  auto* segment = app.add_subcommand("segment-init", "Initial watershed segmentation of every tile");
  auto* serve = app.add_subcommand("serve", "Serve the cluster rating API");
  int port = -1;
  std::string host = "127.0.0.1", static_dir;
  serve->add_option("--port", port, "TCP port (default from config)");
  serve->add_option("--host", host, "Address to listen on");
  serve->add_option("--static", static_dir, "Directory with the rating UI");

  auto* rate_truth = app.add_subcommand("rate-truth", "Rate clusters from synthetic ground truth (simulated operator)");
  std::string gt_dir;
  std::size_t rate_count = 0;
  rate_truth->add_option("--gt", gt_dir, "Scene directory from synth")->required();
  rate_truth->add_option("--count", rate_count, "Number of clusters to rate (0 = all unrated)");

  auto* train = app.add_subcommand("train-rater", "Train the rating model on the human ratings and report accuracy");
  auto* loop = app.add_subcommand("loop", "Run or resume the rate-retrain loop");
  std::size_t halt_after = 0;
  auto* halt_opt = loop->add_option("--halt-after", halt_after, "Stop once this iteration is complete");

  auto* eval = app.add_subcommand("eval", "Evaluate a run against ground truth");
  std::string eval_out;
  eval->add_option("--gt", gt_dir, "Scene directory from synth")->required();
  eval->add_option("--out", eval_out, "Report directory (default <run>/eval)");

  std::string run_dir;
  std::vector<ConfigArgs> config_args(7);
  std::size_t slot = 0;
  for (auto* cmd : {tile, segment, serve, rate_truth, train, loop, eval}) {
    cmd->add_option("--run", run_dir, "Run directory")->required();
    config_args[slot++].add_to(cmd);
  }
  auto config_for = [&](CLI::App* cmd) -> const ConfigArgs& {
    std::vector<CLI::App*> cmds{tile, segment, serve, rate_truth, train, loop, eval};
    for (std::size_t i = 0; i < cmds.size(); ++i)
      if (cmds[i] == cmd) return config_args[i];
    return config_args[0];
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) {
      auto scene = generate_forest(spec);
      write_scene(synth_out, scene);
      say("wrote " + std::to_string(scene.cloud.size()) + " points, " + std::to_string(scene.tree_count()) +
          " trees to " + synth_out);
      return 0;
    }
    if (ingest->parsed()) {
      auto cloud = read_cloud(ingest_in, ingest_format);
      write_tile_file(ingest_out, cloud);
      say("ingested " + std::to_string(cloud.size()) + " points");
      return 0;
    }

    RunLayout run{run_dir};
    CLI::App* cmd = nullptr;
    for (auto* c : {tile, segment, serve, rate_truth, train, loop, eval})
      if (c->parsed()) cmd = c;
    Config cfg = config_for(cmd).resolve(run);

    if (cmd == tile) {
      auto cloud = read_cloud(tile_in, tile_format);
      auto store = prepare_tiles(cloud, cfg);
      fs::create_directories(run.root);
      write_tile_store(run.tiles(), store);
      snapshot(run, cfg);
      say("wrote " + std::to_string(store.tiles.size()) + " tiles, " + std::to_string(store.total_points()) + " points");
    } else if (cmd == segment) {
      auto store = load_run_tiles(run);
      auto sets = initial_segmentation(store, cfg.watershed);
      std::size_t total = 0;
      for (const auto& s : sets) total += s.size();
      write_cluster_sets(run.clusters(), store, sets);
      snapshot(run, cfg);
      say("watershed found " + std::to_string(total) + " clusters");
    } else if (cmd == serve) {
      auto session = open_session(run, cfg);
      RatingServer server(session, static_dir);
      int bound = server.bind(host, port >= 0 ? port : cfg.server.port);
      auto p = session.progress();
      say("serving http://" + host + ":" + std::to_string(bound) + "/ (" + std::to_string(p.rated) + " of " +
          std::to_string(p.total) + " clusters rated)");
      server.serve();
    } else if (cmd == rate_truth) {
      auto truth = read_truth(gt_dir);
      auto session = open_session(run, cfg);
      auto store = load_run_tiles(run);
      auto tt = truth_tiles(truth.cloud, truth.object, store);
      auto clusters = read_cluster_sets(run.clusters(), store);
      std::size_t rated = 0;
      while (rate_count == 0 || rated < rate_count) {
        auto id = session.next();
        if (!id) break;
        for (std::size_t t = 0; t < store.tiles.size(); ++t)
          if (clusters[t].contains(*id)) session.rate(*id, rate_from_truth(clusters[t].at(*id).points, tt.object[t], tt.tree_sizes));
        ++rated;
      }
      auto p = session.progress();
      say("rated " + std::to_string(rated) + " clusters; " + std::to_string(p.rated) + " of " + std::to_string(p.total) +
          " rated in total");
    } else if (cmd == train) {
      auto store = load_run_tiles(run);
      auto clusters = read_cluster_sets(run.clusters(), store);
      std::map<std::uint32_t, RatingClass> human;
      auto ratings = RatingLog::load(run.ratings());
      for (const auto& [id, r] : ratings.active()) human[id] = r.cls;
      auto result = train_rater_from_ratings(store, clusters, human, cfg.rater, [](const EpochMetrics& m) {
        say("epoch " + std::to_string(m.epoch) + " loss " + std::to_string(m.train_loss) + " val acc " +
            std::to_string(m.val_accuracy) + " wacc " + std::to_string(m.val_weighted_accuracy));
      });
      auto summary = training_summary(result, cfg.rater);
      write_rater_file(run.root / "rater" / kRaterFile, result.net, summary);
      io::write_atomic(run.root / "rater" / "metrics.json", summary.dump(2));
      snapshot(run, cfg);
      if (summary.contains("val_accuracy"))
        say("validation accuracy " + std::to_string(summary["val_accuracy"].get<double>()) + ", weighted accuracy " +
            std::to_string(summary["val_weighted_accuracy"].get<double>()));
    } else if (cmd == loop) {
      if (!fs::exists(run.ratings())) throw MissingPrerequisite("no ratings.jsonl in " + run.root.string() + "; run serve and rate clusters first");
      auto backend = make_backend(cfg, run.tiles());
      LoopOptions opt;
      opt.log = say;
      if (*halt_opt) opt.halt_after = halt_after;
      auto result = run_loop(run.root, cfg, *backend, opt);
      say("metrics: " + run.metrics().string());
      (void)result;
    } else if (cmd == eval) {
      auto truth = read_truth(gt_dir);
      auto store = load_run_tiles(run);
      auto tt = truth_tiles(truth.cloud, truth.object, store);
      auto backend = make_backend(cfg, run.tiles());
      auto ev = evaluate_run(run.root, tt, *backend);
      fs::path out = eval_out.empty() ? run.root / "eval" : fs::path(eval_out);
      write_evaluation(out, ev);
      auto s = ev.summary();
      say("ground truth trees: " + std::to_string(ev.gt_trees));
      for (const char* stage : {"initial", "pseudo_labels", "prediction"})
        say(std::string(stage) + ": " + std::to_string(s[stage]["detected"].get<std::size_t>()) + " detected at IoU >= 0.5 (" +
            std::to_string(s[stage]["detection_rate"].get<double>()) + ")");
      say("reports in " + out.string());
    }
    return 0;
  } catch (const MissingPrerequisite& e) {
    say(std::string("error: ") + e.what());
    return 1;
  } catch (const InvalidArgument& e) {
    say(std::string("error: ") + e.what());
    return 1;
  } catch (const std::exception& e) {
    say(std::string("error: ") + e.what());
    return 2;
  }
}
