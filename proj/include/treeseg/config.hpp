#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeseg/backend.hpp"
#include "treeseg/error.hpp"
#include "treeseg/io.hpp"
#include "treeseg/labels.hpp"
#include "treeseg/rater_train.hpp"
#include "treeseg/watershed.hpp"

namespace treeseg {

struct GroundConfig {
  double cell = 2.0;
  double trim = 0.5;
};

struct BackendConfig {
  std::string command;  // empty = built-in reference backend
  double timeout_s = 3600;
  InstanceParams instances;
  double learning_rate = 1e-2;
  std::size_t batch_size = 256;
};

struct LoopConfig {
  std::size_t epochs_per_iteration = 3;
  std::size_t max_iterations = 9;
  std::size_t min_new_instances = 5;  // stabilized when new < max(min_new_instances,
  double min_new_fraction = 0.01;     //   min_new_fraction * total) ...
  std::size_t patience = 2;           //   for this many consecutive iterations
};

struct ServerConfig {
  int port = 8080;
  std::uint64_t sample_seed = 1;
};

/// Every tunable of the pipeline. Loaded from JSON where unknown keys are
/// errors; each run directory keeps its resolved snapshot.
struct Config {
  double tile_size = 100.0;
  std::uint64_t seed = 1;
  GroundConfig ground;
  WatershedParams watershed;
  RaterTrainConfig rater;
  BackendConfig backend;
  AcceptanceRules acceptance;
  LoopConfig loop;
  ServerConfig server;
};

inline std::string to_string(OverlapMeasure m) { return m == OverlapMeasure::diameter ? "diameter" : "depth"; }

inline nlohmann::json to_json(const Config& c) {
  const auto& r = c.rater;
  const auto& ip = c.backend.instances;
  return {
      {"tile_size", c.tile_size},
      {"seed", c.seed},
      {"ground", {{"cell", c.ground.cell}, {"trim", c.ground.trim}}},
      {"watershed",
       {{"smooth_sigma", c.watershed.smooth_sigma},
        {"min_height", c.watershed.min_height},
        {"seed_radius", c.watershed.seed_radius},
        {"background", c.watershed.background},
        {"chm_pitch", c.watershed.chm_pitch}}},
      {"rater",
       {{"resolution", r.topology.resolution},
        {"extent", r.topology.extent},
        {"channels", r.topology.channels},
        {"head_channels", r.topology.head_channels},
        {"mlp_hidden", r.topology.mlp_hidden},
        {"learning_rate", r.adam.learning_rate},
        {"weight_decay", r.adam.weight_decay},
        {"batch_size", r.batch_size},
        {"epochs", r.epochs},
        {"validation_fraction", r.validation_fraction},
        {"augment", r.augment}}},
      {"backend",
       {{"command", c.backend.command},
        {"timeout_s", c.backend.timeout_s},
        {"threshold", ip.threshold},
        {"seed_radius", ip.seed_radius},
        {"min_seed_radius", ip.min_seed_radius},
        {"seed_radius_per_m", ip.seed_radius_per_m},
        {"min_points", ip.min_points},
        {"learning_rate", c.backend.learning_rate},
        {"batch_size", c.backend.batch_size}}},
      {"acceptance",
       {{"apex_tolerance", c.acceptance.apex_tolerance},
        {"max_overlap", c.acceptance.max_overlap},
        {"max_ioc", c.acceptance.max_ioc},
        {"overlap_measure", to_string(c.acceptance.measure)}}},
      {"loop",
       {{"epochs_per_iteration", c.loop.epochs_per_iteration},
        {"max_iterations", c.loop.max_iterations},
        {"min_new_instances", c.loop.min_new_instances},
        {"min_new_fraction", c.loop.min_new_fraction},
        {"patience", c.loop.patience}}},
      {"server", {{"port", c.server.port}, {"sample_seed", c.server.sample_seed}}},
  };
}

namespace detail {

/// Recursively rejects keys of `j` that do not exist in `schema`.
inline void check_keys(const nlohmann::json& j, const nlohmann::json& schema, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument("config" + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    std::string path = where + "." + key;
    if (!schema.contains(key)) throw InvalidArgument("unknown config key " + path.substr(1));
    if (schema.at(key).is_object()) check_keys(value, schema.at(key), path);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidArgument("config key " + where + key + " has the wrong type");
  }
}

}  // namespace detail

/// Defaults overlaid with `j`. Unknown keys and wrongly typed values throw.
inline Config config_from_json(const nlohmann::json& j) {
  Config c;
  detail::check_keys(j, to_json(c), "");
  using detail::read;
  read(j, "tile_size", c.tile_size, "");
  read(j, "seed", c.seed, "");
  if (j.contains("ground")) {
    const auto& g = j["ground"];
    read(g, "cell", c.ground.cell, "ground.");
    read(g, "trim", c.ground.trim, "ground.");
  }
  if (j.contains("watershed")) {
    const auto& w = j["watershed"];
    read(w, "smooth_sigma", c.watershed.smooth_sigma, "watershed.");
    read(w, "min_height", c.watershed.min_height, "watershed.");
    read(w, "seed_radius", c.watershed.seed_radius, "watershed.");
    read(w, "background", c.watershed.background, "watershed.");
    read(w, "chm_pitch", c.watershed.chm_pitch, "watershed.");
  }
  if (j.contains("rater")) {
    const auto& r = j["rater"];
    auto& t = c.rater.topology;
    read(r, "resolution", t.resolution, "rater.");
    read(r, "extent", t.extent, "rater.");
    read(r, "channels", t.channels, "rater.");
    read(r, "head_channels", t.head_channels, "rater.");
    read(r, "mlp_hidden", t.mlp_hidden, "rater.");
    read(r, "learning_rate", c.rater.adam.learning_rate, "rater.");
    read(r, "weight_decay", c.rater.adam.weight_decay, "rater.");
    read(r, "batch_size", c.rater.batch_size, "rater.");
    read(r, "epochs", c.rater.epochs, "rater.");
    read(r, "validation_fraction", c.rater.validation_fraction, "rater.");
    read(r, "augment", c.rater.augment, "rater.");
  }
  if (j.contains("backend")) {
    const auto& b = j["backend"];
    read(b, "command", c.backend.command, "backend.");
    read(b, "timeout_s", c.backend.timeout_s, "backend.");
    read(b, "threshold", c.backend.instances.threshold, "backend.");
    read(b, "seed_radius", c.backend.instances.seed_radius, "backend.");
    read(b, "min_seed_radius", c.backend.instances.min_seed_radius, "backend.");
    read(b, "seed_radius_per_m", c.backend.instances.seed_radius_per_m, "backend.");
    read(b, "min_points", c.backend.instances.min_points, "backend.");
    read(b, "learning_rate", c.backend.learning_rate, "backend.");
    read(b, "batch_size", c.backend.batch_size, "backend.");
  }
  if (j.contains("acceptance")) {
    const auto& a = j["acceptance"];
    read(a, "apex_tolerance", c.acceptance.apex_tolerance, "acceptance.");
    read(a, "max_overlap", c.acceptance.max_overlap, "acceptance.");
    read(a, "max_ioc", c.acceptance.max_ioc, "acceptance.");
    std::string m = to_string(c.acceptance.measure);
    read(a, "overlap_measure", m, "acceptance.");
    if (m == "diameter") c.acceptance.measure = OverlapMeasure::diameter;
    else if (m == "depth") c.acceptance.measure = OverlapMeasure::depth;
    else throw InvalidArgument("acceptance.overlap_measure must be \"diameter\" or \"depth\"");
  }
  if (j.contains("loop")) {
    const auto& l = j["loop"];
    read(l, "epochs_per_iteration", c.loop.epochs_per_iteration, "loop.");
    read(l, "max_iterations", c.loop.max_iterations, "loop.");
    read(l, "min_new_instances", c.loop.min_new_instances, "loop.");
    read(l, "min_new_fraction", c.loop.min_new_fraction, "loop.");
    read(l, "patience", c.loop.patience, "loop.");
  }
  if (j.contains("server")) {
    const auto& s = j["server"];
    read(s, "port", c.server.port, "server.");
    read(s, "sample_seed", c.server.sample_seed, "server.");
  }
  c.rater.seed = c.seed;
  c.rater.topology.validate();
  if (!(c.tile_size > 0)) throw InvalidArgument("tile_size must be positive");
  if (c.loop.epochs_per_iteration == 0) throw InvalidArgument("loop.epochs_per_iteration must be at least 1");
  const auto& ip = c.backend.instances;
  if (!(ip.min_seed_radius > 0) || !(ip.seed_radius >= ip.min_seed_radius) || !(ip.seed_radius_per_m >= 0))
    throw InvalidArgument("backend seed windows need 0 < min_seed_radius <= seed_radius and seed_radius_per_m >= 0");
  if (c.loop.patience == 0) throw InvalidArgument("loop.patience must be at least 1");
  return c;
}

/// Applies a `dotted.key=value` override; the value is parsed as JSON when
/// possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidArgument("override must look like key.path=value: " + assignment);
  std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  std::string pointer = "/" + key;
  for (auto& ch : pointer)
    if (ch == '.') ch = '/';
  j[nlohmann::json::json_pointer(pointer)] = value;
}

inline Config load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = nlohmann::json::object();
  if (!file.empty()) {
    try {
      j = nlohmann::json::parse(io::read_text(file));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(file.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

}  // namespace treeseg
