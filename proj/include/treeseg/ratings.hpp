#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include "treeseg/error.hpp"

namespace treeseg {

enum class RatingClass : std::uint8_t { Single = 0, Multi = 1, NonTree = 2 };
inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<RatingClass, kNumClasses> kAllClasses{RatingClass::Single, RatingClass::Multi,
                                                                  RatingClass::NonTree};

inline std::string to_string(RatingClass c) {
  switch (c) {
    case RatingClass::Single: return "single";
    case RatingClass::Multi: return "multi";
    case RatingClass::NonTree: return "non_tree";
  }
  return "unknown";
}

inline std::optional<RatingClass> parse_rating_class(const std::string& s) {
  if (s == "single") return RatingClass::Single;
  if (s == "multi") return RatingClass::Multi;
  if (s == "non_tree") return RatingClass::NonTree;
  return std::nullopt;
}

enum class RatingSource : std::uint8_t { human, model };

inline std::string to_string(RatingSource s) { return s == RatingSource::human ? "human" : "model"; }

struct RatingRecord {
  std::uint32_t cluster_id = 0;
  std::string tile;
  RatingClass cls = RatingClass::Single;
  RatingSource source = RatingSource::human;
  double confidence = 1.0;
  std::string timestamp;
};

inline std::string utc_timestamp() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json to_json(const RatingRecord& r) {
  return {{"cluster_id", r.cluster_id}, {"tile", r.tile},          {"class", to_string(r.cls)},
          {"source", to_string(r.source)}, {"confidence", r.confidence}, {"timestamp", r.timestamp}};
}

inline RatingRecord rating_from_json(const nlohmann::json& j) {
  RatingRecord r;
  r.cluster_id = j.at("cluster_id").get<std::uint32_t>();
  r.tile = j.value("tile", std::string{});
  auto cls = parse_rating_class(j.at("class").get<std::string>());
  if (!cls) throw FormatError("unknown rating class");
  r.cls = *cls;
  auto src = j.value("source", std::string("human"));
  if (src != "human" && src != "model") throw FormatError("unknown rating source");
  r.source = src == "human" ? RatingSource::human : RatingSource::model;
  r.confidence = j.value("confidence", 1.0);
  if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) throw FormatError("confidence out of [0,1]");
  r.timestamp = j.value("timestamp", std::string{});
  return r;
}

/// Append-only `ratings.jsonl`. Rating lines set the active record of a
/// (cluster, source) pair; `{"op":"undo", ...}` tombstones retract the most
/// recent active rating of that cluster. History is never rewritten. Lines
/// that fail to parse are moved aside to `<file>.quarantine` on load.
class RatingLog {
public:
  RatingLog() = default;

  static RatingLog load(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr) {
    RatingLog log;
    log.path_ = path;
    if (!std::filesystem::exists(path)) return log;
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> bad;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        log.apply(nlohmann::json::parse(line));
      } catch (const std::exception& e) {
        bad.push_back(line);
        if (warnings) warnings->push_back(path.string() + ":" + std::to_string(line_no) + ": quarantined (" + e.what() + ")");
      }
    }
    if (!bad.empty()) {
      std::ofstream q(path.string() + ".quarantine", std::ios::app);
      for (const auto& b : bad) q << b << '\n';
    }
    return log;
  }

  const std::filesystem::path& path() const { return path_; }

  void append(const RatingRecord& r) {
    nlohmann::json j = to_json(r);
    write_line(j.dump());
    apply(j);
  }

  /// Retracts the most recent active human rating. Returns its cluster id.
  std::optional<std::uint32_t> undo_last(RatingSource source = RatingSource::human) {
    auto& stack = order_[static_cast<int>(source)];
    if (stack.empty()) return std::nullopt;
    std::uint32_t id = stack.back();
    nlohmann::json j = {{"op", "undo"}, {"cluster_id", id}, {"source", to_string(source)}, {"timestamp", utc_timestamp()}};
    write_line(j.dump());
    apply(j);
    return id;
  }

  const std::map<std::uint32_t, RatingRecord>& active(RatingSource source = RatingSource::human) const {
    return active_[static_cast<int>(source)];
  }

  std::optional<RatingRecord> find(std::uint32_t cluster, RatingSource source = RatingSource::human) const {
    const auto& m = active(source);
    auto it = m.find(cluster);
    if (it == m.end()) return std::nullopt;
    return it->second;
  }

  std::vector<std::uint32_t> rating_order(RatingSource source = RatingSource::human) const {
    return order_[static_cast<int>(source)];
  }

private:
  void apply(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("not a JSON object");
    if (j.contains("op")) {
      if (j.at("op").get<std::string>() != "undo") throw FormatError("unknown op");
      auto id = j.at("cluster_id").get<std::uint32_t>();
      int s = j.value("source", std::string("human")) == "model" ? 1 : 0;
      active_[s].erase(id);
      auto& stack = order_[s];
      stack.erase(std::remove(stack.begin(), stack.end(), id), stack.end());
      return;
    }
    RatingRecord r = rating_from_json(j);
    int s = static_cast<int>(r.source);
    auto& stack = order_[s];
    stack.erase(std::remove(stack.begin(), stack.end(), r.cluster_id), stack.end());
    stack.push_back(r.cluster_id);
    active_[s][r.cluster_id] = std::move(r);
  }

  void write_line(const std::string& text) {
    if (path_.empty()) return;  // in-memory log
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw IoError("cannot open " + path_.string() + " for append");
    std::string line = text + "\n";
    // One write() per record keeps each line whole under O_APPEND.
    ssize_t n = ::write(fd, line.data(), line.size());
    ::fsync(fd);
    ::close(fd);
    if (n != static_cast<ssize_t>(line.size())) throw IoError("short write to " + path_.string());
  }

  std::filesystem::path path_;
  std::array<std::map<std::uint32_t, RatingRecord>, 2> active_;
  std::array<std::vector<std::uint32_t>, 2> order_;
};

/// Writes records as JSON lines in one atomic replace (used for model ratings).
inline std::string ratings_to_jsonl(const std::vector<RatingRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

}  // namespace treeseg
