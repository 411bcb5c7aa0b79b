#pragma once

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "treeseg/backend.hpp"
#include "treeseg/cluster.hpp"
#include "treeseg/config.hpp"
#include "treeseg/error.hpp"
#include "treeseg/io.hpp"
#include "treeseg/labels.hpp"
#include "treeseg/tiles.hpp"

namespace treeseg {

class BackendError : public Error {
public:
  using Error::Error;
};

struct ProcessResult {
  int exit_code = -1;  // -1 when killed by a signal
  bool timed_out = false;
};

/// Runs `command` through /bin/sh in its own process group with stdout and
/// stderr redirected to files. On timeout the whole group is killed.
inline ProcessResult run_shell(const std::string& command, const fs::path& stdout_file, const fs::path& stderr_file,
                               double timeout_s) {
  fs::create_directories(stdout_file.parent_path());
  fs::create_directories(stderr_file.parent_path());
  pid_t pid = ::fork();
  if (pid < 0) throw BackendError("fork failed");
  if (pid == 0) {
    ::setpgid(0, 0);
    int out = ::open(stdout_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    int err = ::open(stderr_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (out < 0 || err < 0) ::_exit(126);
    ::dup2(out, 1);
    ::dup2(err, 2);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  ProcessResult r;
  int status = 0;
  for (auto wait = std::chrono::milliseconds(1);; wait = std::min(wait * 2, std::chrono::milliseconds(100))) {
    pid_t done = ::waitpid(pid, &status, WNOHANG);
    if (done == pid) break;
    if (done < 0) throw BackendError("waitpid failed");
    if (std::chrono::steady_clock::now() >= deadline) {
      ::kill(-pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      r.timed_out = true;
      return r;
    }
    std::this_thread::sleep_for(wait);
  }
  if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
  return r;
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

/// Replaces `{name}` for every key of `vars` (values shell-quoted); other
/// braces are left alone.
inline std::string substitute(const std::string& templ, const std::map<std::string, std::string>& vars) {
  std::string out;
  for (std::size_t i = 0; i < templ.size();) {
    bool hit = false;
    if (templ[i] == '{') {
      auto close = templ.find('}', i);
      if (close != std::string::npos) {
        auto it = vars.find(templ.substr(i + 1, close - i - 1));
        if (it != vars.end()) {
          out += shell_quote(it->second);
          i = close + 1;
          hit = true;
        }
      }
    }
    if (!hit) out += templ[i++];
  }
  return out;
}

inline std::string file_tail(const fs::path& path, std::size_t max_bytes = 2000) {
  if (!fs::exists(path)) return {};
  auto text = io::read_text(path);
  return text.size() <= max_bytes ? text : text.substr(text.size() - max_bytes);
}

/// Attaches an external segmentation model through a shell command
/// template. Placeholders: {kind} (train|predict), {tiles}, {labels},
/// {out}, {epochs}, {seed} and {params} (input parameters; empty for the
/// first training). Training writes its parameters into {out}; prediction
/// writes one `<tile>.json` ClusterSet per tile into {out}.
class ExternalBackend : public SegmentationBackend {
public:
  ExternalBackend(std::string command, fs::path tiles_dir, double timeout_s = 3600)
      : command_(std::move(command)), tiles_dir_(std::move(tiles_dir)), timeout_s_(timeout_s) {
    if (command_.empty()) throw InvalidArgument("empty backend command");
  }

  std::string name() const override { return "external"; }

  void set_workspace(const fs::path& dir) override { work_ = dir; }

  void train(const TileStore& tiles, const std::vector<LabelMap>& labels, std::size_t epochs, std::uint64_t seed,
             const fs::path& from, const fs::path& to) override {
    if (labels.size() != tiles.tiles.size()) throw InvalidArgument("one label map per tile required");
    if (epochs == 0) throw InvalidArgument("epochs must be at least 1");
    auto job = workspace() / "train";
    fs::remove_all(job);
    fs::create_directories(job / "labels");
    for (std::size_t t = 0; t < tiles.tiles.size(); ++t)
      write_label_file(job / "labels" / (tiles.tiles[t].name() + ".lbl"), labels[t]);
    fs::create_directories(to);
    run(job, {{"kind", "train"},
              {"tiles", tiles_dir_.string()},
              {"labels", (job / "labels").string()},
              {"out", to.string()},
              {"epochs", std::to_string(epochs)},
              {"seed", std::to_string(seed)},
              {"params", from.string()}});
    for (const auto& entry : fs::directory_iterator(to))
      if (entry.path().extension() == ".lbl") {
        try {
          read_label_file(entry.path());
        } catch (const Error& e) {
          throw BackendError(std::string("malformed output: ") + e.what());
        }
      }
  }

  std::vector<ClusterSet> predict(const TileStore& tiles, const fs::path& params, std::uint32_t id_base) override {
    auto job = workspace() / "predict";
    fs::remove_all(job);
    fs::create_directories(job / "out");
    run(job, {{"kind", "predict"},
              {"tiles", tiles_dir_.string()},
              {"labels", ""},
              {"out", (job / "out").string()},
              {"epochs", "0"},
              {"seed", "0"},
              {"params", params.string()}});
    std::vector<ClusterSet> out;
    std::uint32_t next = id_base;
    for (const auto& tile : tiles.tiles) {
      auto path = job / "out" / (tile.name() + ".json");
      if (!fs::exists(path)) throw BackendError("malformed output: missing " + path.filename().string());
      ClusterSet raw;
      try {
        raw = read_cluster_file(path);
      } catch (const Error& e) {
        throw BackendError(std::string("malformed output: ") + e.what());
      }
      if (raw.point_count() != tile.points.size())
        throw BackendError("malformed output: " + path.filename().string() + " has the wrong point count");
      ClusterSet set(tile.points.size());
      for (const auto& [id, c] : raw.clusters())
        set.add(make_cluster(tile.points, ++next, c.points, ClusterSource::backend));
      out.push_back(std::move(set));
    }
    return out;
  }

private:
  fs::path workspace() const {
    if (work_.empty()) throw InvalidArgument("external backend needs a workspace directory");
    return work_;
  }

  void run(const fs::path& job, const std::map<std::string, std::string>& vars) {
    auto cmd = substitute(command_, vars);
    io::write_atomic(job / "command.sh", cmd + "\n");
    auto r = run_shell(cmd, job / "stdout.log", job / "stderr.log", timeout_s_);
    if (r.timed_out) throw BackendError("backend timed out after " + std::to_string(timeout_s_) + " s");
    if (r.exit_code != 0)
      throw BackendError("backend exited with status " + std::to_string(r.exit_code) + "; stderr:\n" +
                         file_tail(job / "stderr.log"));
  }

  std::string command_;
  fs::path tiles_dir_;
  double timeout_s_;
  fs::path work_;
};

/// The external backend when a command is configured, the reference one otherwise.
inline std::unique_ptr<SegmentationBackend> make_backend(const Config& cfg, const fs::path& tiles_dir) {
  if (!cfg.backend.command.empty())
    return std::make_unique<ExternalBackend>(cfg.backend.command, fs::absolute(tiles_dir), cfg.backend.timeout_s);
  BackendTrainConfig tc;
  tc.batch_size = cfg.backend.batch_size;
  tc.learning_rate = cfg.backend.learning_rate;
  return std::make_unique<ReferenceBackend>(cfg.backend.instances, tc);
}

}  // namespace treeseg
