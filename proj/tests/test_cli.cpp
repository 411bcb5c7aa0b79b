#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <regex>
#include <sys/wait.h>

#include "test_util.hpp"
#include "treeseg/external_backend.hpp"
#include "treeseg/io.hpp"
#include "treeseg/loop.hpp"

using namespace treeseg;

namespace {

struct Outcome {
  int code = -1;
  std::string output;  // stdout and stderr
};

Outcome cli(const fs::path& cwd, const std::string& args) {
  std::string cmd = "cd " + shell_quote(cwd.string()) + " && " + shell_quote(TREESEG_CLI) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return o;
  std::array<char, 4096> buf;
  while (auto n = std::fread(buf.data(), 1, buf.size(), pipe)) o.output.append(buf.data(), n);
  int status = ::pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithOne) {
  test::TempDir dir;
  EXPECT_EQ(cli(dir.path(), "").code, 1);
  EXPECT_EQ(cli(dir.path(), "frobnicate").code, 1);
  auto o = cli(dir.path(), "tile --in missing.xyz --run run");
  EXPECT_EQ(o.code, 1);
  o = cli(dir.path(), "segment-init --run run");
  EXPECT_EQ(o.code, 1) << o.output;
  EXPECT_NE(o.output.find("tile"), std::string::npos) << o.output;
}

TEST(Cli, BadConfigIsRejected) {
  test::TempDir dir;
  ASSERT_EQ(cli(dir.path(), "synth --out scene --trees 3 --extent 20").code, 0);
  auto o = cli(dir.path(), "tile --in scene/cloud.xyz --run run --set loop.patiance=3");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("loop.patiance"), std::string::npos) << o.output;
}

TEST(Cli, EndToEnd) {
  test::TempDir dir;
  const auto& d = dir.path();
  auto o = cli(d, "synth --out scene --trees 45 --extent 50 --spacing 5 --rocks 4 --shrubs 4 --clearance 1 "
                  "--min-apex 12 --seed 3");
  ASSERT_EQ(o.code, 0) << o.output;
  for (const char* f : {"cloud.xyz", "objects.bin", "truth.json"}) EXPECT_TRUE(fs::exists(d / "scene" / f)) << f;

  o = cli(d, "tile --in scene/cloud.xyz --run run --set tile_size=50.001 watershed.smooth_sigma=0.75 "
             "watershed.seed_radius=4 watershed.min_height=1.5 rater.epochs=4 "
             "loop.max_iterations=2");
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_TRUE(fs::exists(d / "run" / "config.json"));

  o = cli(d, "segment-init --run run");
  ASSERT_EQ(o.code, 0) << o.output;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(o.output, m, std::regex("found (\\d+) clusters"))) << o.output;
  EXPECT_GE(std::stoi(m[1]), 30);

  o = cli(d, "loop --run run");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("run serve and rate clusters first"), std::string::npos) << o.output;
  EXPECT_FALSE(fs::exists(d / "run" / "iter_0"));

  o = cli(d, "rate-truth --run run --gt scene");
  ASSERT_EQ(o.code, 0) << o.output;
  o = cli(d, "loop --run run");
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_NE(o.output.find("stopped after iteration"), std::string::npos) << o.output;

  auto store = read_tile_store(d / "run" / "tiles");
  auto rows = parse_metrics_csv(io::read_text(d / "run" / "metrics.csv"), store.tiles.size());
  ASSERT_GE(rows.size(), 2u);
  for (std::size_t k = 1; k < rows.size(); ++k) EXPECT_GE(rows[k].instances, rows[k - 1].instances);

  // Overriding the snapshot on an existing run is refused.
  o = cli(d, "loop --run run --set loop.patience=5");
  EXPECT_EQ(o.code, 1) << o.output;

  o = cli(d, "eval --run run --gt scene");
  ASSERT_EQ(o.code, 0) << o.output;
  for (const char* f : {"matches.csv", "metrics.csv", "counts.csv", "trajectory.csv", "summary.json"})
    EXPECT_TRUE(fs::exists(d / "run" / "eval" / f)) << f;
  auto summary = nlohmann::json::parse(io::read_text(d / "run" / "eval" / "summary.json"));
  EXPECT_EQ(summary["gt_trees"], 45);
  EXPECT_EQ(summary["last_iteration"], rows.back().iteration);
}
