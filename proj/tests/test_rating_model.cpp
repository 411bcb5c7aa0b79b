#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"
#include "treeseg/kde.hpp"
#include "treeseg/rater_io.hpp"
#include "treeseg/rater_net.hpp"
#include "treeseg/rater_train.hpp"
#include "treeseg/synth.hpp"

using namespace treeseg;
using treeseg::test::TempDir;
using namespace treeseg::oracle;

namespace {

const double kK0 = 1.0 / std::pow(2.0 * std::numbers::pi, 1.5);

PointCloud one_point(double x, double y, double z) {
  PointCloud pc;
  pc.push_back(x, y, z);
  return pc;
}

double grid_sum(const VoxelGrid<double>& g) {
  double s = 0;
  for (double v : g.values) s += v;
  return s;
}

// --- Independent forward pass --------------------------------------------------
// Straight nested loops over a 4D [C][D][H][W] volume, in double.

using Vol = std::vector<double>;  // [C][S][S][S]

template <class T>
const std::vector<T>& param(const RaterNet<T>& net, const std::string& name) {
  return net.tensor(name).data;
}

template <class T>
Vol naive_conv(const Vol& in, std::size_t cin, std::size_t s, const std::vector<T>& w, std::size_t cout,
               const std::vector<T>* bias) {
  Vol out(cout * s * s * s, 0.0);
  auto at = [&](std::size_t c, long z, long y, long x) -> double {
    long S = static_cast<long>(s);
    if (z < 0 || y < 0 || x < 0 || z >= S || y >= S || x >= S) return 0.0;
    return in[((c * s + static_cast<std::size_t>(z)) * s + static_cast<std::size_t>(y)) * s + static_cast<std::size_t>(x)];
  };
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t z = 0; z < s; ++z)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          double acc = bias ? static_cast<double>((*bias)[o]) : 0.0;
          for (std::size_t c = 0; c < cin; ++c)
            for (long kz = 0; kz < 3; ++kz)
              for (long ky = 0; ky < 3; ++ky)
                for (long kx = 0; kx < 3; ++kx)
                  acc += static_cast<double>(w[(((o * cin + c) * 3 + static_cast<std::size_t>(kz)) * 3 +
                                                static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)]) *
                         at(c, static_cast<long>(z) + kz - 1, static_cast<long>(y) + ky - 1, static_cast<long>(x) + kx - 1);
          out[((o * s + z) * s + y) * s + x] = acc;
        }
  return out;
}

Vol naive_pool(const Vol& in, std::size_t c, std::size_t s) {
  std::size_t h = s / 2;
  Vol out(c * h * h * h, -1e300);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < s; ++z)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          double& o = out[((ch * h + z / 2) * h + y / 2) * h + x / 2];
          o = std::max(o, in[((ch * s + z) * s + y) * s + x]);
        }
  return out;
}

// Infer-mode logits for one grid.
template <class T>
std::array<double, 3> naive_logits(const RaterNet<T>& net, const std::vector<T>& grid) {
  const auto& topo = net.topology();
  Vol x(grid.begin(), grid.end());
  std::size_t cin = 1, s = topo.resolution;
  for (std::size_t b = 0; b < topo.channels.size(); ++b) {
    std::string p = "block" + std::to_string(b);
    std::size_t c = topo.channels[b], V = s * s * s;
    Vol y = naive_conv<T>(x, cin, s, param(net, p + ".conv.weight"), c, nullptr);
    const auto& g = param(net, p + ".bn.gamma");
    const auto& be = param(net, p + ".bn.beta");
    const auto& mu = param(net, p + ".bn.running_mean");
    const auto& var = param(net, p + ".bn.running_var");
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t v = 0; v < V; ++v) {
        double& e = y[ch * V + v];
        e = g[ch] * (e - mu[ch]) / std::sqrt(static_cast<double>(var[ch]) + 1e-5) + be[ch];
        e = std::max(0.0, e);
      }
    x = naive_pool(y, c, s);
    cin = c;
    s /= 2;
  }
  std::size_t V = s * s * s, h = topo.head_channels, m = topo.mlp_hidden;
  // Branch A
  Vol a = naive_conv<T>(x, cin, s, param(net, "head_a.conv1.weight"), h, &param(net, "head_a.conv1.bias"));
  for (double& v : a) v = std::max(0.0, v);
  std::size_t sa = s;
  if (s >= 2) {
    a = naive_pool(a, h, s);
    sa = s / 2;
  }
  std::size_t Va = sa * sa * sa;
  const auto& w2 = param(net, "head_a.conv2.weight");
  const auto& b2 = param(net, "head_a.conv2.bias");
  std::array<double, 3> out{};
  for (std::size_t k = 0; k < 3; ++k) {
    double sum = 0;
    for (std::size_t v = 0; v < Va; ++v) {
      double o = b2[k];
      for (std::size_t j = 0; j < h; ++j) o += w2[k * h + j] * a[j * Va + v];
      sum += o;
    }
    out[k] = sum / static_cast<double>(Va);
  }
  // Branch B
  std::vector<double> g(cin, 0.0), h1(m, 0.0);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t v = 0; v < V; ++v) g[c] += x[c * V + v];
    g[c] /= static_cast<double>(V);
  }
  const auto& f1 = param(net, "head_b.fc1.weight");
  const auto& fb1 = param(net, "head_b.fc1.bias");
  const auto& f2 = param(net, "head_b.fc2.weight");
  const auto& fb2 = param(net, "head_b.fc2.bias");
  for (std::size_t o = 0; o < m; ++o) {
    double acc = fb1[o];
    for (std::size_t c = 0; c < cin; ++c) acc += f1[o * cin + c] * g[c];
    h1[o] = std::max(0.0, acc);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    double acc = fb2[k];
    for (std::size_t o = 0; o < m; ++o) acc += f2[k * m + o] * h1[o];
    out[k] += acc;
  }
  return out;
}


}  // namespace

// --- KDE ------------------------------------------------------------------------

TEST(Kde, PointAtVoxelCenter) {
  // R = E = 16: one voxel per metre, XY centroid at voxel coordinate 7.5.
  PointCloud pc;
  pc.push_back(0.5, 0.5, 0.0);
  pc.push_back(-0.5, -0.5, 0.0);  // the two points land on (8, 8, 0) and (7, 7, 0)
  auto g = kde_voxelize<double>(pc, 16, 16.0);
  EXPECT_NEAR(g.at(8, 8, 0), kK0 + kK0 * std::exp(-1.0), 1e-12);

  // R = E = 15: a lone point lands exactly on voxel (7, 7, 0).
  auto single = kde_voxelize<double>(one_point(3.0, 4.0, 7.0), 15, 15.0);
  EXPECT_NEAR(single.at(7, 7, 0), 0.0634936359342410, 1e-9);
  EXPECT_NEAR(single.at(8, 7, 0), 0.0385108368907489, 1e-9);
  EXPECT_NEAR(single.at(7, 6, 0), kK0 * std::exp(-0.5), 1e-15);
  EXPECT_NEAR(single.at(7, 7, 1), kK0 * std::exp(-0.5), 1e-15);
  EXPECT_NEAR(single.at(9, 8, 2), kK0 * std::exp(-0.5 * 9), 1e-15);
  EXPECT_EQ(single.at(11, 7, 0), 0.0);  // beyond the truncation window
}

TEST(Kde, MassOfInteriorPointsBruteForce) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(3.0, 28.0);  // >= 3 voxels from every face of a 32^3 grid
  double lo = 1, hi = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    VoxelGrid<double> g(32, 20.0);
    kde_splat(g, {u(rng), u(rng), u(rng)});
    double m = grid_sum(g);
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  EXPECT_GE(lo, 0.99);
  EXPECT_LE(hi, 1.0);
  // Half-voxel offsets are the worst placement.
  VoxelGrid<double> g(32, 20.0);
  kde_splat(g, {10.5, 10.5, 10.5});
  EXPECT_GE(grid_sum(g), 0.99);
}

TEST(Kde, BoundaryPointsLoseMassOnly) {
  VoxelGrid<double> g(32, 20.0);
  kde_splat(g, {0.0, 15.0, 0.0});
  double m = grid_sum(g);
  EXPECT_LT(m, 0.5);
  EXPECT_GT(m, 0.2);
}

TEST(Kde, ClusterMassBetweenBounds) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-4, 4), h(0, 8);
  PointCloud pc;
  pc.push_back(0, 0, -3);  // keeps every other point >= 3 voxels above the floor
  for (int i = 0; i < 300; ++i) pc.push_back(u(rng), u(rng), h(rng));
  auto g = kde_voxelize<double>(pc, 32, 20.0);
  auto frame = VoxelFrame::of(pc, 32, 20.0);
  VoxelGrid<double> floor_only(32, 20.0);
  kde_splat(floor_only, frame.apply(0, 0, -3));
  double interior = grid_sum(g) - grid_sum(floor_only);
  EXPECT_GE(interior, 0.99 * 300);
  EXPECT_LE(interior, 300.0);
}

TEST(Kde, ValuesNonNegativeAndEmptyThrows) {
  auto corpus = generate_rating_corpus({1, 1, 1}, 8);
  for (const auto& ex : corpus) {
    auto g = kde_voxelize<float>(ex.points);
    for (float v : g.values) ASSERT_GE(v, 0.0f);
  }
  EXPECT_THROW(kde_voxelize<float>(PointCloud{}), InvalidArgument);
}

TEST(Rotation, ZeroIsIdentityAndPiFlips) {
  PointCloud pc;
  pc.push_back(1, 0, 3);
  pc.push_back(-1, 0, 5);
  auto same = rotate_z(pc, 0.0);
  EXPECT_EQ(same.x, pc.x);
  EXPECT_EQ(same.y, pc.y);
  auto flip = rotate_z(pc, std::numbers::pi);
  EXPECT_NEAR(flip.x[0], -1, 1e-9);
  EXPECT_NEAR(flip.y[0], 0, 1e-9);
  EXPECT_EQ(flip.z, pc.z);
}

TEST(Rotation, RandomAnglePreservesDistances) {
  std::mt19937_64 rng(5);
  auto corpus = generate_rating_corpus({1, 0, 0}, 5);
  const auto& pc = corpus[0].points;
  auto rot = augment_rotation_z(pc, rng);
  std::uniform_int_distribution<std::size_t> pick(0, pc.size() - 1);
  for (int k = 0; k < 2000; ++k) {
    auto i = pick(rng), j = pick(rng);
    ASSERT_NEAR(distance(pc.position(i), pc.position(j)), distance(rot.position(i), rot.position(j)), 1e-9);
  }
  EXPECT_EQ(rot.z, pc.z);
  EXPECT_EQ(rot.hag, pc.hag);
}

// --- Class weights --------------------------------------------------------------

TEST(ClassWeights, Symmetric) {
  auto w = class_weights({100, 100, 100});
  for (double v : w) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(ClassWeights, TableOneCounts) {
  std::array<std::size_t, 3> c{3790, 1448, 7985};
  auto w = class_weights(c);
  EXPECT_NEAR(w[0], 1.163, 5e-4);
  EXPECT_NEAR(w[1], 3.044, 5e-4);
  EXPECT_NEAR(w[2], 0.552, 5e-4);
  double total = 3790 + 1448 + 7985;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(std::abs(w[i] * static_cast<double>(c[i]) - total / 3), 1e-9 * total);
}

TEST(ClassWeights, SmallCountsAndMissingClass) {
  auto w = class_weights({1, 1, 2});
  EXPECT_DOUBLE_EQ(w[0], 4.0 / 3);
  EXPECT_DOUBLE_EQ(w[1], 4.0 / 3);
  EXPECT_DOUBLE_EQ(w[2], 2.0 / 3);
  EXPECT_THROW(class_weights({3, 0, 2}), InvalidArgument);
}

TEST(ClassWeights, RandomCountsAreBalanced) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> u(1, 1000000);
  for (int k = 0; k < 1000; ++k) {
    std::array<std::size_t, 3> c{u(rng), u(rng), u(rng)};
    auto w = class_weights(c);
    double total = static_cast<double>(c[0] + c[1] + c[2]);
    for (std::size_t i = 0; i < 3; ++i)
      ASSERT_LT(std::abs(w[i] * static_cast<double>(c[i]) - total / 3), 1e-9 * total);
  }
}

// --- Network ----------------------------------------------------------------------

TEST(RaterNet, SoftmaxSumsToOne) {
  RaterNet<float> net;
  auto corpus = generate_rating_corpus({2, 1, 1}, 2);
  std::vector<PointCloud> clusters;
  for (auto& ex : corpus) clusters.push_back(ex.points);
  std::vector<float> grids;
  for (auto& c : clusters) {
    auto g = kde_voxelize<float>(c);
    grids.insert(grids.end(), g.values.begin(), g.values.end());
  }
  auto p = net.predict(grids, clusters.size());
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    double s = p[3 * i] + p[3 * i + 1] + p[3 * i + 2];
    EXPECT_NEAR(s, 1.0, 1e-6);
    for (int k = 0; k < 3; ++k) EXPECT_GT(p[3 * i + k], 0.0f);
  }
}

TEST(RaterNet, InferModeIsDeterministicAndStateless) {
  RaterNet<float> net;
  std::vector<float> zero(net.input_size(), 0.0f);
  auto before = net.tensors();
  auto a = net.predict(zero, 1);
  auto b = net.predict(zero, 1);
  EXPECT_EQ(a, b);
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(before[k].data, net.tensors()[k].data);
}

TEST(RaterNet, TrainModeUpdatesRunningStats) {
  RaterNet<float> net(RaterTopology{8, 20.0, {2, 3}, 4, 5});
  auto g = random_grids<float>(2, 8, 1);
  net.forward(g, 2, Mode::train);
  EXPECT_NE(net.tensor("block0.bn.running_mean").data[0], 0.0f);
}

TEST(RaterNet, MatchesNaiveForwardDefaultTopology) {
  RaterNet<float> net(RaterTopology{}, 11);
  randomize_running_stats(net, 12);
  auto corpus = generate_rating_corpus({1, 1, 1}, 13);
  for (const auto& ex : corpus) {
    auto g = kde_voxelize<float>(ex.points);
    auto p = net.predict(g.values, 1);
    auto l = naive_logits(net, g.values);
    double mx = std::max({l[0], l[1], l[2]}), s = 0;
    for (double v : l) s += std::exp(v - mx);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(p[static_cast<std::size_t>(k)], std::exp(l[static_cast<std::size_t>(k)] - mx) / s, 1e-5);
  }
}

TEST(RaterNet, MatchesNaiveForwardWithPooledHead) {
  // Final blocks leave 4^3 voxels, so branch A pools once before averaging.
  RaterTopology topo{16, 20.0, {3, 5}, 4, 6};
  RaterNet<double> net(topo, 21);
  randomize_running_stats(net, 22);
  auto grids = random_grids<double>(3, 16, 23);
  auto logits = net.forward(grids, 3, Mode::infer);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> one(grids.begin() + static_cast<long>(i * 4096), grids.begin() + static_cast<long>((i + 1) * 4096));
    auto l = naive_logits(net, one);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(logits[i * 3 + k], l[k], 1e-10);
  }
}

TEST(RaterNet, ShapeMismatchThrows) {
  RaterNet<float> net(RaterTopology{8, 20.0, {2, 3}, 4, 5});
  std::vector<float> wrong(100, 0.0f);
  EXPECT_THROW(net.forward(wrong, 1, Mode::infer), InvalidArgument);
  EXPECT_THROW((RaterNet<float>(RaterTopology{12, 20.0, {2, 3, 4}, 4, 5})), InvalidArgument);
}


TEST(RaterNet, GradientMatchesFiniteDifferencesTwoBlocks) {
  std::string name;
  double worst = gradient_check(RaterTopology{4, 20.0, {2, 3}, 4, 5}, 31, &name);
  EXPECT_LT(worst, 1e-4) << name;
}

TEST(RaterNet, GradientMatchesFiniteDifferencesPooledHead) {
  std::string name;
  double worst = gradient_check(RaterTopology{8, 20.0, {2, 3}, 3, 4}, 41, &name);
  EXPECT_LT(worst, 1e-4) << name;
}

TEST(Loss, WeightedCrossEntropyByHand) {
  std::vector<double> logits{0, 0, 0, 1, 2, 3};
  std::vector<RatingClass> labels{RatingClass::Single, RatingClass::NonTree};
  std::array<double, 3> w{2.0, 1.0, 0.5};
  double l1 = std::log(3.0);
  double l2 = std::log(std::exp(1) + std::exp(2) + std::exp(3)) - 3;
  double expected = (2.0 * l1 + 0.5 * l2) / 2.5;
  EXPECT_NEAR(weighted_cross_entropy<double>(logits, labels, w), expected, 1e-12);
}

TEST(Split, StratifiedAndSeeded) {
  std::vector<RatingClass> labels;
  for (int i = 0; i < 50; ++i) labels.push_back(RatingClass::Single);
  for (int i = 0; i < 20; ++i) labels.push_back(RatingClass::Multi);
  for (int i = 0; i < 30; ++i) labels.push_back(RatingClass::NonTree);
  auto a = stratified_split(labels, 0.2, 7);
  auto b = stratified_split(labels, 0.2, 7);
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_EQ(a.validation.size(), 20u);
  EXPECT_EQ(a.train.size(), 80u);
  std::array<int, 3> per{};
  for (auto i : a.validation) ++per[static_cast<std::size_t>(labels[i])];
  EXPECT_EQ(per, (std::array<int, 3>{10, 4, 6}));
}

TEST(Training, LossDecreasesEarlyAndIsDeterministic) {
  auto corpus = generate_rating_corpus({16, 16, 16}, 100);
  std::vector<RatedCluster> data;
  for (auto& ex : corpus) data.push_back({ex.points, ex.label});
  RaterTrainConfig cfg;
  cfg.topology.resolution = 16;
  cfg.topology.channels = {8, 16, 32, 64};
  cfg.epochs = 5;
  cfg.validation_fraction = 0.25;
  auto a = train_rater(data, cfg);
  ASSERT_EQ(a.history.size(), 5u);
  int down = 0;
  for (std::size_t e = 1; e < 5; ++e) down += a.history[e].train_loss <= a.history[e - 1].train_loss;
  EXPECT_GE(down, 3) << "loss should fall in most early epochs";
  EXPECT_LT(a.history.back().train_loss, a.history.front().train_loss);

  auto b = train_rater(data, cfg);
  for (std::size_t k = 0; k < a.net.tensors().size(); ++k) EXPECT_EQ(a.net.tensors()[k].data, b.net.tensors()[k].data);
  for (std::size_t e = 0; e < 5; ++e) EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
}

TEST(Training, MissingClassThrows) {
  auto corpus = generate_rating_corpus({3, 3, 0}, 1);
  std::vector<RatedCluster> data;
  for (auto& ex : corpus) data.push_back({ex.points, ex.label});
  RaterTrainConfig cfg;
  cfg.topology = RaterTopology{8, 20.0, {2, 3}, 4, 5};
  cfg.validation_fraction = 0;
  EXPECT_THROW(train_rater(data, cfg), InvalidArgument);
}

TEST(RaterFile, RoundTripAndCorruption) {
  TempDir dir;
  RaterNet<float> net(RaterTopology{8, 20.0, {2, 3}, 4, 5}, 3);
  randomize_running_stats(net, 4);
  write_rater_file(dir / "r.bin", net, {{"epochs", 3}});
  auto back = read_rater_file(dir / "r.bin");
  EXPECT_EQ(back.net.topology(), net.topology());
  EXPECT_EQ(back.training["epochs"], 3);
  for (std::size_t k = 0; k < net.tensors().size(); ++k) {
    EXPECT_EQ(back.net.tensors()[k].name, net.tensors()[k].name);
    EXPECT_EQ(back.net.tensors()[k].data, net.tensors()[k].data);
  }
  auto bytes = io::read_file(dir / "r.bin");
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RATR");
  EXPECT_THROW(decode_rater(std::span(bytes).first(bytes.size() - 2), "mem"), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_rater(bytes, "mem"), FormatError);

  // Double-precision tensors load into the float network.
  RaterNet<double> dnet(RaterTopology{8, 20.0, {2, 3}, 4, 5}, 3);
  auto dbytes = encode_rater(dnet);
  auto loaded = decode_rater(dbytes, "mem");
  EXPECT_FLOAT_EQ(loaded.net.tensors()[0].data[0], static_cast<float>(dnet.tensors()[0].data[0]));
}
