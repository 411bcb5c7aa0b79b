#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"
#include "treeseg/labels.hpp"

using namespace treeseg;
using treeseg::test::TempDir;

namespace {

using namespace treeseg::oracle;

std::vector<std::uint32_t> range(std::uint32_t a, std::uint32_t b) {
  std::vector<std::uint32_t> v;
  for (auto i = a; i < b; ++i) v.push_back(i);
  return v;
}


}  // namespace

TEST(InitialLabels, NoClustersAllGround) {
  ClusterSet set(100);
  auto labels = build_initial_labels(100, set, std::map<std::uint32_t, RatingClass>{});
  EXPECT_EQ(labels.count(Semantic::Ground), 100u);
  EXPECT_EQ(labels.instance_count(), 0u);
}

TEST(InitialLabels, SingleClusterBecomesInstance) {
  std::mt19937_64 rng(1);
  auto pc = random_cloud(rng, 1000);
  ClusterSet set(1000);
  set.add(make_cluster(pc, 4, range(100, 150), ClusterSource::watershed));
  auto labels = build_initial_labels(1000, set, {{4, RatingClass::Single}});
  EXPECT_EQ(labels.count(Semantic::Tree), 50u);
  EXPECT_EQ(labels.count(Semantic::Ground), 950u);
  EXPECT_EQ(labels.instance_count(), 1u);
  EXPECT_EQ(labels.check(), "");
}

TEST(InitialLabels, MultiGrayNonTreeGround) {
  std::mt19937_64 rng(2);
  auto pc = random_cloud(rng, 1000);
  ClusterSet set(1000);
  set.add(make_cluster(pc, 1, range(0, 30), ClusterSource::watershed));
  set.add(make_cluster(pc, 2, range(30, 80), ClusterSource::watershed));
  set.add(make_cluster(pc, 3, range(80, 90), ClusterSource::watershed));
  auto labels = build_initial_labels(
      1000, set, {{1, RatingClass::Multi}, {2, RatingClass::Single}, {3, RatingClass::NonTree}});
  EXPECT_EQ(labels.count(Semantic::Gray), 30u);
  EXPECT_EQ(labels.count(Semantic::Tree), 50u);
  EXPECT_EQ(labels.count(Semantic::Ground), 920u);
  EXPECT_EQ(labels.instance_count(), 1u);
}

TEST(InitialLabels, UnratedClusterThrows) {
  std::mt19937_64 rng(3);
  auto pc = random_cloud(rng, 20);
  ClusterSet set(20);
  set.add(make_cluster(pc, 1, range(0, 5), ClusterSource::watershed));
  EXPECT_THROW(build_initial_labels(20, set, std::map<std::uint32_t, RatingClass>{}), InvalidArgument);
}

TEST(Ioc, Arithmetic) {
  auto a = range(0, 10);
  auto r = ioc(a, a);
  EXPECT_DOUBLE_EQ(r.first, 1.0);
  EXPECT_DOUBLE_EQ(r.second, 1.0);
  auto d = ioc(range(0, 10), range(10, 20));
  EXPECT_DOUBLE_EQ(d.first, 0.0);
  EXPECT_DOUBLE_EQ(d.second, 0.0);
  auto c = ioc(range(0, 100), range(86, 106));
  EXPECT_DOUBLE_EQ(c.first, 0.14);
  EXPECT_DOUBLE_EQ(c.second, 0.70);
  EXPECT_THROW(ioc(std::vector<std::uint32_t>{}, a), InvalidArgument);
}

TEST(Accept, OnlyGrayOverlapAccepts) {
  std::mt19937_64 rng(4);
  auto pc = random_cloud(rng, 50);
  LabelMap labels(50);
  for (std::size_t i = 0; i < 20; ++i) labels.semantic[i] = Semantic::Gray;
  auto cand = make_cluster(pc, 1, range(0, 30), ClusterSource::backend);
  auto d = accept_candidate(cand, pc, labels, collect_instances(labels));
  EXPECT_TRUE(d.accepted);
  EXPECT_TRUE(d.intersecting.empty());
}

TEST(Accept, SharedTipRejected) {
  PointCloud pc;
  for (int i = 0; i < 20; ++i) pc.push_back(i * 0.05, 0, i, static_cast<float>(i));
  LabelMap labels(20);
  for (std::uint32_t i = 10; i < 20; ++i) {
    labels.semantic[i] = Semantic::Tree;
    labels.instance[i] = 1;
  }
  labels.next_instance = 2;
  auto cand = make_cluster(pc, 7, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 19}, ClusterSource::backend);
  auto d = accept_candidate(cand, pc, labels, collect_instances(labels));
  EXPECT_FALSE(d.accepted);
  ASSERT_FALSE(d.reasons.empty());
  EXPECT_EQ(d.reasons[0].test, RejectTest::tip);
}

TEST(Accept, IocOfSeventyPercentRejected) {
  // 20-point instance, 100-point candidate, 14 shared points packed within 1 m.
  PointCloud pc;
  for (int i = 0; i < 106; ++i) pc.push_back(0.01 * i, 0, 1 + 0.01 * i, static_cast<float>(1 + 0.01 * i));
  LabelMap labels(106);
  for (std::uint32_t i = 86; i < 106; ++i) {
    labels.semantic[i] = Semantic::Tree;
    labels.instance[i] = 1;
  }
  labels.next_instance = 2;
  // The instance's tip (105) lies outside the candidate.
  auto cand = make_cluster(pc, 9, range(0, 100), ClusterSource::backend);
  auto d = accept_candidate(cand, pc, labels, collect_instances(labels));
  EXPECT_FALSE(d.accepted);
  ASSERT_EQ(d.reasons.size(), 1u);
  EXPECT_EQ(d.reasons[0].test, RejectTest::ioc);
  EXPECT_DOUBLE_EQ(d.reasons[0].value, 0.7);
}

TEST(Accept, WideOverlapRejected) {
  PointCloud pc;
  for (int i = 0; i < 40; ++i) pc.push_back(0.2 * i, 0, 1, 1.0f);
  pc.hag[39] = 5.0f;
  pc.z[39] = 5.0;
  pc.hag[0] = 6.0f;
  pc.z[0] = 6.0;
  LabelMap labels(40);
  for (std::uint32_t i = 0; i < 20; ++i) {
    labels.semantic[i] = Semantic::Tree;
    labels.instance[i] = 1;
  }
  labels.next_instance = 2;
  // Shares points 8..19 (2.2 m wide) with the instance.
  auto cand = make_cluster(pc, 3, range(8, 40), ClusterSource::backend);
  auto d = accept_candidate(cand, pc, labels, collect_instances(labels));
  EXPECT_FALSE(d.accepted);
  ASSERT_EQ(d.reasons.size(), 1u);
  EXPECT_EQ(d.reasons[0].test, RejectTest::overlap);
  EXPECT_NEAR(d.reasons[0].value, 2.2, 1e-9);
}

TEST(Accept, IdenticalToExistingRejectedOnTip) {
  std::mt19937_64 rng(6);
  auto pc = random_cloud(rng, 60);
  LabelMap labels(60);
  for (std::uint32_t i = 0; i < 25; ++i) {
    labels.semantic[i] = Semantic::Tree;
    labels.instance[i] = 1;
  }
  labels.next_instance = 2;
  auto inst = collect_instances(labels);
  auto cand = make_cluster(pc, 1, range(0, 25), ClusterSource::backend);
  auto d = accept_candidate(cand, pc, labels, inst);
  EXPECT_FALSE(d.accepted);
  EXPECT_EQ(d.reasons[0].test, RejectTest::tip);
}

TEST(Accept, DepthMeasureSwitch) {
  PointCloud pc;
  for (int i = 0; i < 40; ++i) pc.push_back(0.2 * i, 0, 1 + 0.01 * i, static_cast<float>(1 + 0.01 * i));
  LabelMap labels(40);
  for (std::uint32_t i = 0; i < 20; ++i) {
    labels.semantic[i] = Semantic::Tree;
    labels.instance[i] = 1;
  }
  labels.next_instance = 2;
  auto cand = make_cluster(pc, 3, range(8, 40), ClusterSource::backend);
  AcceptanceRules rules;
  rules.measure = OverlapMeasure::depth;
  auto d = accept_candidate(cand, pc, labels, collect_instances(labels), rules);
  // Deepest shared point (8) is 2.4 m from the nearest unshared candidate point (20).
  ASSERT_FALSE(d.accepted);
  EXPECT_EQ(d.reasons[0].test, RejectTest::overlap);
  EXPECT_NEAR(d.reasons[0].value, 2.4, 1e-9);
}

TEST(Merge, NoContestedPoints) {
  std::mt19937_64 rng(7);
  auto pc = random_cloud(rng, 30);
  LabelMap labels(30);
  InstanceTable inst;
  auto cand = make_cluster(pc, 5, range(3, 12), ClusterSource::backend);
  auto id = merge_candidate(cand, pc, labels, inst);
  EXPECT_EQ(id, 1u);
  for (std::uint32_t i = 3; i < 12; ++i) EXPECT_EQ(labels.instance[i], id);
  EXPECT_EQ(inst.at(id), range(3, 12));
  EXPECT_EQ(labels.check(), "");
}

TEST(Merge, EquidistantPointStaysWithOwner) {
  PointCloud pc;
  pc.push_back(-1, 0, 0);  // 0: existing
  pc.push_back(0, 0, 0);   // 1: contested, equidistant
  pc.push_back(1, 0, 0);   // 2: candidate
  LabelMap labels(3);
  for (std::uint32_t i : {0u, 1u}) {
    labels.semantic[i] = Semantic::Tree;
    labels.instance[i] = 1;
  }
  labels.next_instance = 2;
  auto inst = collect_instances(labels);
  // Existing centroid (-0.5,0,0); candidate centroid (0.5,0,0).
  auto cand = make_cluster(pc, 8, {1, 2}, ClusterSource::backend);
  auto id = merge_candidate(cand, pc, labels, inst);
  EXPECT_EQ(labels.instance[1], 1u);
  EXPECT_EQ(labels.instance[2], id);
}

TEST(Rules, BruteForceOracleOnThousandScenes) {
  RuleTally tally;
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) ASSERT_EQ(check_rules(seed, tally), "") << "seed " << seed;
  // The generator must exercise both outcomes and real contention.
  EXPECT_GT(tally.accepted, 50u);
  EXPECT_GT(tally.rejected, 50u);
  EXPECT_GT(tally.contested, 1000u);
}

TEST(Rules, SecondMergeOfSameCandidateRejected) {
  auto s = random_scene(77);
  for (std::uint64_t seed = 78; !accept_candidate(s.candidate, s.pc, s.labels, s.instances).accepted; ++seed)
    s = random_scene(seed);
  auto id = merge_candidate(s.candidate, s.pc, s.labels, s.instances);
  auto again = make_cluster(s.pc, 1000, s.instances.at(id), ClusterSource::backend);
  auto d = accept_candidate(again, s.pc, s.labels, s.instances);
  EXPECT_FALSE(d.accepted);
  EXPECT_EQ(d.reasons[0].test, RejectTest::tip);
}

TEST(LabelFile, RoundTripAndCorruption) {
  TempDir dir;
  LabelMap labels(5);
  labels.semantic = {Semantic::Ground, Semantic::Gray, Semantic::Tree, Semantic::Tree, Semantic::Ground};
  labels.instance = {0, 0, 3, 4, 0};
  labels.next_instance = 5;
  write_label_file(dir / "a.bin", labels);
  auto back = read_label_file(dir / "a.bin");
  EXPECT_EQ(back.semantic, labels.semantic);
  EXPECT_EQ(back.instance, labels.instance);
  EXPECT_EQ(back.next_instance, 5u);

  auto bytes = encode_labels(labels);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "LBLM");
  EXPECT_THROW(decode_labels(std::span(bytes).first(bytes.size() - 1), "mem"), FormatError);
  bytes[4 + 4 + 8 + 1] = 7;  // invalid semantic
  EXPECT_THROW(decode_labels(bytes, "mem"), FormatError);
}
