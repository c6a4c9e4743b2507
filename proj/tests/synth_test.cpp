#include "posematch/parallel.hpp"
#include "posematch/synth.hpp"

#include <atomic>
#include <cstdlib>

#include <gtest/gtest.h>

using namespace posematch;

namespace {

double mean_nn_distance(const Points& a, const Points& b) {
  double s = 0;
  for (Index i = 0; i < a.rows(); ++i) s += std::sqrt((b.rowwise() - a.row(i)).rowwise().squaredNorm().minCoeff());
  return s / static_cast<double>(a.rows());
}

Pose sample_pose(std::uint64_t seed) {
  Rng rng(seed);
  return random_scene_pose(rng);
}

}  // namespace

TEST(GenerateObject, DeterministicCenteredAndRadius) {
  for (auto f : {ObjectFamily::kSphereCapUnion, ObjectFamily::kBoxCluster, ObjectFamily::kRandomBlob}) {
    const auto a = generate_object(f, 512, 3), b = generate_object(f, 512, 3), c = generate_object(f, 512, 4);
    EXPECT_EQ(a.cloud.points, b.cloud.points) << family_name(f);
    EXPECT_NE(a.cloud.points, c.cloud.points);
    EXPECT_EQ(a.cloud.size(), 512);
    const double max_d = (a.cloud.points.rowwise() - a.info.center.transpose()).rowwise().norm().maxCoeff();
    EXPECT_DOUBLE_EQ(a.info.radius, max_d);
    EXPECT_NEAR(a.info.radius, 0.1, 1e-12);
    EXPECT_LT(a.info.center.norm(), 0.02);
    EXPECT_EQ(parse_family(family_name(f)), f);
  }
  EXPECT_THROW(generate_object(ObjectFamily::kBoxCluster, 63, 0), Error);
  EXPECT_THROW(parse_family("cone"), Error);
}

TEST(GenerateObject, BoxClusterHasNoRotationalSymmetry) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto obj = generate_object(ObjectFamily::kBoxCluster, 1024, seed);
    const Points p = normalize_to_unit_sphere(obj.cloud, obj.info).points;
    Rng rng(seed + 100);
    double best = 1e300;
    for (int k = 0; k < 100; ++k) {
      Pose r;
      r.rotation = random_rotation(rng);
      best = std::min(best, mean_nn_distance(transform_points(r, p), p));
    }
    EXPECT_GT(best, 0.05) << "seed " << seed;
  }
}

TEST(MakeProposal, ZeroParametersGiveTransformedModel) {
  const auto obj = generate_object(ObjectFamily::kRandomBlob, 300, 5);
  const Pose gt = sample_pose(1);
  const auto prop = make_proposal(obj.cloud, gt, ProposalParams{0, 0, 0}, 9);
  EXPECT_EQ(prop.cloud.points, transform_points(gt, obj.cloud.points));
  for (Index i = 0; i < 300; ++i) EXPECT_EQ(prop.source[i], i);
  // Ground-truth correspondences recover the pose exactly.
  const Pose rec = kabsch(obj.cloud.points, prop.cloud.points);
  EXPECT_LT(rotation_angle(rec.rotation, gt.rotation), 1e-9);
  EXPECT_LT((rec.translation - gt.translation).norm(), 1e-10);
}

TEST(MakeProposal, CountsAndHalfSpaceCut) {
  const auto obj = generate_object(ObjectFamily::kBoxCluster, 1000, 6);
  const Pose gt = sample_pose(2);
  const auto prop = make_proposal(obj.cloud, gt, ProposalParams{0.3, 0.0, 0.05}, 10);
  EXPECT_EQ(prop.cloud.size(), 700 + 50);
  Index outliers = 0;
  for (auto s : prop.source) outliers += s < 0;
  EXPECT_EQ(outliers, 50);
  for (Index n : {64, 100, 4096, 333}) {
    const auto o = generate_object(ObjectFamily::kRandomBlob, n, 1);
    const auto p = make_proposal(o.cloud, gt, ProposalParams{0.3, 0.0, 0.0}, 1);
    EXPECT_EQ(p.cloud.size(), static_cast<Index>(std::ceil(0.7 * static_cast<double>(n) - 1e-9))) << n;
  }
  // The removed points are exactly those beyond a plane: some direction separates kept from removed.
  std::vector<bool> kept(1000, false);
  for (auto s : prop.source)
    if (s >= 0) kept[s] = true;
  const Points placed = transform_points(gt, obj.cloud.points);
  // The cut direction is drawn first from the proposal's stream.
  Rng replay(10, 0x9209);
  const Vec3 dir = random_unit_vector(replay);
  double max_kept = -1e300, min_removed = 1e300;
  for (Index i = 0; i < 1000; ++i) {
    const double d = placed.row(i).dot(dir.transpose());
    (kept[i] ? max_kept : min_removed) = kept[i] ? std::max(max_kept, d) : std::min(min_removed, d);
  }
  EXPECT_LE(max_kept, min_removed);
  EXPECT_THROW(make_proposal(obj.cloud, gt, ProposalParams{1.0, 0, 0}, 1), Error);
}

TEST(MakeProposal, NoiseStatistics) {
  const auto obj = generate_object(ObjectFamily::kRandomBlob, 4096, 7);
  const Pose gt = sample_pose(3);
  const auto prop = make_proposal(obj.cloud, gt, ProposalParams{0.0, 0.01, 0.0}, 11);
  const Points placed = transform_points(gt, obj.cloud.points);
  const Points diff = prop.cloud.points - placed;
  const double sigma = 0.01 * obj.info.radius;
  const double n = 4096;
  // Per-axis mean within 3 standard errors of zero; mean norm near sigma * sqrt(8 / pi).
  for (int c = 0; c < 3; ++c) EXPECT_LT(std::abs(diff.col(c).mean()), 3.0 * sigma / std::sqrt(n));
  const double mean_norm = diff.rowwise().norm().mean();
  const double expected = sigma * std::sqrt(8.0 / std::numbers::pi);
  const double sd = sigma * std::sqrt(3.0 - 8.0 / std::numbers::pi) / std::sqrt(n);
  EXPECT_LT(std::abs(mean_norm - expected), 3.0 * sd);
}

TEST(OracleDescriptors, ExactWithoutCorruption) {
  const auto obj = generate_object(ObjectFamily::kBoxCluster, 500, 8);
  const Pose gt = sample_pose(4);
  const auto prop = make_proposal(obj.cloud, gt, ProposalParams{0.2, 0.0, 0.1}, 12);
  const auto d = oracle_descriptors(obj.cloud, prop, gt, 32, 0.0, 5);
  EXPECT_EQ(d.object.rows(), 500);
  EXPECT_EQ(d.proposal.rows(), prop.cloud.size());
  for (Index i = 0; i < prop.cloud.size(); ++i) {
    if (prop.source[i] < 0) continue;
    EXPECT_LT((d.proposal.row(i) - d.object.row(prop.source[i])).cwiseAbs().maxCoeff(), 1e-12);
  }
  const auto again = oracle_descriptors(obj.cloud, prop, gt, 32, 0.0, 5);
  EXPECT_EQ(again.object, d.object);
  EXPECT_EQ(again.proposal, d.proposal);
  EXPECT_THROW(oracle_descriptors(obj.cloud, prop, gt, 7, 0.0, 5), Error);
}

TEST(OracleDescriptors, MatchedPairsAreMoreSimilar) {
  const auto obj = generate_object(ObjectFamily::kRandomBlob, 2000, 9);
  const Pose gt = sample_pose(5);
  const auto prop = make_proposal(obj.cloud, gt, ProposalParams{0.3, 0.01, 0.0}, 13);
  const auto d = oracle_descriptors(obj.cloud, prop, gt, 64, 0.1, 6);
  Rng rng(7);
  Index wins = 0, draws = 0;
  for (int k = 0; k < 5000; ++k) {
    const Index i = static_cast<Index>(rng.index(static_cast<std::size_t>(prop.cloud.size())));
    const Index src = prop.source[i];
    Index other = static_cast<Index>(rng.index(2000));
    if (other == src) continue;
    const auto cos = [&](Index a, Index b) {
      return d.proposal.row(a).dot(d.object.row(b)) / (d.proposal.row(a).norm() * d.object.row(b).norm());
    };
    wins += cos(i, src) > cos(i, other);
    ++draws;
  }
  EXPECT_GE(static_cast<double>(wins) / static_cast<double>(draws), 0.99);
}

TEST(EvaluatePose, IdentityTranslationAndSymmetricFlip) {
  const auto obj = generate_object(ObjectFamily::kBoxCluster, 800, 10);
  const Pose gt = sample_pose(6);
  const EvalRow same = evaluate_pose(gt, gt, obj.cloud, false);
  EXPECT_EQ(same.rotation_error_deg, 0.0);
  EXPECT_EQ(same.translation_error, 0.0);
  EXPECT_EQ(same.add, 0.0);
  EXPECT_EQ(same.add_s, 0.0);

  Pose shifted = gt;
  shifted.translation += Vec3(0, 0.6, 0.8) * 0.1 * obj.info.radius;
  const EvalRow t = evaluate_pose(shifted, gt, obj.cloud, false);
  EXPECT_NEAR(t.translation_error, 0.1, 1e-12);
  EXPECT_NEAR(t.add, 0.1, 1e-12);
  EXPECT_EQ(t.rotation_error_deg, 0.0);
  EXPECT_LE(t.add_s, t.add);

  const auto sphere = generate_object(ObjectFamily::kSphereCapUnion, 4000, 11);
  Pose flip;
  flip.rotation = axis_angle(Vec3::UnitX(), std::numbers::pi);
  const EvalRow f = evaluate_pose(flip, Pose::identity(), sphere.cloud, true);
  EXPECT_GT(f.add, 1.0);
  EXPECT_LT(f.add_s, 0.05);
  EXPECT_NEAR(f.rotation_error_deg, 180.0, 1e-9);
  EXPECT_EQ(f.primary(), f.add_s);
}

TEST(EvalReport, RecallIsMonotoneInThreshold) {
  EvalReport rep;
  Rng rng(12);
  for (int k = 0; k < 50; ++k) {
    EvalRow r;
    r.add = rng.uniform(0, 0.3);
    r.add_s = r.add * rng.uniform();
    r.rotation_error_deg = rng.uniform(0, 10);
    r.translation_error = rng.uniform(0, 0.1);
    rep.rows.push_back(r);
  }
  double prev = -1;
  for (double t = 0; t <= 0.4; t += 0.01) {
    const double cur = rep.add_recall(t);
    EXPECT_GE(cur, prev);
    prev = cur;
  }
  EXPECT_EQ(rep.add_recall(1.0), 1.0);
  EXPECT_EQ(EvalReport{}.pose_recall(), 0.0);
  const auto j = rep.aggregates();
  EXPECT_EQ(j["instances"], 50);
}

TEST(Suite, InstancesAreDeterministicAndCarryDescriptors) {
  SuiteConfig cfg;
  cfg.model_points = 256;
  const auto a = suite_instance(cfg, 7, 3), b = suite_instance(cfg, 7, 3);
  EXPECT_EQ(a.proposal.cloud.points, b.proposal.cloud.points);
  EXPECT_EQ(*a.proposal.cloud.descriptors, *b.proposal.cloud.descriptors);
  EXPECT_EQ(a.object.cloud.descriptors->cols(), 64);
  EXPECT_EQ(a.family, ObjectFamily::kRandomBlob);
  EXPECT_EQ(suite_instance(cfg, 7, 2).family, ObjectFamily::kBoxCluster);
}

TEST(Parallel, CoversEveryIndexAndRethrowsLowestFailure) {
  std::vector<int> hits(1000, 0);
  parallel_for(1000, [&](Index i) { hits[i] += 1; }, 4);
  for (int h : hits) EXPECT_EQ(h, 1);
  try {
    parallel_for(100, [](Index i) {
      if (i == 30 || i == 70) throw std::runtime_error(std::to_string(i));
    }, 3);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "30");
  }
  setenv("POSE_MATCH_THREADS", "3", 1);
  EXPECT_EQ(worker_count(), 3u);
  setenv("POSE_MATCH_THREADS", "junk", 1);
  EXPECT_GE(worker_count(), 1u);
  unsetenv("POSE_MATCH_THREADS");
}
