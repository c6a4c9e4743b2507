#include "posematch/assignment.hpp"

#include <gtest/gtest.h>

using namespace posematch;

namespace {

Matrix random_matrix(Rng& rng, Index r, Index c, double scale = 1.0) {
  return Matrix::NullaryExpr(r, c, [&] { return scale * rng.normal(); });
}

// Direct per-entry evaluation of the dual softmax, no max subtraction.
double soft_entry_oracle(const Matrix& a, double tau, Index i, Index j) {
  long double row = 0, col = 0;
  for (Index k = 0; k < a.cols(); ++k) row += std::exp(static_cast<long double>(a(i, k)) / tau);
  for (Index k = 0; k < a.rows(); ++k) col += std::exp(static_cast<long double>(a(k, j)) / tau);
  const long double e = std::exp(static_cast<long double>(a(i, j)) / tau);
  return static_cast<double>((e / row) * (e / col));
}

Points random_points(Rng& rng, Index n) {
  return Points::NullaryExpr(n, 3, [&] { return rng.uniform(-1, 1); });
}

}  // namespace

TEST(AttentionMatrix, ShapesAndValues) {
  EXPECT_TRUE(attention_matrix(Matrix::Zero(4, 5), Matrix::Zero(3, 5)).values.isZero());
  const auto a = attention_matrix(Matrix::Ones(4, 2), Matrix::Ones(3, 2));
  EXPECT_EQ(a.values.rows(), 4);
  EXPECT_EQ(a.values.cols(), 3);
  Matrix fm(2, 2), fo(2, 2);
  fm << 1, 2, 3, 4;
  fo << 5, 6, 7, 8;
  const auto h = attention_matrix(fm, fo).values;
  EXPECT_EQ(h(0, 0), 17);
  EXPECT_EQ(h(0, 1), 23);
  EXPECT_EQ(h(1, 0), 39);
  EXPECT_EQ(h(1, 1), 53);
  EXPECT_THROW(attention_matrix(Matrix::Zero(2, 3), Matrix::Zero(2, 4)), Error);
}

TEST(SoftAssignment, UniformForZeroLogits) {
  const auto s = soft_assignment({Matrix::Zero(4, 3)}, 0.05).values;
  EXPECT_LT((s.array() - 1.0 / 12.0).abs().maxCoeff(), 1e-15);
}

TEST(SoftAssignment, DominantLogit) {
  Matrix a = Matrix::Zero(3, 3);
  a(1, 2) = 1.0;
  EXPECT_GT(soft_assignment({a}, 0.01).values(1, 2), 0.99);
}

TEST(SoftAssignment, MatchesBruteForceOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const Index r = 2 + static_cast<Index>(rng.index(15)), c = 2 + static_cast<Index>(rng.index(15));
    const Matrix a = random_matrix(rng, r, c, 0.5);
    const double tau = rng.uniform(0.1, 1.0);
    const auto s = soft_assignment({a}, tau).values;
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) EXPECT_NEAR(s(i, j), soft_entry_oracle(a, tau, i, j), 1e-12);
  }
  EXPECT_THROW(soft_assignment({Matrix::Zero(2, 2)}, 0.0), Error);
}

TEST(SoftAssignment, BoundedAndScaleCovariant) {
  Rng rng(22);
  const Matrix a = random_matrix(rng, 9, 7);
  const auto s = soft_assignment({a}, 0.5).values;
  EXPECT_GT(s.minCoeff(), 0.0);
  EXPECT_LE(s.maxCoeff(), 1.0);
  const auto s2 = soft_assignment({a * 3.0}, 1.5).values;
  EXPECT_LT((s - s2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ForegroundMasks, Cases) {
  Matrix bg = Matrix::Constant(4, 4, 0.01);
  bg.col(0).setConstant(0.5);
  bg.row(0).setConstant(0.5);
  const auto m1 = foreground_masks({bg});
  EXPECT_EQ(m1.count_m(), 0);
  EXPECT_EQ(m1.count_o(), 0);

  Matrix id = Matrix::Constant(4, 4, 0.01);
  id.bottomRightCorner(3, 3).diagonal().setConstant(0.9);
  const auto m2 = foreground_masks({id});
  EXPECT_EQ(m2.count_m(), 3);
  EXPECT_EQ(m2.count_o(), 3);

  // Mixed: row 1 background, row 2 matches col 3, row 3 ties with background -> foreground.
  Matrix mix(4, 4);
  mix << 0.0, 0.2, 0.1, 0.3,
         0.6, 0.1, 0.2, 0.0,
         0.1, 0.0, 0.1, 0.7,
         0.4, 0.4, 0.1, 0.2;
  const auto m3 = foreground_masks({mix});
  std::vector<std::uint8_t> expect_m, expect_o;
  for (Index i = 1; i < 4; ++i) expect_m.push_back(mix.row(i).tail(3).maxCoeff() >= mix(i, 0));
  for (Index j = 1; j < 4; ++j) expect_o.push_back(mix.col(j).tail(3).maxCoeff() >= mix(0, j));
  EXPECT_EQ(m3.mask_m, expect_m);
  EXPECT_EQ(m3.mask_o, expect_o);
  EXPECT_EQ(m3.mask_m, (std::vector<std::uint8_t>{0, 1, 1}));
}

TEST(ForegroundMasks, InvariantToConstantShift) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(rng, 8, 6);
    const auto base = foreground_masks(soft_assignment({a}, 0.3));
    const auto shifted = foreground_masks(soft_assignment({(a.array() + 4.2).matrix()}, 0.3));
    EXPECT_EQ(base.mask_m, shifted.mask_m);
    EXPECT_EQ(base.mask_o, shifted.mask_o);
  }
}

TEST(MatchProbabilities, Sharpening) {
  ForegroundMasks all{{1, 1}, {1, 1}};
  Matrix s = Matrix::Constant(3, 3, 0.2);
  const auto uni = match_probabilities({s}, all, 1.5).normalized();
  EXPECT_LT((uni.array() - 0.25).abs().maxCoeff(), 1e-15);

  s(1, 1) = 0.04;
  s(1, 2) = 0.01;
  const auto p1 = match_probabilities({s}, all, 1.0).values;
  EXPECT_NEAR(p1(0, 0) / p1(0, 1), 4.0, 1e-12);
  const auto p15 = match_probabilities({s}, all, 1.5).values;
  EXPECT_NEAR(p15(0, 0) / p15(0, 1), 8.0, 1e-12);

  ForegroundMasks partial{{1, 0}, {1, 1}};
  const auto pm = match_probabilities({s}, partial, 1.0).values;
  EXPECT_EQ(pm.row(1).sum(), 0.0);

  ForegroundMasks none{{0, 0}, {1, 1}};
  try {
    match_probabilities({s}, none, 1.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kAllBackground);
  }
}

TEST(PairSampler, FrequenciesWithinThreeSigma) {
  Rng rng(24);
  Matrix w = Matrix::NullaryExpr(4, 5, [&] { return rng.uniform(); });
  w(1, 3) = 0.0;
  w(2, 0) = 0.0;
  const PairSampler sampler(w);
  const Matrix p = w / w.sum();
  Matrix counts = Matrix::Zero(4, 5);
  Rng draw(25);
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const auto [i, j] = sampler.draw(draw);
    counts(i, j) += 1;
  }
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 5; ++j) {
      const double expected = n * p(i, j);
      const double sigma = std::sqrt(n * p(i, j) * (1 - p(i, j)));
      EXPECT_LE(std::abs(counts(i, j) - expected), 3 * sigma + 1e-12) << i << "," << j;
    }
  EXPECT_EQ(counts(1, 3), 0);
  EXPECT_EQ(counts(2, 0), 0);
}

TEST(PoseHypotheses, PlantedOneHotRecoversGroundTruth) {
  Rng rng(26);
  const Points pm = random_points(rng, 20);
  Pose gt;
  gt.rotation = random_rotation(rng);
  gt.translation = Vec3(0.1, -0.2, 0.3);
  const Points po = transform_points(gt, pm);
  const MatchProbabilities p{Matrix::Identity(20, 20)};
  const auto hyps = sample_pose_hypotheses(p, pm, po, 200, 5);
  ASSERT_EQ(hyps.size(), 200u);
  for (const auto& h : hyps) {
    EXPECT_LT((h.pose.rotation - gt.rotation).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((h.pose.translation - gt.translation).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT(h.mean_pair_distance, 1e-9);
  }
  EXPECT_TRUE(sample_pose_hypotheses(p, pm, po, 0, 5).empty());

  const auto a = sample_pose_hypotheses({Matrix::Ones(20, 20)}, pm, po, 50, 9);
  const auto b = sample_pose_hypotheses({Matrix::Ones(20, 20)}, pm, po, 50, 9);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].pose.rotation, b[k].pose.rotation);
    EXPECT_EQ(a[k].pose.translation, b[k].pose.translation);
  }
}

TEST(PoseHypotheses, ErrorContracts) {
  Rng rng(27);
  const Points pm = random_points(rng, 5);
  Matrix two = Matrix::Zero(5, 5);
  two(0, 0) = two(1, 1) = 1.0;
  try {
    sample_pose_hypotheses({two}, pm, pm, 10, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientCorrespondence);
  }
  // Three collinear positive pairs can never form a valid triplet.
  Points line(5, 3);
  line << 0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0, 4, 0, 0;
  Matrix three = Matrix::Zero(5, 5);
  three(0, 0) = three(1, 1) = three(2, 2) = 1.0;
  HypothesisConfig cfg;
  cfg.retry_cap = 20;
  try {
    sample_pose_hypotheses({three}, line, line, 3, 1, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRetryExhausted);
  }
}

TEST(SelectPose, Cases) {
  Rng rng(28);
  const Points pm = random_points(rng, 60);
  std::vector<PoseHypothesis> single{{Pose{axis_angle(Vec3::UnitX(), 1.0), Vec3(5, 5, 5)}, 3.0, 0.0}};
  const auto only = score_and_select_pose(single, pm, pm, 300);
  EXPECT_EQ(only.index, 0u);

  std::vector<PoseHypothesis> perfect{{Pose::identity(), 0.0, 0.0}};
  EXPECT_NEAR(score_and_select_pose(perfect, pm, pm, 300).s_hyp, 60.0 / 1e-6, 1e-3);

  Pose gt;
  gt.rotation = random_rotation(rng);
  gt.translation = Vec3(0.2, 0.1, -0.1);
  const Points po = transform_points(gt, pm);
  Pose off = gt;
  off.rotation = axis_angle(Vec3(1, 1, 0), 30.0 * std::numbers::pi / 180.0) * gt.rotation;
  std::vector<PoseHypothesis> two{{off, 0.0, 0.0}, {gt, 0.0, 0.0}};
  EXPECT_EQ(score_and_select_pose(two, pm, po, 300).index, 1u);

  std::vector<PoseHypothesis> empty;
  EXPECT_THROW(score_and_select_pose(empty, pm, po, 300), Error);
}

TEST(SelectPose, KeepsSmallestPairDistances) {
  Rng rng(29);
  const Points pm = random_points(rng, 30);
  // The ground-truth hypothesis has the largest pair distance, so keep = 1 must drop it.
  std::vector<PoseHypothesis> hyps{{Pose{axis_angle(Vec3::UnitZ(), 0.5), Vec3::Zero()}, 0.1, 0.0},
                                   {Pose::identity(), 0.9, 0.0}};
  EXPECT_EQ(score_and_select_pose(hyps, pm, pm, 1).index, 0u);
  EXPECT_EQ(score_and_select_pose(hyps, pm, pm, 2).index, 1u);
}

TEST(SelectPose, ScoreDecreasesWithResidual) {
  Rng rng(30);
  const Points pm = random_points(rng, 40);
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 10; ++k) {
    Pose p;
    p.translation = Vec3(0.05 * k, 0, 0);
    const double s = hypothesis_score(p, pm, pm);
    EXPECT_LT(s, prev);
    prev = s;
  }
}

TEST(Sinkhorn, UniformInputGivesUniformInnerBlock) {
  const auto r = sinkhorn_assignment({Matrix::Zero(5, 5)}, 100, 0.1);
  const Matrix inner = r.assignment.values.bottomRightCorner(4, 4);
  EXPECT_LT((inner.array() - inner(0, 0)).abs().maxCoeff(), 1e-12);
  EXPECT_TRUE(r.converged);
}

TEST(Sinkhorn, MarginalsConverge) {
  Rng rng(31);
  const Matrix a = random_matrix(rng, 30, 25, 0.3);
  const auto r = sinkhorn_assignment({a}, 100, 0.1);
  const Matrix& p = r.assignment.values;
  for (Index i = 1; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-6);
  for (Index j = 1; j < p.cols(); ++j) EXPECT_NEAR(p.col(j).sum(), 1.0, 1e-6);
  EXPECT_TRUE(r.converged);
  const auto once = sinkhorn_assignment({a * 20.0}, 1, 0.05);
  EXPECT_FALSE(once.converged);
  EXPECT_THROW(sinkhorn_assignment({a}, 0, 0.1), Error);
}

TEST(Sinkhorn, ArgmaxAgreesWithBackgroundTokensOnSeparatedInputs) {
  Rng rng(32);
  const double tau = 0.05;
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 12 + static_cast<Index>(rng.index(20));
    Matrix a = Matrix::NullaryExpr(n + 1, n + 1, [&] { return rng.uniform(0.0, 0.1); });
    a.row(0).setConstant(0.5);
    a.col(0).setConstant(0.5);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (Index k = n - 1; k > 0; --k) std::swap(perm[k], perm[rng.index(static_cast<std::size_t>(k + 1))]);
    // Most rows get a planted match with margin well above 2 tau; the rest belong to background.
    for (Index i = 0; i < n; ++i)
      if (rng.uniform() < 0.8) a(i + 1, perm[i] + 1) = 1.0;
    const auto bg = hard_matches(soft_assignment({a}, tau));
    const auto ot = hard_matches(sinkhorn_assignment({a}, 100, tau).assignment);
    EXPECT_EQ(bg, ot);
  }
}
