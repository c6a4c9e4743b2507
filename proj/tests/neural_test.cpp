#include "posematch/neural.hpp"

#include <chrono>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

using namespace posematch;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.descriptor_dim = 8;
  c.channels = 16;
  c.heads = 4;
  c.coarse_blocks = 2;
  c.fine_blocks = 2;
  c.pe_hidden = 8;
  return c;
}

Points random_points(Rng& rng, Index n) {
  return Points::NullaryExpr(n, 3, [&] { return rng.uniform(-0.5, 0.5); });
}

Matrix random_features(Rng& rng, Index rows, Index cols) {
  return Matrix::NullaryExpr(rows, cols, [&] { return rng.normal(); });
}

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

// phi(q).phi(k) weighted average of values, one query at a time.
Matrix kernel_oracle(const Matrix& queries, const Matrix& kv, const ModelWeights& w, const std::string& path) {
  const Index h_count = w.config().heads;
  const Index d = w.config().channels / h_count;
  auto phi = [](double x) { return x > 0 ? x + 1.0 : std::exp(x); };
  const Matrix q = (queries * w.get(path + "/wq")).unaryExpr(phi);
  const Matrix k = (kv * w.get(path + "/wk")).unaryExpr(phi);
  const Matrix v = kv * w.get(path + "/wv");
  Matrix out = Matrix::Zero(queries.rows(), queries.cols());
  for (Index i = 0; i < queries.rows(); ++i)
    for (Index h = 0; h < h_count; ++h) {
      double z = 0;
      for (Index j = 0; j < kv.rows(); ++j) {
        const double s = q.row(i).segment(h * d, d).dot(k.row(j).segment(h * d, d));
        z += s;
        out.row(i).segment(h * d, d) += s * v.row(j).segment(h * d, d);
      }
      out.row(i).segment(h * d, d) /= z;
    }
  Matrix o = out * w.get(path + "/wo");
  o.rowwise() += w.get(path + "/bo").row(0);
  return residual_norm(queries, o, w, path);
}

ModelWeights zero_outputs(ModelWeights w, const std::string& prefix) {
  const Index c = w.config().channels;
  return w.with(prefix + "/wo", Matrix::Zero(c, c)).with(prefix + "/bo", Matrix::Zero(1, c));
}

}  // namespace

TEST(Weights, SeedDeterminismAndTiedInit) {
  const auto a = init_or_load_weights(3, small_config());
  const auto b = init_or_load_weights(3, small_config());
  const auto c = init_or_load_weights(4, small_config());
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  EXPECT_EQ(a.get("coarse/block0/self/wq"), a.get("coarse/block0/self/wk"));
  EXPECT_NE(a.get("coarse/block0/self/wq"), a.get("coarse/block1/self/wq"));
  EXPECT_EQ(a.get("fine/sdpt0/geo/self/dist").rows(), 16);
  for (const auto& spec : parameter_layout(small_config())) EXPECT_TRUE(a.get(spec.path).allFinite()) << spec.path;
  EXPECT_THROW(a.get("nope"), Error);
}

TEST(Weights, SaveLoadBitExactAndShapeChecks) {
  const auto cfg = small_config();
  const auto w = init_or_load_weights(11, cfg);
  const std::string p = (std::filesystem::temp_directory_path() / "posematch_weights.bin").string();
  w.save(p);
  const auto back = init_or_load_weights(p, cfg);
  EXPECT_TRUE(back == w);
  EXPECT_EQ(back.seed(), 11u);

  ModelConfig other = cfg;
  other.channels = 32;
  try {
    init_or_load_weights(p, other);
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
  EXPECT_THROW(w.with("coarse/in/b", Matrix::Zero(2, 2)), Error);
  ModelConfig bad = cfg;
  bad.heads = 3;
  EXPECT_THROW(ModelWeights::initialize(0, bad), Error);
}

TEST(GeometricBlock, ShapesAndPermutationEquivariance) {
  const auto w = init_or_load_weights(5, small_config());
  Rng rng(1);
  const Points pm = random_points(rng, 12), po = random_points(rng, 9);
  const Matrix fm = random_features(rng, 13, 16), fo = random_features(rng, 10, 16);
  const auto [om, oo] = geometric_transformer_block(pm, po, fm, fo, w, "coarse/block0");
  EXPECT_EQ(om.rows(), 13);
  EXPECT_EQ(oo.rows(), 10);
  EXPECT_EQ(om.cols(), 16);

  std::vector<Index> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[2], perm[7]);
  Points pm2(12, 3);
  Matrix fm2(13, 16);
  fm2.row(0) = fm.row(0);
  for (Index i = 0; i < 12; ++i) {
    pm2.row(i) = pm.row(perm[i]);
    fm2.row(i + 1) = fm.row(perm[i] + 1);
  }
  const auto [pm_out, po_out] = geometric_transformer_block(pm2, po, fm2, fo, w, "coarse/block0");
  EXPECT_LT(max_abs(pm_out.row(0) - om.row(0)), 1e-12);
  for (Index i = 0; i < 12; ++i) EXPECT_LT(max_abs(pm_out.row(i + 1) - om.row(perm[i] + 1)), 1e-12);
  EXPECT_LT(max_abs(po_out - oo), 1e-12);

  EXPECT_THROW(geometric_transformer_block(pm, po, fm.leftCols(8), fo, w, "coarse/block0"), Error);
  EXPECT_THROW(geometric_transformer_block(pm, po, fm.topRows(5), fo, w, "coarse/block0"), Error);
}

TEST(GeometricBlock, ZeroOutputProjectionsGiveResidualIdentity) {
  auto w = init_or_load_weights(5, small_config());
  w = zero_outputs(zero_outputs(w, "coarse/block0/self"), "coarse/block0/cross");
  Rng rng(2);
  const Points pm = random_points(rng, 6), po = random_points(rng, 7);
  Matrix fm = random_features(rng, 7, 16), fo = random_features(rng, 8, 16);
  const Matrix ones = Matrix::Ones(1, 16), zeros = Matrix::Zero(1, 16);
  layer_norm_inplace(fm, ones, zeros);
  layer_norm_inplace(fo, ones, zeros);
  const auto [om, oo] = geometric_transformer_block(pm, po, fm, fo, w, "coarse/block0");
  // Only the two post-sublayer normalizations remain.
  Matrix em = fm, eo = fo;
  for (int k = 0; k < 2; ++k) {
    layer_norm_inplace(em, ones, zeros);
    layer_norm_inplace(eo, ones, zeros);
  }
  EXPECT_LT(max_abs(om - em), 1e-12);
  EXPECT_LT(max_abs(oo - eo), 1e-12);
  EXPECT_LT(max_abs(om - fm), 1e-4);
}

TEST(GeometricBlock, BiasDependsOnDistancesOnly) {
  const auto w = init_or_load_weights(6, small_config());
  Rng rng(3);
  const Points p = random_points(rng, 20);
  Pose g;
  g.rotation = random_rotation(rng);
  g.translation = Vec3(3, -2, 1);
  const auto a = geometric_bias(p, w.get("coarse/block0/self/dist"), 2.0);
  const auto b = geometric_bias(transform_points(g, p), w.get("coarse/block0/self/dist"), 2.0);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t h = 0; h < a.size(); ++h) {
    EXPECT_LT(max_abs(a[h] - b[h]), 1e-9);
    EXPECT_EQ(max_abs(a[h].row(0)), 0.0);
    EXPECT_EQ(max_abs(a[h].col(0)), 0.0);
    EXPECT_GT(max_abs(a[h]), 0.0);
  }
}

TEST(GeometricBlock, DistanceEmbeddingMatchesDirectEvaluation) {
  std::vector<double> e(16);
  for (double d : {0.0, 0.3, 1.1, 2.0}) {
    distance_embedding(d, 2.0, 16, e.data());
    for (int k = 0; k < 8; ++k) {
      const double t = (k + 1) * std::numbers::pi * d / 2.0;
      EXPECT_NEAR(e[2 * k], std::sin(t), 1e-12);
      EXPECT_NEAR(e[2 * k + 1], std::cos(t), 1e-12);
    }
  }
}

TEST(Attention, RowsSumToOne) {
  // Attention weights recovered with identity value/output projections.
  ModelConfig cfg = small_config();
  cfg.heads = 1;
  auto w = init_or_load_weights(7, cfg);
  Rng rng(4);
  const Matrix q = random_features(rng, 9, 16);
  const std::string p = "coarse/block0/cross";
  // Value rows are one-hot on the first 11 channels, so attention weights appear directly in the output.
  Matrix kv_onehot = Matrix::Zero(11, 16);
  for (Index j = 0; j < 11; ++j) kv_onehot(j, j) = 1.0;
  w = w.with(p + "/wv", Matrix::Identity(16, 16)).with(p + "/wo", Matrix::Identity(16, 16));
  w = w.with(p + "/wk", Matrix::Identity(16, 16));
  const Matrix out = softmax_attention(q, kv_onehot, w, p);
  for (Index i = 0; i < out.rows(); ++i) {
    EXPECT_NEAR(out.row(i).sum(), 1.0, 1e-9);
    EXPECT_GE(out.row(i).minCoeff(), 0.0);
  }
}

TEST(LinearAttention, MatchesQuadraticOracle) {
  const auto w = init_or_load_weights(8, small_config());
  Rng rng(5);
  const Matrix q = random_features(rng, 8, 16), kv = random_features(rng, 8, 16);
  const std::string p = "fine/sdpt0/spread";
  EXPECT_LT(max_abs(linear_cross_attention(q, kv, w, p) - kernel_oracle(q, kv, w, p)), 1e-10);
}

TEST(LinearAttention, SingleKeyEqualsSoftmaxAttention) {
  const auto w = init_or_load_weights(9, small_config());
  Rng rng(6);
  const Matrix q = random_features(rng, 5, 16), kv = random_features(rng, 1, 16);
  const std::string p = "fine/sdpt1/spread";
  const Matrix lin = linear_cross_attention(q, kv, w, p);
  const Matrix soft = residual_norm(q, softmax_attention(q, kv, w, p), w, p);
  EXPECT_LT(max_abs(lin - soft), 1e-12);
  EXPECT_THROW(linear_cross_attention(q.leftCols(4), kv, w, p), Error);
}

TEST(LinearAttention, ScalesLinearly) {
  const auto w = init_or_load_weights(10, ModelConfig{});
  Rng rng(7);
  const Matrix kv = random_features(rng, 197, 256);
  auto timed = [&](Index n) {
    const Matrix q = random_features(rng, n, 256);
    double best = 1e300;
    for (int r = 0; r < 3; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const Matrix out = linear_cross_attention(q, q, w, "fine/sdpt0/spread");
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      EXPECT_EQ(out.rows(), n);
    }
    return best;
  };
  const double t1 = timed(1024);
  const double t4 = timed(4096);
  EXPECT_LT(t4, 4.0 * t1 * 1.5);  // linear cost plus timing noise
  RecordProperty("ratio", std::to_string(t4 / t1));
}

TEST(Sdpt, ShapesSpreadAndDeterminism) {
  const auto w = init_or_load_weights(12, small_config());
  Rng rng(8);
  const Points pm = random_points(rng, 30), po = random_points(rng, 25);
  const Matrix fm = random_features(rng, 31, 16), fo = random_features(rng, 26, 16);
  const std::vector<Index> sm{0, 1, 5, 9, 20}, so{0, 2, 3, 24};
  const auto [om, oo] = sdpt_block(pm, fm, po, fo, sm, so, w, "fine/sdpt0");
  EXPECT_EQ(om.rows(), 31);
  EXPECT_EQ(oo.rows(), 26);
  EXPECT_TRUE(om.allFinite());
  // Row 15 is not sparse, yet perturbing a sparse row's features changes it.
  Matrix fm2 = fm;
  fm2.row(9) *= -1.0;
  const auto [om2, oo2] = sdpt_block(pm, fm2, po, fo, sm, so, w, "fine/sdpt0");
  EXPECT_GT(max_abs(om2.row(15) - om.row(15)), 1e-8);
  EXPECT_GT(max_abs(oo2.row(10) - oo.row(10)), 1e-8);
  const auto [om3, oo3] = sdpt_block(pm, fm, po, fo, sm, so, w, "fine/sdpt0");
  EXPECT_EQ(om3, om);
  EXPECT_EQ(oo3, oo);

  const std::vector<Index> no_bg{1, 2}, out_of_range{0, 31};
  auto code = [&](const std::vector<Index>& s) {
    try {
      sdpt_block(pm, fm, po, fo, s, so, w, "fine/sdpt0");
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kInvalidArgument;
  };
  EXPECT_EQ(code(no_bg), ErrorCode::kIndexOutOfRange);
  EXPECT_EQ(code(out_of_range), ErrorCode::kIndexOutOfRange);
}

TEST(Sdpt, FullSparseSetEqualsGeometricThenLinear) {
  const auto w = init_or_load_weights(13, small_config());
  Rng rng(9);
  const Points pm = random_points(rng, 10), po = random_points(rng, 8);
  const Matrix fm = random_features(rng, 11, 16), fo = random_features(rng, 9, 16);
  std::vector<Index> all_m(11), all_o(9);
  std::iota(all_m.begin(), all_m.end(), 0);
  std::iota(all_o.begin(), all_o.end(), 0);
  const auto [om, oo] = sdpt_block(pm, fm, po, fo, all_m, all_o, w, "fine/sdpt0");
  const auto [gm, go] = geometric_transformer_block(pm, po, fm, fo, w, "fine/sdpt0/geo");
  EXPECT_LT(max_abs(om - linear_cross_attention(fm, gm, w, "fine/sdpt0/spread")), 1e-12);
  EXPECT_LT(max_abs(oo - linear_cross_attention(fo, go, w, "fine/sdpt0/spread")), 1e-12);
}

TEST(Sdpt, FasterThanFullGeometricAttention) {
  const auto w = init_or_load_weights(14, ModelConfig{});
  Rng rng(10);
  const Index n = 2048, s = 196;
  const Points pm = random_points(rng, n), po = random_points(rng, n);
  const Matrix fm = random_features(rng, n + 1, 256), fo = random_features(rng, n + 1, 256);
  std::vector<Index> sparse{0};
  for (Index i = 1; i <= s; ++i) sparse.push_back(i * (n / s));
  auto t0 = std::chrono::steady_clock::now();
  sdpt_block(pm, fm, po, fo, sparse, sparse, w, "fine/sdpt0");
  const double t_sdpt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  t0 = std::chrono::steady_clock::now();
  geometric_transformer_block(pm, po, fm, fo, w, "fine/sdpt0/geo");
  const double t_full = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(t_sdpt, t_full);
  std::cout << "sdpt " << t_sdpt << " s, full geometric " << t_full << " s\n";
}

TEST(PositionalEncoding, ShapeDuplicatesAndTranslation) {
  const auto w = init_or_load_weights(15, small_config());
  Rng rng(11);
  Points p = random_points(rng, 40);
  p.row(7) = p.row(3);
  const Matrix e = positional_encoding(p, w);
  EXPECT_EQ(e.rows(), 40);
  EXPECT_EQ(e.cols(), 16);
  EXPECT_LT(max_abs(e.row(7) - e.row(3)), 1e-12);
  Points shifted = p;
  shifted.rowwise() += Eigen::RowVector3d(0.3, 0, 0);
  EXPECT_GT(max_abs(positional_encoding(shifted, w) - e), 1e-6);
  EXPECT_EQ(positional_encoding(p.topRows(1), w).rows(), 1);
  EXPECT_THROW(positional_encoding(Points(0, 3), w), Error);
}

TEST(Features, EmbedAndProject) {
  const auto w = init_or_load_weights(16, small_config());
  Rng rng(12);
  const Matrix d = random_features(rng, 5, 8);
  const Matrix f = embed_features(d, w, "coarse", "bg_m");
  EXPECT_EQ(f.rows(), 6);
  EXPECT_EQ(f.row(0), w.get("coarse/bg_m"));
  const Matrix o = project_output(f, w, "coarse");
  for (Index r = 0; r < o.rows(); ++r) EXPECT_NEAR(o.row(r).norm(), 1.0, 1e-12);
  EXPECT_THROW(embed_features(random_features(rng, 5, 7), w, "coarse", "bg_m"), Error);
}
