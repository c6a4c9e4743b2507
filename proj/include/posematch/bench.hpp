#pragma once

// Synthetic benchmark and ablation runners. Result documents follow
// {config, seeds, per_instance, aggregates} and contain no wall-clock values,
// so identical seeds reproduce them byte for byte; timings are returned separately.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "posematch/parallel.hpp"
#include "posematch/pipeline.hpp"
#include "posematch/synth.hpp"

namespace posematch {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Fraction of pairs (proposal row, model row) whose model point, placed by gt,
/// lies within `tol` model radii of the proposal point.
inline double correspondence_recovery(const SyntheticInstance& inst, std::span<const Index> proposal_rows,
                                      std::span<const Index> model_rows, double tol = 0.05) {
  if (proposal_rows.empty()) return 0.0;
  const double r = inst.object.info.radius;
  Index good = 0;
  for (std::size_t k = 0; k < proposal_rows.size(); ++k) {
    const Vec3 placed = inst.gt.apply(inst.object.cloud.points.row(model_rows[k]).transpose());
    good += (placed - inst.proposal.cloud.points.row(proposal_rows[k]).transpose()).norm() < tol * r ? 1 : 0;
  }
  return static_cast<double>(good) / static_cast<double>(proposal_rows.size());
}

struct SuiteRun {
  EvalReport report;
  std::vector<double> recovery;  // correspondence recovery per instance
  nlohmann::json per_instance = nlohmann::json::array();
  double seconds = 0.0;
};

inline nlohmann::json suite_aggregates(const SuiteRun& run) {
  nlohmann::json j = run.report.aggregates();
  double s = 0.0;
  for (double v : run.recovery) s += v;
  j["mean_correspondence_recovery"] = run.recovery.empty() ? 0.0 : s / static_cast<double>(run.recovery.size());
  return j;
}

/// Runs the pipeline on instances [0, cfg.instances) of the seeded suite, in parallel over instances.
inline SuiteRun run_suite(const ModelWeights& w, const PipelineConfig& pipeline, const SuiteConfig& suite,
                          std::uint64_t seed) {
  const auto t0 = Clock::now();
  const Index n = suite.instances;
  std::vector<EvalRow> rows(static_cast<std::size_t>(n));
  std::vector<double> recovery(static_cast<std::size_t>(n), 0.0);
  std::vector<nlohmann::json> records(static_cast<std::size_t>(n));
  parallel_for(n, [&](Index k) {
    const SyntheticInstance inst = suite_instance(suite, seed, k);
    const bool symmetric = inst.family == ObjectFamily::kSphereCapUnion;
    nlohmann::json rec{{"index", k}, {"seed", inst.seed}, {"family", family_name(inst.family)},
                       {"proposal_points", inst.proposal.cloud.size()}, {"gt_pose", pose_to_json(inst.gt)}};
    try {
      const PoseEstimate est = estimate_pose(inst.proposal.cloud, inst.object.cloud, inst.object.info, w, pipeline);
      rows[k] = evaluate_pose(est.pose, inst.gt, inst.object.cloud, symmetric);
      recovery[k] = correspondence_recovery(inst, est.match_proposal_rows, est.match_model_rows);
      rec["estimate"] = est;
    } catch (const Error& e) {
      // A failed estimate counts as a miss with the identity pose.
      rows[k] = evaluate_pose(Pose::identity(), inst.gt, inst.object.cloud, symmetric);
      rec["error"] = {{"code", error_name(e.code())}, {"message", e.what()}};
    }
    rec["eval"] = rows[k];
    rec["correspondence_recovery"] = recovery[k];
    records[k] = std::move(rec);
  });
  SuiteRun run;
  run.report.rows = std::move(rows);
  run.recovery = std::move(recovery);
  for (auto& r : records) run.per_instance.push_back(std::move(r));
  run.seconds = seconds_since(t0);
  return run;
}

inline nlohmann::json result_document(const nlohmann::json& config, std::uint64_t seed, nlohmann::json per_instance,
                                      nlohmann::json aggregates) {
  return {{"config", config},
          {"seeds", {{"suite", seed}}},
          {"per_instance", std::move(per_instance)},
          {"aggregates", std::move(aggregates)}};
}

inline nlohmann::json run_config_json(const ModelWeights& w, const PipelineConfig& p, const SuiteConfig& s) {
  return {{"model", w.config()}, {"weight_seed", w.seed()}, {"pipeline", p}, {"suite", s}};
}

struct Timed {
  nlohmann::json result;  // deterministic
  nlohmann::json timing;  // wall-clock seconds
};

inline Timed synth_bench(const ModelWeights& w, const PipelineConfig& p, const SuiteConfig& s, std::uint64_t seed) {
  SuiteRun run = run_suite(w, p, s, seed);
  Timed out;
  out.result = result_document(run_config_json(w, p, s), seed, std::move(run.per_instance), suite_aggregates(run));
  out.timing = {{"suite_seconds", run.seconds}, {"instances", s.instances}};
  return out;
}

// ---------------------------------------------------------------------------
// Stage ablation: coarse + fine, coarse only, fine only (identity init).

inline Timed ablate_stages(const ModelWeights& w, const PipelineConfig& base, const SuiteConfig& s, std::uint64_t seed) {
  struct Variant {
    const char* name;
    bool coarse;
    bool fine;
  };
  const Variant variants[] = {{"coarse+fine", true, true}, {"coarse-only", true, false}, {"fine-only", false, true}};
  nlohmann::json per = nlohmann::json::object(), agg = nlohmann::json::object(), timing = nlohmann::json::object();
  for (const auto& v : variants) {
    PipelineConfig p = base;
    p.use_coarse = v.coarse;
    p.use_fine = v.fine;
    SuiteRun run = run_suite(w, p, s, seed);
    agg[v.name] = suite_aggregates(run);
    per[v.name] = std::move(run.per_instance);
    timing[v.name] = run.seconds;
  }
  const double both = agg["coarse+fine"]["mean_add"].get<double>();
  agg["checks"] = {{"coarse_fine_not_worse_than_coarse_only", both <= agg["coarse-only"]["mean_add"].get<double>()},
                   {"fine_only_at_least_twice_coarse_fine", agg["fine-only"]["mean_add"].get<double>() >= 2.0 * both}};
  return {result_document(run_config_json(w, base, s), seed, std::move(per), std::move(agg)), std::move(timing)};
}

// ---------------------------------------------------------------------------
// Transformer ablation: SDPT vs full geometric attention vs linear attention only.

/// Seconds for one fine block forward at (S sparse, N dense) on random features, best of `repeats`.
inline nlohmann::json time_fine_blocks(const ModelWeights& w, Index dense, Index sparse, std::uint64_t seed,
                                       int repeats = 1) {
  Rng rng(seed, 0x71E);
  const Index c = w.config().channels;
  const Points pm = Points::NullaryExpr(dense, 3, [&] { return rng.uniform(-0.5, 0.5); });
  const Points po = Points::NullaryExpr(dense, 3, [&] { return rng.uniform(-0.5, 0.5); });
  const Matrix fm = Matrix::NullaryExpr(dense + 1, c, [&] { return rng.normal(); });
  const Matrix fo = Matrix::NullaryExpr(dense + 1, c, [&] { return rng.normal(); });
  std::vector<Index> rows{0};
  for (Index r : farthest_point_sample(pm, std::min(sparse, dense), seed)) rows.push_back(r + 1);
  auto best_of = [&](auto&& fn) {
    double best = 1e300;
    for (int k = 0; k < repeats; ++k) {
      const auto t0 = Clock::now();
      fn();
      best = std::min(best, seconds_since(t0));
    }
    return best;
  };
  return {{"dense", dense},
          {"sparse", sparse},
          {"sdpt", best_of([&] { sdpt_block(pm, fm, po, fo, rows, rows, w, "fine/sdpt0"); })},
          {"geometric", best_of([&] { geometric_transformer_block(pm, po, fm, fo, w, "fine/sdpt0/geo"); })},
          {"linear", best_of([&] { linear_block(fm, fo, w, "fine/linear0"); })}};
}

inline Timed ablate_transformer(const ModelWeights& w, const PipelineConfig& base, const SuiteConfig& s,
                                std::uint64_t seed, bool run_quality = true) {
  nlohmann::json per = nlohmann::json::object(), agg = nlohmann::json::object();
  nlohmann::json timing = {{"block_forward", time_fine_blocks(w, base.fine_points, base.fine_sparse_points, seed)}};
  if (run_quality) {
    for (FineAttention a : {FineAttention::kSdpt, FineAttention::kGeometric, FineAttention::kLinear}) {
      PipelineConfig p = base;
      p.fine_attention = a;
      SuiteRun run = run_suite(w, p, s, seed);
      agg[fine_attention_name(a)] = suite_aggregates(run);
      per[fine_attention_name(a)] = std::move(run.per_instance);
      timing["suite_seconds"][fine_attention_name(a)] = run.seconds;
    }
    const double sdpt = agg["sdpt"]["pose_recall_5deg_5pct"].get<double>();
    agg["checks"] = {
        {"sdpt_within_5_points_of_geometric",
         std::abs(sdpt - agg["geometric"]["pose_recall_5deg_5pct"].get<double>()) <= 0.05 + 1e-12},
        {"sdpt_better_than_linear", sdpt > agg["linear"]["pose_recall_5deg_5pct"].get<double>()}};
  }
  return {result_document(run_config_json(w, base, s), seed, std::move(per), std::move(agg)), std::move(timing)};
}

// ---------------------------------------------------------------------------
// Assignment ablation: background-token dual softmax vs Sinkhorn on the fine-stage attention matrices.

struct AssignmentConfig {
  int sinkhorn_iterations = 100;
  double recovery_tolerance = 0.05;  // fraction of model radius
};

/// Planted-correspondence statistics of one soft assignment over the fine-stage rows.
struct AssignmentQuality {
  double recovery = 0.0;             // inlier rows whose best point column is the planted counterpart
  double foreground_recovery = 0.0;  // same, but also requiring the row to beat its background slot
  double inlier_foreground = 0.0;    // inlier rows not assigned to background
  double outlier_background = 0.0;   // outlier rows assigned to background

  static AssignmentQuality mean(const std::vector<AssignmentQuality>& v) {
    AssignmentQuality m;
    for (const auto& q : v) {
      m.recovery += q.recovery;
      m.foreground_recovery += q.foreground_recovery;
      m.inlier_foreground += q.inlier_foreground;
      m.outlier_background += q.outlier_background;
    }
    const double n = std::max<double>(1.0, static_cast<double>(v.size()));
    m.recovery /= n;
    m.foreground_recovery /= n;
    m.inlier_foreground /= n;
    m.outlier_background /= n;
    return m;
  }
};

inline void to_json(nlohmann::json& j, const AssignmentQuality& q) {
  j = {{"recovery", q.recovery},
       {"foreground_recovery", q.foreground_recovery},
       {"inlier_foreground_rate", q.inlier_foreground},
       {"outlier_background_rate", q.outlier_background}};
}

inline AssignmentQuality assignment_quality(const SyntheticInstance& inst, const FineFeatures& f,
                                            const AssignmentMatrix& soft, double tolerance) {
  const double tol = tolerance * inst.object.info.radius;
  const std::vector<Index> hard = hard_matches(soft);
  Index inliers = 0, outliers = 0, found = 0, found_fg = 0, fg = 0, bg = 0;
  for (std::size_t i = 0; i < hard.size(); ++i) {
    const Index row = f.rows_m[i];
    if (inst.proposal.source[static_cast<std::size_t>(row)] < 0) {
      ++outliers;
      bg += hard[i] < 0 ? 1 : 0;
      continue;
    }
    ++inliers;
    Index best = 0;
    soft.values.row(static_cast<Index>(i) + 1).tail(soft.values.cols() - 1).maxCoeff(&best);
    const Vec3 placed = inst.gt.apply(inst.object.cloud.points.row(f.rows_o[static_cast<std::size_t>(best)]).transpose());
    const bool hit = (placed - inst.proposal.cloud.points.row(row).transpose()).norm() < tol;
    found += hit ? 1 : 0;
    found_fg += (hit && hard[i] >= 0) ? 1 : 0;
    fg += hard[i] >= 0 ? 1 : 0;
  }
  auto ratio = [](Index a, Index b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  return {ratio(found, inliers), ratio(found_fg, inliers), ratio(fg, inliers), ratio(bg, outliers)};
}

inline Timed ablate_assignment(const ModelWeights& w, const PipelineConfig& base, const SuiteConfig& s,
                               std::uint64_t seed, const AssignmentConfig& acfg = {}) {
  const Index n = s.instances;
  std::vector<nlohmann::json> records(static_cast<std::size_t>(n));
  std::vector<double> t_bg(static_cast<std::size_t>(n)), t_sk(static_cast<std::size_t>(n));
  std::vector<AssignmentQuality> q_bg(static_cast<std::size_t>(n)), q_sk(static_cast<std::size_t>(n));
  // Timings are measured one instance at a time.
  parallel_for(
      n,
      [&](Index k) {
        const SyntheticInstance inst = suite_instance(s, seed, k);
        const NormalizedFrames frames{inst.proposal.cloud.points.colwise().mean().transpose(), inst.object.info.center,
                                      inst.object.info.radius};
        const PointCloud pm =
            normalize_to_unit_sphere(inst.proposal.cloud, NormalizationInfo{frames.proposal_center, frames.radius});
        const PointCloud po = normalize_to_unit_sphere(inst.object.cloud, inst.object.info);
        const Pose init = coarse_point_matching(pm, po, w, base).pose;
        const FineFeatures f = fine_features(pm, po, init, w, base);
        const AssignmentMatrix a = attention_matrix(f.fm, f.fo);

        auto t0 = Clock::now();
        const AssignmentMatrix soft = soft_assignment(a, base.tau);
        t_bg[k] = seconds_since(t0);
        t0 = Clock::now();
        const SinkhornResult sk = sinkhorn_assignment(a, acfg.sinkhorn_iterations, base.tau);
        t_sk[k] = seconds_since(t0);
        q_bg[k] = assignment_quality(inst, f, soft, acfg.recovery_tolerance);
        q_sk[k] = assignment_quality(inst, f, sk.assignment, acfg.recovery_tolerance);
        records[k] = {{"index", k},
                      {"seed", inst.seed},
                      {"rows", a.values.rows()},
                      {"cols", a.values.cols()},
                      {"background_token", q_bg[k]},
                      {"sinkhorn", q_sk[k]},
                      {"sinkhorn_converged", sk.converged},
                      {"sinkhorn_marginal_error", sk.marginal_error}};
      },
      1);
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  nlohmann::json per = nlohmann::json::array();
  for (auto& r : records) per.push_back(std::move(r));
  const AssignmentQuality bg = AssignmentQuality::mean(q_bg), sk = AssignmentQuality::mean(q_sk);
  nlohmann::json agg = {{"background_token", bg},
                        {"sinkhorn", sk},
                        {"recovery_gap_points", 100.0 * std::abs(bg.recovery - sk.recovery)}};
  nlohmann::json cfg = run_config_json(w, base, s);
  cfg["assignment"] = {{"sinkhorn_iterations", acfg.sinkhorn_iterations},
                       {"sinkhorn_epsilon", base.tau},
                       {"recovery_tolerance", acfg.recovery_tolerance}};
  const double speedup = mean(t_sk) / std::max(mean(t_bg), 1e-12);
  return {result_document(cfg, seed, std::move(per), std::move(agg)),
          {{"background_token_seconds", mean(t_bg)}, {"sinkhorn_seconds", mean(t_sk)}, {"speedup", speedup}}};
}

}  // namespace posematch
