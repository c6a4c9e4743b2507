#pragma once

// Coarse and fine point matching and the end-to-end pose estimator.
//
// Internally poses satisfy p_o = R p_m + t between the normalized proposal
// (m) and the normalized object model (o). Reported poses map model
// coordinates to camera coordinates.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "posematch/assignment.hpp"
#include "posematch/geometry.hpp"
#include "posematch/neural.hpp"

namespace posematch {

enum class FineAttention { kSdpt, kGeometric, kLinear };

inline std::string fine_attention_name(FineAttention a) {
  switch (a) {
    case FineAttention::kSdpt: return "sdpt";
    case FineAttention::kGeometric: return "geometric";
    case FineAttention::kLinear: return "linear";
  }
  return "?";
}

inline FineAttention parse_fine_attention(const std::string& s) {
  if (s == "sdpt") return FineAttention::kSdpt;
  if (s == "geometric") return FineAttention::kGeometric;
  if (s == "linear") return FineAttention::kLinear;
  fail(ErrorCode::kInvalidArgument, "unknown fine attention variant '" + s + "'");
}

struct PipelineConfig {
  Index coarse_points = 196;
  Index fine_points = 2048;
  Index fine_sparse_points = 196;
  double tau = 0.05;
  double gamma_coarse = 1.5;
  double gamma_fine = 1.0;
  HypothesisConfig hypotheses;
  Index min_points = 32;
  std::uint64_t seed = 0;
  bool use_coarse = true;
  bool use_fine = true;
  FineAttention fine_attention = FineAttention::kSdpt;
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"coarse_points", c.coarse_points},
       {"fine_points", c.fine_points},
       {"fine_sparse_points", c.fine_sparse_points},
       {"tau", c.tau},
       {"gamma_coarse", c.gamma_coarse},
       {"gamma_fine", c.gamma_fine},
       {"n_hyp", c.hypotheses.n_hyp},
       {"keep", c.hypotheses.keep},
       {"min_points", c.min_points},
       {"seed", c.seed},
       {"use_coarse", c.use_coarse},
       {"use_fine", c.use_fine},
       {"fine_attention", fine_attention_name(c.fine_attention)}};
}

// ---------------------------------------------------------------------------
// Coarse stage

struct CoarseResult {
  Pose pose;
  double s_hyp = 0.0;
  Index foreground_m = 0;
  Index foreground_o = 0;
};

namespace detail {

inline void require_descriptors(const PointCloud& pc, const char* what) {
  pc.validate();
  if (!pc.has_descriptors()) fail(ErrorCode::kShapeMismatch, std::string(what) + " has no descriptors");
}

inline std::vector<Index> sample_rows(const Points& pts, Index n, std::uint64_t seed) {
  return farthest_point_sample(pts, std::min(n, pts.rows()), seed);
}

inline AssignmentMatrix soft_from_features(const FeatureBlock& fm, const FeatureBlock& fo, double tau) {
  return soft_assignment(attention_matrix(fm, fo), tau);
}

}  // namespace detail

/// Pose from output features of the sparse sets (rows 0 are background tokens).
inline CoarseResult coarse_pose_from_features(const FeatureBlock& fm, const FeatureBlock& fo, const Points& sm,
                                              const Points& so, const PipelineConfig& cfg) {
  const AssignmentMatrix soft = detail::soft_from_features(fm, fo, cfg.tau);
  const ForegroundMasks masks = foreground_masks(soft);
  if (masks.count_m() == 0 || masks.count_o() == 0)
    fail(ErrorCode::kInsufficientCorrespondence, "every sparse point was assigned to the background");
  MatchProbabilities p;
  try {
    p = match_probabilities(soft, masks, cfg.gamma_coarse);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kAllBackground) fail(ErrorCode::kInsufficientCorrespondence, e.what());
    throw;
  }
  std::vector<PoseHypothesis> hyps =
      sample_pose_hypotheses(p, sm, so, cfg.hypotheses.n_hyp, derive_seed(cfg.seed, 13), cfg.hypotheses);
  const SelectedPose best = score_and_select_pose(hyps, sm, so, cfg.hypotheses.keep, cfg.hypotheses.epsilon);
  return {best.pose, best.s_hyp, masks.count_m(), masks.count_o()};
}

/// Sparse matching of normalized clouds; returns the best triplet hypothesis.
inline CoarseResult coarse_point_matching(const PointCloud& pc_m, const PointCloud& pc_o, const ModelWeights& w,
                                          const PipelineConfig& cfg) {
  detail::require_descriptors(pc_m, "proposal");
  detail::require_descriptors(pc_o, "object");
  const PointCloud sm = gather(pc_m, detail::sample_rows(pc_m.points, cfg.coarse_points, derive_seed(cfg.seed, 11)));
  const PointCloud so = gather(pc_o, detail::sample_rows(pc_o.points, cfg.coarse_points, derive_seed(cfg.seed, 12)));
  FeatureBlock fm = embed_features(*sm.descriptors, w, "coarse", "bg_m");
  FeatureBlock fo = embed_features(*so.descriptors, w, "coarse", "bg_o");
  for (Index l = 0; l < w.config().coarse_blocks; ++l)
    std::tie(fm, fo) = geometric_transformer_block(sm.points, so.points, fm, fo, w, "coarse/block" + std::to_string(l));
  return coarse_pose_from_features(project_output(fm, w, "coarse"), project_output(fo, w, "coarse"), sm.points,
                                   so.points, cfg);
}

// ---------------------------------------------------------------------------
// Fine stage

struct FineResult {
  Pose pose;
  double confidence = 0.0;
  Index correspondences = 0;
  Index foreground_m = 0;
  Index foreground_o = 0;
  Points src;                   // dense proposal points used
  Points dst;                   // their matched object points
  std::vector<double> weights;  // match probabilities
  std::vector<Index> src_rows;  // rows into the input proposal cloud
  std::vector<Index> dst_rows;  // rows into the input object cloud
};

/// Dense features of both clouds after the fine-stage transformer, output-projected.
struct FineFeatures {
  PointCloud dense_m;
  PointCloud dense_o;
  std::vector<Index> rows_m;
  std::vector<Index> rows_o;
  FeatureBlock fm;
  FeatureBlock fo;
  FeatureBlock hm;  // before the output projection
  FeatureBlock ho;
};

inline FineFeatures fine_features(const PointCloud& pc_m, const PointCloud& pc_o, const Pose& init,
                                  const ModelWeights& w, const PipelineConfig& cfg) {
  detail::require_descriptors(pc_m, "proposal");
  detail::require_descriptors(pc_o, "object");
  if (!init.is_valid(1e-6)) fail(ErrorCode::kInvalidArgument, "initial pose is not a rigid transform");
  FineFeatures out;
  out.rows_m = detail::sample_rows(pc_m.points, cfg.fine_points, derive_seed(cfg.seed, 21));
  out.rows_o = detail::sample_rows(pc_o.points, cfg.fine_points, derive_seed(cfg.seed, 22));
  out.dense_m = gather(pc_m, out.rows_m);
  out.dense_o = gather(pc_o, out.rows_o);
  const Points& pm = out.dense_m.points;
  const Points& po = out.dense_o.points;

  FeatureBlock fm = embed_features(*out.dense_m.descriptors, w, "fine", "bg_m");
  FeatureBlock fo = embed_features(*out.dense_o.descriptors, w, "fine", "bg_o");
  fm.bottomRows(pm.rows()) += positional_encoding(transform_points(init, pm), w, "fine/pe");
  fo.bottomRows(po.rows()) += positional_encoding(po, w, "fine/pe");

  std::vector<Index> sparse_m{0}, sparse_o{0};
  if (cfg.fine_attention == FineAttention::kSdpt) {
    for (Index r : detail::sample_rows(pm, cfg.fine_sparse_points, derive_seed(cfg.seed, 23))) sparse_m.push_back(r + 1);
    for (Index r : detail::sample_rows(po, cfg.fine_sparse_points, derive_seed(cfg.seed, 24))) sparse_o.push_back(r + 1);
  }
  for (Index l = 0; l < w.config().fine_blocks; ++l) {
    const std::string idx = std::to_string(l);
    switch (cfg.fine_attention) {
      case FineAttention::kSdpt:
        std::tie(fm, fo) = sdpt_block(pm, fm, po, fo, sparse_m, sparse_o, w, "fine/sdpt" + idx);
        break;
      case FineAttention::kGeometric:
        std::tie(fm, fo) = geometric_transformer_block(pm, po, fm, fo, w, "fine/sdpt" + idx + "/geo");
        break;
      case FineAttention::kLinear:
        std::tie(fm, fo) = linear_block(fm, fo, w, "fine/linear" + idx);
        break;
    }
  }
  out.fm = project_output(fm, w, "fine");
  out.fo = project_output(fo, w, "fine");
  out.hm = std::move(fm);
  out.ho = std::move(fo);
  return out;
}

/// Weighted Kabsch over each foreground proposal point and its most probable object point.
inline FineResult fine_pose_from_features(const FineFeatures& f, const PipelineConfig& cfg) {
  const AssignmentMatrix soft = detail::soft_from_features(f.fm, f.fo, cfg.tau);
  const ForegroundMasks masks = foreground_masks(soft);
  FineResult out;
  out.foreground_m = masks.count_m();
  out.foreground_o = masks.count_o();
  if (masks.count_m() == 0 || masks.count_o() == 0)
    fail(ErrorCode::kInsufficientCorrespondence, "every dense point was assigned to the background");
  const MatchProbabilities p = match_probabilities(soft, masks, cfg.gamma_fine);
  std::vector<Index> src_local, dst_local;
  for (Index i = 0; i < p.values.rows(); ++i) {
    if (!masks.mask_m[static_cast<std::size_t>(i)]) continue;
    Index j = 0;
    const double v = p.values.row(i).maxCoeff(&j);
    if (!(v > 0.0)) continue;
    src_local.push_back(i);
    dst_local.push_back(j);
    out.weights.push_back(v);
  }
  out.correspondences = static_cast<Index>(out.weights.size());
  if (out.correspondences < 3) fail(ErrorCode::kInsufficientCorrespondence, "fewer than 3 weighted correspondences");
  out.src.resize(out.correspondences, 3);
  out.dst.resize(out.correspondences, 3);
  for (Index k = 0; k < out.correspondences; ++k) {
    out.src.row(k) = f.dense_m.points.row(src_local[k]);
    out.dst.row(k) = f.dense_o.points.row(dst_local[k]);
    out.src_rows.push_back(f.rows_m[static_cast<std::size_t>(src_local[k])]);
    out.dst_rows.push_back(f.rows_o[static_cast<std::size_t>(dst_local[k])]);
  }
  try {
    out.pose = kabsch_weighted(out.src, out.dst, out.weights);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kDegenerateInput) fail(ErrorCode::kInsufficientCorrespondence, e.what());
    throw;
  }
  double mean = 0.0;
  for (double v : out.weights) mean += v;
  out.confidence = std::clamp(mean / static_cast<double>(out.correspondences), 0.0, 1.0);
  return out;
}

/// Dense matching conditioned on `init` through the positional encodings.
inline FineResult fine_point_matching(const PointCloud& pc_m, const PointCloud& pc_o, const Pose& init,
                                      const ModelWeights& w, const PipelineConfig& cfg) {
  return fine_pose_from_features(fine_features(pc_m, pc_o, init, w, cfg), cfg);
}

// ---------------------------------------------------------------------------
// End to end

struct PoseEstimate {
  Pose pose;          // model -> camera, metric units
  double confidence = 0.0;
  Pose initial_pose;  // internal convention, normalized frame
  Pose internal_pose;
  double s_hyp = 0.0;
  Index coarse_foreground_m = 0;
  Index coarse_foreground_o = 0;
  Index fine_foreground_m = 0;
  Index fine_foreground_o = 0;
  Index correspondences = 0;
  double mean_match_probability = 0.0;
  std::vector<Index> match_proposal_rows;  // fine correspondences, rows of the input proposal
  std::vector<Index> match_model_rows;     // matched rows of the input model
};

/// Frames of the normalized clouds: proposal by its centroid, model by its own center, both by the model radius.
struct NormalizedFrames {
  Vec3 proposal_center;
  Vec3 model_center;
  double radius = 1.0;
};

inline Pose internal_to_reported(const Pose& internal, const NormalizedFrames& f) {
  Pose out;
  out.rotation = internal.rotation.transpose();
  out.translation = f.proposal_center - internal.rotation.transpose() * (f.model_center + f.radius * internal.translation);
  return out;
}

inline Pose reported_to_internal(const Pose& reported, const NormalizedFrames& f) {
  Pose out;
  out.rotation = reported.rotation.transpose();
  out.translation = (reported.rotation.transpose() * (f.proposal_center - reported.translation) - f.model_center) / f.radius;
  return out;
}

inline PoseEstimate estimate_pose(const PointCloud& proposal, const PointCloud& model, const NormalizationInfo& model_info,
                                  const ModelWeights& w, const PipelineConfig& cfg) {
  if (proposal.size() < std::max<Index>(cfg.min_points, 3))
    fail(ErrorCode::kTooFewPoints, "proposal has " + std::to_string(proposal.size()) + " points");
  if (!(model_info.radius > 0.0)) fail(ErrorCode::kDegenerateInput, "model radius must be positive");
  detail::require_descriptors(proposal, "proposal");
  detail::require_descriptors(model, "object");

  NormalizedFrames frames{proposal.points.colwise().mean().transpose(), model_info.center, model_info.radius};
  const PointCloud pm = normalize_to_unit_sphere(proposal, NormalizationInfo{frames.proposal_center, frames.radius});
  const PointCloud po = normalize_to_unit_sphere(model, model_info);

  PoseEstimate est;
  Pose current;
  if (cfg.use_coarse) {
    const CoarseResult c = coarse_point_matching(pm, po, w, cfg);
    current = c.pose;
    est.s_hyp = c.s_hyp;
    est.coarse_foreground_m = c.foreground_m;
    est.coarse_foreground_o = c.foreground_o;
  }
  est.initial_pose = current;
  if (cfg.use_fine) {
    const FineResult f = fine_point_matching(pm, po, current, w, cfg);
    current = f.pose;
    est.confidence = f.confidence;
    est.mean_match_probability = f.confidence;
    est.fine_foreground_m = f.foreground_m;
    est.fine_foreground_o = f.foreground_o;
    est.correspondences = f.correspondences;
    est.match_proposal_rows = f.src_rows;
    est.match_model_rows = f.dst_rows;
  }
  est.internal_pose = current;
  est.pose = internal_to_reported(current, frames);
  return est;
}

inline nlohmann::json pose_to_json(const Pose& p) {
  nlohmann::json j;
  j["rotation"] = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) j["rotation"].push_back({p.rotation(r, 0), p.rotation(r, 1), p.rotation(r, 2)});
  j["translation"] = {p.translation.x(), p.translation.y(), p.translation.z()};
  return j;
}

inline Pose pose_from_json(const nlohmann::json& j) {
  Pose p;
  try {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = j.at("rotation").at(r).at(c).get<double>();
    for (int k = 0; k < 3; ++k) p.translation[k] = j.at("translation").at(k).get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidArgument, std::string("malformed pose: ") + e.what());
  }
  if (!p.is_valid(1e-6)) fail(ErrorCode::kInvalidArgument, "pose rotation is not orthonormal");
  return p;
}

inline void to_json(nlohmann::json& j, const PoseEstimate& e) {
  j = {{"pose", pose_to_json(e.pose)},
       {"confidence", e.confidence},
       {"initial_pose", pose_to_json(e.initial_pose)},
       {"s_hyp", e.s_hyp},
       {"coarse_foreground", {e.coarse_foreground_m, e.coarse_foreground_o}},
       {"fine_foreground", {e.fine_foreground_m, e.fine_foreground_o}},
       {"correspondences", e.correspondences},
       {"mean_match_probability", e.mean_match_probability}};
}

}  // namespace posematch
