#pragma once

// Object matching score for segmentation proposals: semantic, appearance and
// geometric terms weighted by the visible ratio.

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "posematch/geometry.hpp"

namespace posematch {

/// Class embedding plus the patch embeddings inside the object mask.
struct EmbeddingSet {
  Vector cls;
  Matrix patches;  // P x C, P may be 0

  void validate() const {
    if (!cls.allFinite() || !patches.allFinite()) fail(ErrorCode::kDegenerateInput, "embedding has non-finite entries");
    if (!(cls.norm() > 0.0)) fail(ErrorCode::kDegenerateInput, "class embedding has zero norm");
    if (patches.rows() > 0 && patches.cols() != cls.size())
      fail(ErrorCode::kShapeMismatch, "patch and class embedding widths differ");
    for (Index r = 0; r < patches.rows(); ++r)
      if (!(patches.row(r).norm() > 0.0)) fail(ErrorCode::kDegenerateInput, "zero-norm patch embedding");
  }
};

struct Template {
  EmbeddingSet embedding;
  Mat3 rotation = Mat3::Identity();
};

/// Immutable set of rendered-view templates for one object.
class TemplateBank {
 public:
  static constexpr std::size_t kDefaultSize = 42;

  TemplateBank() = default;
  explicit TemplateBank(std::vector<Template> templates) : templates_(std::move(templates)) {
    for (const auto& t : templates_) t.embedding.validate();
  }

  bool empty() const { return templates_.empty(); }
  std::size_t size() const { return templates_.size(); }
  const Template& operator[](std::size_t i) const { return templates_[i]; }
  auto begin() const { return templates_.begin(); }
  auto end() const { return templates_.end(); }

 private:
  std::vector<Template> templates_;
};

struct ScoringConfig {
  int top_k = 5;
  double delta_vis = 0.5;
  double delta_m = 0.5;
};

struct SemanticResult {
  double score = 0.0;
  std::size_t best_index = 0;
};

struct ProposalRecord {
  EmbeddingSet embedding;
  BBox2D bbox;
  Vec3 points_mean = Vec3::Zero();
  std::optional<double> s_sem;
  std::optional<double> s_appe;
  std::optional<double> s_geo;
  std::optional<double> r_vis;
  std::optional<double> s_m;
};

namespace detail {

inline Matrix row_normalized(const Matrix& m) {
  Matrix out = m;
  for (Index r = 0; r < out.rows(); ++r) out.row(r) /= out.row(r).norm();
  return out;
}

/// For each row of `from`, the max cosine similarity against rows of `to`.
inline Vector best_cosine(const Matrix& from, const Matrix& to) {
  const Matrix sims = row_normalized(from) * row_normalized(to).transpose();
  return sims.rowwise().maxCoeff();
}

}  // namespace detail

inline double cosine_similarity(const Vector& a, const Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

inline SemanticResult semantic_score(const EmbeddingSet& proposal, const TemplateBank& bank, int k) {
  if (bank.empty()) fail(ErrorCode::kEmptyBank, "template bank is empty");
  if (k < 1) fail(ErrorCode::kInvalidCount, "top-K must be at least 1");
  std::vector<double> sims;
  sims.reserve(bank.size());
  SemanticResult out;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const double s = cosine_similarity(proposal.cls, bank[i].embedding.cls);
    sims.push_back(s);
    if (s > best) {
      best = s;
      out.best_index = i;
    }
  }
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), sims.size());
  std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(kk), sims.end(), std::greater<>());
  out.score = std::accumulate(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(kk), 0.0) /
              static_cast<double>(kk);
  return out;
}

inline double appearance_score(const EmbeddingSet& proposal, const EmbeddingSet& best_template) {
  if (proposal.patches.rows() < 1 || best_template.patches.rows() < 1)
    fail(ErrorCode::kEmptyPatches, "appearance score needs patches on both sides");
  return detail::best_cosine(proposal.patches, best_template.patches).mean();
}

/// Fraction of template patches that find a proposal patch with cosine >= delta_vis.
inline double visible_ratio(const EmbeddingSet& proposal, const EmbeddingSet& best_template, double delta_vis) {
  if (best_template.patches.rows() < 1) fail(ErrorCode::kEmptyPatches, "template has no patches");
  if (proposal.patches.rows() < 1) return 0.0;
  const Vector best = detail::best_cosine(best_template.patches, proposal.patches);
  const auto visible = (best.array() >= delta_vis).count();
  return static_cast<double>(visible) / static_cast<double>(best.size());
}

/// IoU between the proposal box and the box of the model placed at (best_rotation, points_mean).
inline double geometric_score(const Mat3& best_rotation, const Vec3& points_mean, const PointCloud& model,
                              const Camera& cam, const BBox2D& proposal_bbox) {
  if (model.size() < 1) fail(ErrorCode::kDegenerateInput, "model cloud is empty");
  if (!(points_mean.z() > 0.0)) fail(ErrorCode::kBehindCamera, "proposal centre is behind the camera");
  const Pose coarse{best_rotation, points_mean};
  const BBox2D projected = project_points_bbox(transform_points(coarse, model.points), cam);
  return bbox_iou(proposal_bbox, projected);
}

inline double object_matching_score(double s_sem, double s_appe, double s_geo, double r_vis) {
  if (!(r_vis >= 0.0 && r_vis <= 1.0)) fail(ErrorCode::kInvalidArgument, "visible ratio must be in [0, 1]");
  return (s_sem + s_appe + r_vis * s_geo) / (2.0 + r_vis);
}

/// Score every term of a proposal in place.
inline void score_proposal(ProposalRecord& rec, const TemplateBank& bank, const PointCloud& model, const Camera& cam,
                           const ScoringConfig& cfg) {
  rec.embedding.validate();
  const SemanticResult sem = semantic_score(rec.embedding, bank, cfg.top_k);
  const Template& best = bank[sem.best_index];
  rec.s_sem = sem.score;
  rec.s_appe = appearance_score(rec.embedding, best.embedding);
  rec.r_vis = visible_ratio(rec.embedding, best.embedding, cfg.delta_vis);
  rec.s_geo = geometric_score(best.rotation, rec.points_mean, model, cam, rec.bbox);
  rec.s_m = object_matching_score(*rec.s_sem, *rec.s_appe, *rec.s_geo, *rec.r_vis);
}

/// Indices with s_m >= delta_m, highest score first (ties keep input order).
inline std::vector<std::size_t> filter_proposals(const std::vector<ProposalRecord>& records, double delta_m) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].s_m) fail(ErrorCode::kUnscoredRecord, "proposal " + std::to_string(i) + " is not scored");
    if (*records[i].s_m >= delta_m) keep.push_back(i);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) { return *records[a].s_m > *records[b].s_m; });
  return keep;
}

}  // namespace posematch
