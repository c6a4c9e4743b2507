#pragma once

// Correspondence labels with a background class, the two-way cross-entropy
// objective on attention logits, and its analytic gradient.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "posematch/assignment.hpp"
#include "posematch/geometry.hpp"

namespace posematch {

/// y_m[i] in [0, N_o], y_o[j] in [0, N_m]; 0 is the background class, k > 0 is point k-1.
struct CorrespondenceLabels {
  std::vector<int> y_m;
  std::vector<int> y_o;
};

struct LossResult {
  double loss = 0.0;
  Matrix grad;
};

namespace detail {

inline std::pair<Index, double> nearest(const Points& cloud, const Vec3& q) {
  Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < cloud.rows(); ++k) {
    const double d = (cloud.row(k).transpose() - q).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return {best, std::sqrt(best_d)};
}

}  // namespace detail

/// gt maps pc_m into the frame of pc_o. A point is labelled with its nearest
/// counterpart when that distance is below delta_dis, otherwise background.
inline CorrespondenceLabels correspondence_labels(const Points& pc_m, const Points& pc_o, const Pose& gt,
                                                  double delta_dis = 0.15) {
  CorrespondenceLabels labels;
  labels.y_m.resize(static_cast<std::size_t>(pc_m.rows()));
  labels.y_o.resize(static_cast<std::size_t>(pc_o.rows()));
  const Points m_in_o = transform_points(gt, pc_m);
  for (Index i = 0; i < pc_m.rows(); ++i) {
    const auto [k, d] = detail::nearest(pc_o, m_in_o.row(i).transpose());
    labels.y_m[i] = d < delta_dis ? static_cast<int>(k + 1) : 0;
  }
  for (Index j = 0; j < pc_o.rows(); ++j) {
    const auto [k, d] = detail::nearest(m_in_o, pc_o.row(j).transpose());
    labels.y_o[j] = d < delta_dis ? static_cast<int>(k + 1) : 0;
  }
  return labels;
}

/// Mean softmax cross-entropy over rows; gradient with respect to the logits.
inline LossResult softmax_cross_entropy_rows(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) fail(ErrorCode::kShapeMismatch, "one label per row required");
  LossResult out{0.0, Matrix::Zero(logits.rows(), logits.cols())};
  if (logits.rows() == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || y >= logits.cols()) fail(ErrorCode::kShapeMismatch, "label out of range");
    const double mx = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
    const double z = e.sum();
    out.loss += (std::log(z) + mx - logits(r, y)) * inv_n;
    out.grad.row(r) = e / z * inv_n;
    out.grad(r, y) -= inv_n;
  }
  return out;
}

/// CE(A[1:, :], y_m) + CE(A[:, 1:]^T, y_o) with mean reduction in each term.
inline LossResult matching_loss(const AssignmentMatrix& a, const CorrespondenceLabels& labels) {
  const Index nm = a.point_rows();
  const Index no = a.point_cols();
  if (static_cast<Index>(labels.y_m.size()) != nm || static_cast<Index>(labels.y_o.size()) != no)
    fail(ErrorCode::kShapeMismatch, "label counts do not match the attention matrix");
  const LossResult rows = softmax_cross_entropy_rows(a.values.bottomRows(nm), labels.y_m);
  const LossResult cols = softmax_cross_entropy_rows(a.values.rightCols(no).transpose(), labels.y_o);
  LossResult out{rows.loss + cols.loss, Matrix::Zero(a.values.rows(), a.values.cols())};
  out.grad.bottomRows(nm) += rows.grad;
  out.grad.rightCols(no) += cols.grad.transpose();
  return out;
}

/// Sum of per-block losses over both matching stages.
inline double total_objective(std::span<const double> coarse, std::span<const double> fine) {
  double s = 0.0;
  for (double l : coarse) s += l;
  for (double l : fine) s += l;
  return s;
}

/// Ground truth composed with a random rotation of at most rot_deg_max degrees
/// about a uniform axis and a translation of length at most trans_max.
inline Pose perturb_gt_pose(const Pose& gt, double rot_deg_max, double trans_max, std::uint64_t seed) {
  if (rot_deg_max < 0.0 || trans_max < 0.0) fail(ErrorCode::kInvalidArgument, "perturbation bounds must be >= 0");
  Rng rng(seed, 0x9E27);
  const Vec3 axis = random_unit_vector(rng);
  const double angle = rng.uniform() * rot_deg_max * std::numbers::pi / 180.0;
  const Vec3 dir = random_unit_vector(rng);
  const double len = trans_max * std::cbrt(rng.uniform());
  Pose out;
  out.rotation = axis_angle(axis, angle) * gt.rotation;
  out.translation = gt.translation + len * dir;
  return out;
}

}  // namespace posematch
