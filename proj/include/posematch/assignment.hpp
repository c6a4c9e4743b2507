#pragma once

// Background-token assignment: attention matrix, dual-softmax soft assignment,
// foreground masks, match probabilities, triplet pose hypotheses and their
// selection. A Sinkhorn optimal-transport baseline with a slack row/column is
// provided for comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "posematch/geometry.hpp"

namespace posematch {

/// (N_m+1) x (N_o+1) matrix; row 0 and column 0 belong to the background tokens.
struct AssignmentMatrix {
  Matrix values;

  Index point_rows() const { return values.rows() - 1; }
  Index point_cols() const { return values.cols() - 1; }
};

struct ForegroundMasks {
  std::vector<std::uint8_t> mask_m;
  std::vector<std::uint8_t> mask_o;

  Index count_m() const { return std::count(mask_m.begin(), mask_m.end(), 1); }
  Index count_o() const { return std::count(mask_o.begin(), mask_o.end(), 1); }
};

/// N_m x N_o nonnegative pair weights; background rows/columns are zero.
struct MatchProbabilities {
  Matrix values;

  /// Copy scaled to unit total mass.
  Matrix normalized() const { return values / values.sum(); }
};

struct PoseHypothesis {
  Pose pose;
  double mean_pair_distance = 0.0;
  double s_hyp = 0.0;
};

inline AssignmentMatrix attention_matrix(const Matrix& feats_m, const Matrix& feats_o) {
  if (feats_m.cols() != feats_o.cols()) fail(ErrorCode::kShapeMismatch, "feature widths differ");
  if (feats_m.rows() < 1 || feats_o.rows() < 1) fail(ErrorCode::kShapeMismatch, "feature blocks need a background row");
  return {feats_m * feats_o.transpose()};
}

namespace detail {

inline void softmax_rows_inplace(Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

inline double log_sum_exp(const double* begin, Index n, Index stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < n; ++k) mx = std::max(mx, begin[k * stride]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (Index k = 0; k < n; ++k) s += std::exp(begin[k * stride] - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Elementwise product of row-wise and column-wise softmax of A / tau.
inline AssignmentMatrix soft_assignment(const AssignmentMatrix& a, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorCode::kInvalidTemperature, "temperature must be positive");
  Matrix scaled = a.values / tau;
  Matrix row = scaled;
  detail::softmax_rows_inplace(row);
  Matrix col = scaled.transpose();
  detail::softmax_rows_inplace(col);
  return {row.cwiseProduct(col.transpose())};
}

/// A point is background when its row (column) maximum of A~ is strictly in the background slot.
inline ForegroundMasks foreground_masks(const AssignmentMatrix& soft) {
  const Matrix& s = soft.values;
  ForegroundMasks masks;
  masks.mask_m.assign(static_cast<std::size_t>(s.rows() - 1), 0);
  masks.mask_o.assign(static_cast<std::size_t>(s.cols() - 1), 0);
  for (Index i = 1; i < s.rows(); ++i) {
    const double fg = s.cols() > 1 ? s.row(i).tail(s.cols() - 1).maxCoeff() : -1.0;
    masks.mask_m[i - 1] = fg >= s(i, 0) ? 1 : 0;
  }
  for (Index j = 1; j < s.cols(); ++j) {
    const double fg = s.rows() > 1 ? s.col(j).tail(s.rows() - 1).maxCoeff() : -1.0;
    masks.mask_o[j - 1] = fg >= s(0, j) ? 1 : 0;
  }
  return masks;
}

/// P = M_m * (A~[1:,1:])^gamma * M_o^T, unnormalized.
inline MatchProbabilities match_probabilities(const AssignmentMatrix& soft, const ForegroundMasks& masks, double gamma) {
  if (!(gamma > 0.0)) fail(ErrorCode::kInvalidArgument, "gamma must be positive");
  const Index nm = soft.point_rows();
  const Index no = soft.point_cols();
  if (static_cast<Index>(masks.mask_m.size()) != nm || static_cast<Index>(masks.mask_o.size()) != no)
    fail(ErrorCode::kShapeMismatch, "mask sizes do not match the assignment matrix");
  MatchProbabilities p{Matrix::Zero(nm, no)};
  for (Index i = 0; i < nm; ++i) {
    if (!masks.mask_m[i]) continue;
    for (Index j = 0; j < no; ++j) {
      if (!masks.mask_o[j]) continue;
      const double v = soft.values(i + 1, j + 1);
      p.values(i, j) = gamma == 1.0 ? v : std::pow(v, gamma);
    }
  }
  if (!(p.values.sum() > 0.0)) fail(ErrorCode::kAllBackground, "no foreground pair has positive probability");
  return p;
}

/// Draws (row, col) pairs with probability proportional to a nonnegative matrix.
class PairSampler {
 public:
  explicit PairSampler(const Matrix& weights) : cols_(weights.cols()) {
    cdf_.resize(static_cast<std::size_t>(weights.size()));
    double acc = 0.0;
    for (Index i = 0; i < weights.rows(); ++i)
      for (Index j = 0; j < weights.cols(); ++j) {
        const double w = weights(i, j);
        if (w > 0.0) {
          acc += w;
          ++positive_;
        }
        cdf_[static_cast<std::size_t>(i * cols_ + j)] = acc;
      }
    total_ = acc;
  }

  Index positive_pairs() const { return positive_; }

  std::pair<Index, Index> draw(Rng& rng) const {
    const double u = rng.uniform() * total_;
    // upper_bound never lands on a zero-weight cell: it shares its predecessor's cumulative value.
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) it = std::lower_bound(cdf_.begin(), cdf_.end(), total_);
    const auto flat = static_cast<Index>(it - cdf_.begin());
    return {flat / cols_, flat % cols_};
  }

 private:
  std::vector<double> cdf_;
  Index cols_ = 0;
  Index positive_ = 0;
  double total_ = 0.0;
};

struct HypothesisConfig {
  Index n_hyp = 6000;
  Index keep = 300;
  double collinearity_threshold = 1e-9;
  int retry_cap = 1000;
  double epsilon = 1e-6;
};

namespace detail {

inline bool triplet_is_degenerate(const Points& tri, double threshold) {
  const std::array<double, 3> w{1.0, 1.0, 1.0};
  // Three points always span at most a plane, so the second singular value decides collinearity.
  return weighted_covariance_spectrum(tri, w)[1] < threshold;
}

}  // namespace detail

/// Triplets of pairs drawn from P, each solved by Kabsch. Poses map pc_m into pc_o.
inline std::vector<PoseHypothesis> sample_pose_hypotheses(const MatchProbabilities& p, const Points& pc_m,
                                                          const Points& pc_o, Index n_hyp, std::uint64_t seed,
                                                          const HypothesisConfig& cfg = {}) {
  if (p.values.rows() != pc_m.rows() || p.values.cols() != pc_o.rows())
    fail(ErrorCode::kShapeMismatch, "probability matrix does not match the point sets");
  std::vector<PoseHypothesis> hyps;
  if (n_hyp <= 0) return hyps;
  const PairSampler sampler(p.values);
  if (sampler.positive_pairs() < 3)
    fail(ErrorCode::kInsufficientCorrespondence, "fewer than 3 foreground pairs with positive probability");
  Rng rng(seed, 0x7819);
  hyps.reserve(static_cast<std::size_t>(n_hyp));
  Points src(3, 3), dst(3, 3);
  for (Index h = 0; h < n_hyp; ++h) {
    bool ok = false;
    for (int attempt = 0; attempt <= cfg.retry_cap && !ok; ++attempt) {
      for (int k = 0; k < 3; ++k) {
        const auto [i, j] = sampler.draw(rng);
        src.row(k) = pc_m.row(i);
        dst.row(k) = pc_o.row(j);
      }
      ok = !detail::triplet_is_degenerate(src, cfg.collinearity_threshold) &&
           !detail::triplet_is_degenerate(dst, cfg.collinearity_threshold);
    }
    if (!ok) fail(ErrorCode::kRetryExhausted, "could not draw a non-collinear triplet");
    PoseHypothesis hyp;
    hyp.pose = kabsch(src, dst);
    double d = 0.0;
    for (int k = 0; k < 3; ++k) d += (hyp.pose.apply(src.row(k).transpose()) - dst.row(k).transpose()).norm();
    hyp.mean_pair_distance = d / 3.0;
    hyps.push_back(hyp);
  }
  return hyps;
}

/// N_m / (eps + sum over pc_m of the distance to the nearest pc_o point after inverse-mapping pc_o).
inline double hypothesis_score(const Pose& pose, const Points& pc_m, const Points& pc_o, double epsilon = 1e-6) {
  // |R^T (p_o - t) - p_m| equals |p_o - (R p_m + t)| because R is orthonormal.
  const Points moved = transform_points(pose, pc_m);
  double total = 0.0;
  for (Index i = 0; i < moved.rows(); ++i) {
    const Eigen::RowVector3d q = moved.row(i);
    total += std::sqrt((pc_o.rowwise() - q).rowwise().squaredNorm().minCoeff());
  }
  return static_cast<double>(pc_m.rows()) / (epsilon + total);
}

struct SelectedPose {
  Pose pose;
  double s_hyp = 0.0;
  std::size_t index = 0;  // into the input hypothesis list
};

/// Keep the hypotheses with the smallest pair distance and return the one with the highest s_hyp.
inline SelectedPose score_and_select_pose(std::vector<PoseHypothesis>& hyps, const Points& pc_m, const Points& pc_o,
                                          Index keep, double epsilon = 1e-6) {
  if (hyps.empty()) fail(ErrorCode::kEmptyHypotheses, "no pose hypotheses to select from");
  std::vector<std::size_t> order(hyps.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return hyps[a].mean_pair_distance < hyps[b].mean_pair_distance; });
  const auto kept = std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max<Index>(keep, 1)));
  SelectedPose best;
  best.s_hyp = -1.0;
  for (std::size_t k = 0; k < kept; ++k) {
    PoseHypothesis& h = hyps[order[k]];
    h.s_hyp = hypothesis_score(h.pose, pc_m, pc_o, epsilon);
    if (h.s_hyp > best.s_hyp || (h.s_hyp == best.s_hyp && order[k] < best.index)) {
      best.pose = h.pose;
      best.s_hyp = h.s_hyp;
      best.index = order[k];
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Sinkhorn baseline

struct SinkhornResult {
  AssignmentMatrix assignment;
  bool converged = false;
  double marginal_error = 0.0;
};

/// Entropic OT in log space. Row 0 / column 0 act as slack bins absorbing unmatched mass:
/// each point row and column carries unit mass, the slack row N_o and the slack column N_m.
inline SinkhornResult sinkhorn_assignment(const AssignmentMatrix& a, int iterations, double epsilon,
                                          double tolerance = 1e-6) {
  if (iterations < 1) fail(ErrorCode::kInvalidCount, "Sinkhorn needs at least one iteration");
  if (!(epsilon > 0.0)) fail(ErrorCode::kInvalidTemperature, "entropic regularization must be positive");
  const Index rows = a.values.rows();
  const Index cols = a.values.cols();
  const Index nm = rows - 1;
  const Index no = cols - 1;
  const Matrix z = a.values / epsilon;
  Vector log_mu = Vector::Zero(rows);
  Vector log_nu = Vector::Zero(cols);
  log_mu[0] = no > 0 ? std::log(static_cast<double>(no)) : -std::numeric_limits<double>::infinity();
  log_nu[0] = nm > 0 ? std::log(static_cast<double>(nm)) : -std::numeric_limits<double>::infinity();
  Vector u = Vector::Zero(rows);
  Vector v = Vector::Zero(cols);
  Matrix zt = z.transpose();
  std::vector<double> buf(static_cast<std::size_t>(std::max(rows, cols)));
  for (int it = 0; it < iterations; ++it) {
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) buf[j] = z(i, j) + v[j];
      u[i] = log_mu[i] - detail::log_sum_exp(buf.data(), cols, 1);
    }
    for (Index j = 0; j < cols; ++j) {
      for (Index i = 0; i < rows; ++i) buf[i] = zt(j, i) + u[i];
      v[j] = log_nu[j] - detail::log_sum_exp(buf.data(), rows, 1);
    }
  }
  SinkhornResult out;
  out.assignment.values = ((z.colwise() + u).rowwise() + v.transpose()).array().exp();
  const Matrix& p = out.assignment.values;
  double err = 0.0;
  for (Index i = 1; i < rows; ++i) err = std::max(err, std::abs(p.row(i).sum() - 1.0));
  for (Index j = 1; j < cols; ++j) err = std::max(err, std::abs(p.col(j).sum() - 1.0));
  out.marginal_error = err;
  out.converged = err < tolerance;
  return out;
}

/// Row-wise hard matching: -1 for background, otherwise the matched column (0-based point index).
inline std::vector<Index> hard_matches(const AssignmentMatrix& soft) {
  std::vector<Index> out(static_cast<std::size_t>(soft.point_rows()), -1);
  for (Index i = 1; i < soft.values.rows(); ++i) {
    if (soft.values.cols() < 2) continue;
    Index best = 0;
    soft.values.row(i).tail(soft.values.cols() - 1).maxCoeff(&best);
    // Ties with the background slot resolve to the foreground match.
    if (soft.values(i, best + 1) >= soft.values(i, 0)) out[i - 1] = best;
  }
  return out;
}

}  // namespace posematch
