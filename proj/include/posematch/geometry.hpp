#pragma once

// Rigid-transform algebra, unit-sphere normalization, pinhole projection,
// farthest point sampling and the weighted SVD (Kabsch) solver.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "posematch/error.hpp"
#include "posematch/random.hpp"

namespace posematch {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index = std::ptrdiff_t;

/// Rigid transform p' = rotation * p + translation.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Pose inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }

  /// (*this ∘ other): apply other first.
  Pose compose(const Pose& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho < tol && std::abs(rotation.determinant() - 1.0) < 10 * tol;
  }
};

/// Ordered 3D points with optional per-point descriptors (one row each).
struct PointCloud {
  Points points;
  std::optional<Matrix> descriptors;

  PointCloud() = default;
  explicit PointCloud(Points pts) : points(std::move(pts)) {}
  PointCloud(Points pts, Matrix desc) : points(std::move(pts)), descriptors(std::move(desc)) {}

  Index size() const { return points.rows(); }
  bool has_descriptors() const { return descriptors.has_value(); }

  void validate() const {
    if (points.rows() < 1) fail(ErrorCode::kDegenerateInput, "point cloud is empty");
    if (!points.allFinite()) fail(ErrorCode::kDegenerateInput, "point cloud has non-finite coordinates");
    if (descriptors && descriptors->rows() != points.rows())
      fail(ErrorCode::kShapeMismatch, "descriptor rows do not match point count");
  }
};

/// Subset of a cloud by row indices; descriptors follow their points.
inline PointCloud gather(const PointCloud& pc, std::span<const Index> idx) {
  PointCloud out;
  out.points.resize(static_cast<Index>(idx.size()), 3);
  for (Index r = 0; r < out.points.rows(); ++r) out.points.row(r) = pc.points.row(idx[r]);
  if (pc.descriptors) {
    Matrix d(static_cast<Index>(idx.size()), pc.descriptors->cols());
    for (Index r = 0; r < d.rows(); ++r) d.row(r) = pc.descriptors->row(idx[r]);
    out.descriptors = std::move(d);
  }
  return out;
}

struct NormalizationInfo {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
};

struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
};

/// Half-open pixel box [x_min, x_max) x [y_min, y_max).
struct BBox2D {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double area() const { return std::max(0.0, x_max - x_min) * std::max(0.0, y_max - y_min); }
};

// ---------------------------------------------------------------------------
// Rotation helpers

inline Mat3 axis_angle(const Vec3& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

/// Geodesic angle (radians) between two rotations.
inline double rotation_angle(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos loses precision near 0; use the skew part for small angles.
  const Mat3 rel = a.transpose() * b;
  const Vec3 w(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  return std::atan2(0.5 * w.norm(), c);
}

/// Haar-uniform random rotation from a normalized Gaussian quaternion.
inline Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

/// Random unit vector, uniform on the sphere.
inline Vec3 random_unit_vector(Rng& rng) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  while (v.norm() < 1e-12) v = Vec3(rng.normal(), rng.normal(), rng.normal());
  return v.normalized();
}

// ---------------------------------------------------------------------------
// 3x3 SVD by one-sided Jacobi rotations.

struct Svd3 {
  Mat3 u;
  Vec3 singular;  // descending
  Mat3 v;
};

namespace detail {

inline Vec3 any_orthogonal(const Vec3& a) {
  const Vec3 trial = std::abs(a.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return a.cross(trial).normalized();
}

}  // namespace detail

/// M = U diag(singular) V^T with U, V orthogonal (either may have det -1).
inline Svd3 svd3(const Mat3& m) {
  Mat3 a = m;
  Mat3 v = Mat3::Identity();
  constexpr double kEps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (std::abs(gamma) <= kEps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        const Vec3 ap = a.col(p);
        const Vec3 aq = a.col(q);
        a.col(p) = c * ap - s * aq;
        a.col(q) = s * ap + c * aq;
        const Vec3 vp = v.col(p);
        const Vec3 vq = v.col(q);
        v.col(p) = c * vp - s * vq;
        v.col(q) = s * vp + c * vq;
      }
    }
    if (!rotated) break;
  }

  std::array<int, 3> order{0, 1, 2};
  Vec3 norms(a.col(0).norm(), a.col(1).norm(), a.col(2).norm());
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return norms[i] > norms[j]; });

  Svd3 out;
  for (int k = 0; k < 3; ++k) {
    out.singular[k] = norms[order[k]];
    out.v.col(k) = v.col(order[k]);
  }
  const double tiny = std::max(out.singular[0], 1.0) * 1e-14;
  for (int k = 0; k < 3; ++k) {
    if (out.singular[k] > tiny) {
      out.u.col(k) = a.col(order[k]) / out.singular[k];
    } else if (k == 0) {
      out.u.col(0) = Vec3::UnitX();
    } else if (k == 1) {
      out.u.col(1) = detail::any_orthogonal(out.u.col(0));
    } else {
      out.u.col(2) = out.u.col(0).cross(out.u.col(1));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted rigid alignment

/// Singular values of the weighted covariance of a point set (descending).
inline Vec3 weighted_covariance_spectrum(const Points& pts, std::span<const double> w) {
  double wsum = 0.0;
  Vec3 mean = Vec3::Zero();
  for (Index i = 0; i < pts.rows(); ++i) {
    wsum += w[i];
    mean += w[i] * pts.row(i).transpose();
  }
  mean /= wsum;
  Mat3 cov = Mat3::Zero();
  for (Index i = 0; i < pts.rows(); ++i) {
    const Vec3 d = pts.row(i).transpose() - mean;
    cov += w[i] * d * d.transpose();
  }
  return svd3(cov / wsum).singular;
}

/// Proper rigid transform minimizing sum_i w_i |R src_i + t - dst_i|^2.
inline Pose kabsch_weighted(const Points& src, const Points& dst, std::span<const double> weights) {
  const Index n = src.rows();
  if (dst.rows() != n || static_cast<Index>(weights.size()) != n)
    fail(ErrorCode::kShapeMismatch, "kabsch: src, dst and weights must have equal length");
  if (n < 3) fail(ErrorCode::kDegenerateInput, "kabsch: need at least 3 correspondences");
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorCode::kDegenerateInput, "kabsch: weights must be finite and >= 0");
    wsum += w;
  }
  if (wsum <= 0.0) fail(ErrorCode::kDegenerateInput, "kabsch: all weights are zero");

  Vec3 src_mean = Vec3::Zero();
  Vec3 dst_mean = Vec3::Zero();
  for (Index i = 0; i < n; ++i) {
    src_mean += weights[i] * src.row(i).transpose();
    dst_mean += weights[i] * dst.row(i).transpose();
  }
  src_mean /= wsum;
  dst_mean /= wsum;

  Mat3 h = Mat3::Zero();
  Mat3 src_cov = Mat3::Zero();
  for (Index i = 0; i < n; ++i) {
    const Vec3 s = src.row(i).transpose() - src_mean;
    const Vec3 d = dst.row(i).transpose() - dst_mean;
    h += weights[i] * s * d.transpose();
    src_cov += weights[i] * s * s.transpose();
  }
  const Vec3 spread = svd3(src_cov / wsum).singular;
  if (!(spread[1] > 1e-12 * std::max(spread[0], 1e-300)) || spread[0] <= 0.0)
    fail(ErrorCode::kDegenerateInput, "kabsch: source points are collinear or coincident");

  const Svd3 svd = svd3(h);
  Mat3 d = Mat3::Identity();
  // Flip the direction with the smallest singular value if the solution would reflect.
  if ((svd.v * svd.u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  Pose pose;
  pose.rotation = svd.v * d * svd.u.transpose();
  pose.translation = dst_mean - pose.rotation * src_mean;
  return pose;
}

inline Pose kabsch(const Points& src, const Points& dst) {
  const std::vector<double> w(static_cast<std::size_t>(src.rows()), 1.0);
  return kabsch_weighted(src, dst, w);
}

inline double weighted_residual(const Pose& pose, const Points& src, const Points& dst, std::span<const double> w) {
  double r = 0.0;
  for (Index i = 0; i < src.rows(); ++i)
    r += w[i] * (pose.apply(src.row(i).transpose()) - dst.row(i).transpose()).squaredNorm();
  return r;
}

// ---------------------------------------------------------------------------
// Point cloud transforms

inline Points transform_points(const Pose& pose, const Points& pts) {
  Points out = pts * pose.rotation.transpose();
  out.rowwise() += pose.translation.transpose();
  return out;
}

inline PointCloud transform_points(const Pose& pose, const PointCloud& pc) {
  PointCloud out = pc;
  out.points = transform_points(pose, pc.points);
  return out;
}

/// Centroid and max distance from it.
inline NormalizationInfo bounding_sphere(const Points& pts) {
  NormalizationInfo info;
  info.center = pts.colwise().mean().transpose();
  info.radius = (pts.rowwise() - info.center.transpose()).rowwise().norm().maxCoeff();
  return info;
}

inline PointCloud normalize_to_unit_sphere(const PointCloud& pc, const NormalizationInfo& info) {
  if (!(info.radius > 0.0)) fail(ErrorCode::kDegenerateInput, "normalization radius must be positive");
  PointCloud out = pc;
  out.points = (pc.points.rowwise() - info.center.transpose()) / info.radius;
  return out;
}

inline PointCloud denormalize(const PointCloud& pc, const NormalizationInfo& info) {
  if (!(info.radius > 0.0)) fail(ErrorCode::kDegenerateInput, "normalization radius must be positive");
  PointCloud out = pc;
  out.points = (pc.points * info.radius).rowwise() + info.center.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Projection and boxes

inline BBox2D project_points_bbox(const Points& pts, const Camera& cam) {
  if (pts.rows() < 1) fail(ErrorCode::kDegenerateInput, "cannot project an empty cloud");
  double u_min = std::numeric_limits<double>::infinity();
  double v_min = u_min;
  double u_max = -u_min;
  double v_max = -u_min;
  for (Index i = 0; i < pts.rows(); ++i) {
    const double z = pts(i, 2);
    if (!(z > 0.0)) fail(ErrorCode::kBehindCamera, "point at or behind the camera plane");
    const double u = cam.fx * pts(i, 0) / z + cam.cx;
    const double v = cam.fy * pts(i, 1) / z + cam.cy;
    u_min = std::min(u_min, u);
    u_max = std::max(u_max, u);
    v_min = std::min(v_min, v);
    v_max = std::max(v_max, v);
  }
  const auto clamp_x = [&](double x) { return std::clamp(x, 0.0, static_cast<double>(cam.width)); };
  const auto clamp_y = [&](double y) { return std::clamp(y, 0.0, static_cast<double>(cam.height)); };
  return {clamp_x(u_min), clamp_y(v_min), clamp_x(u_max), clamp_y(v_max)};
}

inline double bbox_iou(const BBox2D& a, const BBox2D& b) {
  const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Farthest point sampling

/// Greedy max-min sampling from a given start; ties go to the lowest index.
inline std::vector<Index> farthest_point_sample_from(const Points& pts, Index n, Index start) {
  const Index total = pts.rows();
  if (n < 1 || n > total) fail(ErrorCode::kInvalidCount, "sample count must be in [1, N]");
  if (start < 0 || start >= total) fail(ErrorCode::kIndexOutOfRange, "FPS start index out of range");
  std::vector<Index> chosen;
  chosen.reserve(static_cast<std::size_t>(n));
  std::vector<double> min_dist(static_cast<std::size_t>(total), std::numeric_limits<double>::infinity());
  Index current = start;
  for (Index k = 0; k < n; ++k) {
    chosen.push_back(current);
    min_dist[current] = -1.0;
    const Eigen::RowVector3d c = pts.row(current);
    Index best = -1;
    double best_d = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < total; ++i) {
      double& md = min_dist[i];
      if (md < 0.0) continue;
      md = std::min(md, (pts.row(i) - c).squaredNorm());
      if (md > best_d) {
        best_d = md;
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

inline std::vector<Index> farthest_point_sample(const Points& pts, Index n, std::uint64_t seed) {
  if (n < 1 || n > pts.rows()) fail(ErrorCode::kInvalidCount, "sample count must be in [1, N]");
  Rng rng(seed, 0xF95);
  const auto start = static_cast<Index>(rng.index(static_cast<std::size_t>(pts.rows())));
  return farthest_point_sample_from(pts, n, start);
}

}  // namespace posematch
