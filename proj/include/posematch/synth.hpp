#pragma once

// Seeded synthetic objects and scenes, oracle descriptors and pose-error metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "posematch/geometry.hpp"

namespace posematch {

enum class ObjectFamily { kSphereCapUnion, kBoxCluster, kRandomBlob };

inline std::string family_name(ObjectFamily f) {
  switch (f) {
    case ObjectFamily::kSphereCapUnion: return "sphere-cap-union";
    case ObjectFamily::kBoxCluster: return "box-cluster";
    case ObjectFamily::kRandomBlob: return "random-blob";
  }
  return "?";
}

inline ObjectFamily parse_family(const std::string& s) {
  if (s == "sphere-cap-union") return ObjectFamily::kSphereCapUnion;
  if (s == "box-cluster") return ObjectFamily::kBoxCluster;
  if (s == "random-blob") return ObjectFamily::kRandomBlob;
  fail(ErrorCode::kInvalidArgument, "unknown object family '" + s + "'");
}

struct SyntheticObject {
  PointCloud cloud;
  NormalizationInfo info;
};

namespace detail {

inline Points sphere_caps(Index n, Rng& rng) {
  Points p(n, 3);
  for (Index i = 0; i < n;) {
    const Vec3 u = random_unit_vector(rng);
    if (std::abs(u.z()) < 0.3) continue;
    p.row(i++) = u.transpose();
  }
  return p;
}

inline Points box_cluster(Index n, Rng& rng) {
  const int boxes = 3 + static_cast<int>(rng.index(3));
  std::vector<Vec3> lo, size;
  std::vector<double> area_cdf;
  double total = 0.0;
  for (int b = 0; b < boxes; ++b) {
    const Vec3 s(rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0));
    const Vec3 c(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6));
    lo.push_back(c - 0.5 * s);
    size.push_back(s);
    total += 2.0 * (s.x() * s.y() + s.y() * s.z() + s.x() * s.z());
    area_cdf.push_back(total);
  }
  Points p(n, 3);
  for (Index i = 0; i < n; ++i) {
    const double u = rng.uniform() * total;
    const auto b = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(std::upper_bound(area_cdf.begin(), area_cdf.end(), u) - area_cdf.begin(), boxes - 1));
    const Vec3& s = size[b];
    const double faces[3] = {s.y() * s.z(), s.x() * s.z(), s.x() * s.y()};
    const double f = rng.uniform() * (faces[0] + faces[1] + faces[2]);
    const int axis = f < faces[0] ? 0 : (f < faces[0] + faces[1] ? 1 : 2);
    Vec3 q(rng.uniform(), rng.uniform(), rng.uniform());
    q[axis] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    p.row(i) = (lo[b] + q.cwiseProduct(s)).transpose();
  }
  return p;
}

inline Points random_blob(Index n, Rng& rng) {
  const int bumps = 6;
  std::vector<Vec3> dirs;
  std::vector<double> amp, sharp;
  for (int k = 0; k < bumps; ++k) {
    dirs.push_back(random_unit_vector(rng));
    amp.push_back(rng.uniform(-0.3, 0.6));
    sharp.push_back(rng.uniform(3.0, 10.0));
  }
  Points p(n, 3);
  for (Index i = 0; i < n; ++i) {
    const Vec3 u = random_unit_vector(rng);
    double r = 1.0;
    for (int k = 0; k < bumps; ++k) r += amp[k] * std::exp(sharp[k] * (u.dot(dirs[k]) - 1.0));
    p.row(i) = (r * u).transpose();
  }
  return p;
}

}  // namespace detail

/// Seeded object cloud, centered on its centroid, with bounding-sphere radius `scale`.
inline SyntheticObject generate_object(ObjectFamily family, Index n_points, std::uint64_t seed, double scale = 0.1) {
  if (n_points < 64) fail(ErrorCode::kInvalidCount, "objects need at least 64 points");
  Rng rng(seed, 0x0B1EC7);
  Points p;
  switch (family) {
    case ObjectFamily::kSphereCapUnion: p = detail::sphere_caps(n_points, rng); break;
    case ObjectFamily::kBoxCluster: p = detail::box_cluster(n_points, rng); break;
    case ObjectFamily::kRandomBlob: p = detail::random_blob(n_points, rng); break;
  }
  if (family != ObjectFamily::kSphereCapUnion) p.rowwise() -= p.colwise().mean();
  const double r = bounding_sphere(p).radius;
  p *= scale / r;
  SyntheticObject obj;
  obj.cloud.points = std::move(p);
  obj.info = bounding_sphere(obj.cloud.points);
  return obj;
}

struct ProposalParams {
  double occlusion = 0.3;
  double noise_sigma = 0.01;  // fraction of the model radius
  double outlier_frac = 0.05;
};

inline void to_json(nlohmann::json& j, const ProposalParams& p) {
  j = {{"occlusion", p.occlusion}, {"noise_sigma", p.noise_sigma}, {"outlier_frac", p.outlier_frac}};
}

struct SyntheticProposal {
  PointCloud cloud;
  std::vector<Index> source;  // model row of each point, -1 for outliers
};

/// Model placed by gt, cut by a random half-space, jittered and padded with outliers.
inline SyntheticProposal make_proposal(const PointCloud& model, const Pose& gt, const ProposalParams& params,
                                       std::uint64_t seed) {
  for (double f : {params.occlusion, params.outlier_frac})
    if (!(f >= 0.0 && f < 1.0)) fail(ErrorCode::kInvalidArgument, "fractions must lie in [0, 1)");
  if (params.noise_sigma < 0.0) fail(ErrorCode::kInvalidArgument, "noise sigma must be >= 0");
  const Index n = model.size();
  const NormalizationInfo info = bounding_sphere(model.points);
  const Points placed = transform_points(gt, model.points);
  Rng rng(seed, 0x9209);

  const Vec3 dir = random_unit_vector(rng);
  const Index removed = static_cast<Index>(std::floor(params.occlusion * static_cast<double>(n) + 1e-9));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const Eigen::VectorXd proj = placed * dir;
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return proj[a] < proj[b]; });
  std::vector<Index> kept(order.begin(), order.end() - removed);
  std::sort(kept.begin(), kept.end());

  const Index outliers = static_cast<Index>(std::lround(params.outlier_frac * static_cast<double>(n)));
  SyntheticProposal out;
  out.cloud.points.resize(static_cast<Index>(kept.size()) + outliers, 3);
  const double sigma = params.noise_sigma * info.radius;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    Eigen::RowVector3d p = placed.row(kept[k]);
    if (sigma > 0.0) p += Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal()) * sigma;
    out.cloud.points.row(static_cast<Index>(k)) = p;
    out.source.push_back(kept[k]);
  }
  const Vec3 center = gt.apply(info.center);
  for (Index k = 0; k < outliers; ++k) {
    const Vec3 p = center + random_unit_vector(rng) * info.radius * std::cbrt(rng.uniform());
    out.cloud.points.row(static_cast<Index>(kept.size()) + k) = p.transpose();
    out.source.push_back(-1);
  }
  return out;
}

/// Two-layer random feature map of normalized canonical coordinates.
class OracleFeatureMap {
 public:
  OracleFeatureMap(Index channels, std::uint64_t seed, Index hidden = 256, double frequency = 8.0)
      : w1_(hidden, 3), b1_(hidden), w2_(channels, hidden) {
    if (channels < 8) fail(ErrorCode::kInvalidArgument, "descriptor width must be >= 8");
    Rng rng(seed, 0xDE5C);
    for (Index i = 0; i < w1_.size(); ++i) w1_.data()[i] = frequency * rng.normal();
    for (Index i = 0; i < b1_.size(); ++i) b1_[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double s = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (Index i = 0; i < w2_.size(); ++i) w2_.data()[i] = s * rng.normal();
  }

  /// Unit-norm descriptors of canonical points (already normalized to the unit sphere).
  Matrix operator()(const Points& canonical) const {
    Matrix out(canonical.rows(), w2_.rows());
    for (Index i = 0; i < canonical.rows(); ++i) {
      const Eigen::VectorXd h = ((w1_ * canonical.row(i).transpose()) + b1_).array().cos();
      const Eigen::VectorXd d = w2_ * h;
      out.row(i) = d.transpose() / d.norm();
    }
    return out;
  }

 private:
  Eigen::MatrixXd w1_;
  Eigen::VectorXd b1_;
  Eigen::MatrixXd w2_;
};

struct OracleDescriptors {
  Matrix object;    // one row per model point
  Matrix proposal;  // one row per proposal point
};

/// Inliers take the descriptor of their gt pre-image plus N(0, corruption^2 / C) noise per channel;
/// outliers get random unit-scale descriptors.
inline OracleDescriptors oracle_descriptors(const PointCloud& model, const SyntheticProposal& proposal, const Pose& gt,
                                            Index channels, double corruption, std::uint64_t seed) {
  if (corruption < 0.0) fail(ErrorCode::kInvalidArgument, "corruption must be >= 0");
  const NormalizationInfo info = bounding_sphere(model.points);
  const OracleFeatureMap map(channels, seed);
  OracleDescriptors out;
  out.object = map(normalize_to_unit_sphere(PointCloud{model.points, {}}, info).points);

  const Points canonical = transform_points(gt.inverse(), proposal.cloud.points);
  out.proposal = map(normalize_to_unit_sphere(PointCloud{canonical, {}}, info).points);
  Rng rng(seed, 0xC0DE);
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  for (Index i = 0; i < out.proposal.rows(); ++i) {
    if (proposal.source[static_cast<std::size_t>(i)] < 0) {
      for (Index c = 0; c < channels; ++c) out.proposal(i, c) = s * rng.normal();
    } else if (corruption > 0.0) {
      for (Index c = 0; c < channels; ++c) out.proposal(i, c) += corruption * s * rng.normal();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenes

struct SyntheticInstance {
  ObjectFamily family = ObjectFamily::kBoxCluster;
  std::uint64_t seed = 0;
  SyntheticObject object;  // cloud carries descriptors
  Pose gt;                 // model -> camera
  SyntheticProposal proposal;  // cloud carries descriptors
  ProposalParams params;
  double corruption = 0.1;
  Index descriptor_dim = 64;
};

struct SuiteConfig {
  Index instances = 100;
  Index model_points = 4096;
  ProposalParams params;
  double corruption = 0.1;
  Index descriptor_dim = 64;
  std::vector<ObjectFamily> families{ObjectFamily::kBoxCluster, ObjectFamily::kRandomBlob};
};

inline void to_json(nlohmann::json& j, const SuiteConfig& c) {
  std::vector<std::string> fam;
  for (auto f : c.families) fam.push_back(family_name(f));
  j = {{"instances", c.instances},   {"model_points", c.model_points},     {"proposal", c.params},
       {"corruption", c.corruption}, {"descriptor_dim", c.descriptor_dim}, {"families", fam}};
}

/// Random rotation, object 0.5 to 1.0 units in front of the camera.
inline Pose random_scene_pose(Rng& rng) {
  Pose p;
  p.rotation = random_rotation(rng);
  p.translation = Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.5, 1.0));
  return p;
}

inline SyntheticInstance make_instance(ObjectFamily family, Index model_points, const ProposalParams& params,
                                       double corruption, Index descriptor_dim, std::uint64_t seed) {
  SyntheticInstance inst;
  inst.family = family;
  inst.seed = seed;
  inst.params = params;
  inst.corruption = corruption;
  inst.descriptor_dim = descriptor_dim;
  inst.object = generate_object(family, model_points, derive_seed(seed, 1));
  Rng rng(seed, 2);
  inst.gt = random_scene_pose(rng);
  inst.proposal = make_proposal(inst.object.cloud, inst.gt, params, derive_seed(seed, 3));
  OracleDescriptors d = oracle_descriptors(inst.object.cloud, inst.proposal, inst.gt, descriptor_dim, corruption,
                                           derive_seed(seed, 4));
  inst.object.cloud.descriptors = std::move(d.object);
  inst.proposal.cloud.descriptors = std::move(d.proposal);
  return inst;
}

/// Instance k of a suite; families cycle in order.
inline SyntheticInstance suite_instance(const SuiteConfig& cfg, std::uint64_t seed, Index k) {
  const ObjectFamily f = cfg.families[static_cast<std::size_t>(k) % cfg.families.size()];
  return make_instance(f, cfg.model_points, cfg.params, cfg.corruption, cfg.descriptor_dim,
                       derive_seed(seed, static_cast<std::uint64_t>(k)));
}

// ---------------------------------------------------------------------------
// Metrics

struct EvalRow {
  double rotation_error_deg = 0.0;
  double translation_error = 0.0;  // fraction of model radius
  double add = 0.0;
  double add_s = 0.0;
  bool symmetric = false;

  double primary() const { return symmetric ? add_s : add; }
};

inline void to_json(nlohmann::json& j, const EvalRow& r) {
  j = {{"rotation_error_deg", r.rotation_error_deg},
       {"translation_error", r.translation_error},
       {"add", r.add},
       {"add_s", r.add_s},
       {"symmetric", r.symmetric}};
}

inline EvalRow evaluate_pose(const Pose& estimate, const Pose& gt, const PointCloud& model, bool symmetric) {
  const double radius = bounding_sphere(model.points).radius;
  const Points a = transform_points(estimate, model.points);
  const Points b = transform_points(gt, model.points);
  EvalRow row;
  row.symmetric = symmetric;
  row.rotation_error_deg = rotation_angle(estimate.rotation, gt.rotation) * 180.0 / std::numbers::pi;
  row.translation_error = (estimate.translation - gt.translation).norm() / radius;
  row.add = (a - b).rowwise().norm().mean() / radius;
  double s = 0.0;
  for (Index i = 0; i < a.rows(); ++i) s += std::sqrt((b.rowwise() - a.row(i)).rowwise().squaredNorm().minCoeff());
  row.add_s = std::min(s / static_cast<double>(a.rows()) / radius, row.add);
  return row;
}

struct EvalReport {
  std::vector<EvalRow> rows;

  /// Fraction of rows with rotation error < rot_deg and translation error < trans.
  double pose_recall(double rot_deg = 5.0, double trans = 0.05) const {
    if (rows.empty()) return 0.0;
    Index hit = 0;
    for (const auto& r : rows) hit += (r.rotation_error_deg < rot_deg && r.translation_error < trans) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(rows.size());
  }

  /// Fraction of rows whose ADD (ADD-S for symmetric objects) is below the threshold.
  double add_recall(double threshold) const {
    if (rows.empty()) return 0.0;
    Index hit = 0;
    for (const auto& r : rows) hit += r.primary() < threshold ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(rows.size());
  }

  double mean_add() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.add;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }

  nlohmann::json aggregates() const {
    nlohmann::json j;
    j["instances"] = rows.size();
    j["pose_recall_5deg_5pct"] = pose_recall();
    j["mean_add"] = mean_add();
    double madd_s = 0.0, mrot = 0.0, mtr = 0.0;
    for (const auto& r : rows) {
      madd_s += r.add_s;
      mrot += r.rotation_error_deg;
      mtr += r.translation_error;
    }
    const double n = std::max<double>(1.0, static_cast<double>(rows.size()));
    j["mean_add_s"] = madd_s / n;
    j["mean_rotation_error_deg"] = mrot / n;
    j["mean_translation_error"] = mtr / n;
    for (double t : {0.02, 0.05, 0.1, 0.2}) j["add_recall"][std::to_string(t).substr(0, 4)] = add_recall(t);
    return j;
  }
};

}  // namespace posematch
