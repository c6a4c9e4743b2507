#pragma once

// Toy fitting of the fine-stage output head on synthetic instances. The
// transformer stays frozen, so pre-projection features are computed once.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "posematch/loss.hpp"
#include "posematch/parallel.hpp"
#include "posematch/pipeline.hpp"
#include "posematch/synth.hpp"

namespace posematch {

struct ToyTrainConfig {
  Index instances = 8;
  Index points = 256;
  int steps = 100;
  double learning_rate = 0.5;
  double delta_dis = 0.15;       // label radius, normalized units
  double perturb_deg = 20.0;     // conditioning pose noise
  double perturb_trans = 0.1;
  int log_every = 10;
};

inline void to_json(nlohmann::json& j, const ToyTrainConfig& c) {
  j = {{"instances", c.instances},         {"points", c.points},       {"steps", c.steps},
       {"learning_rate", c.learning_rate}, {"delta_dis", c.delta_dis}, {"perturb_deg", c.perturb_deg},
       {"perturb_trans", c.perturb_trans}, {"log_every", c.log_every}};
}

/// Frozen inputs of the head for one instance.
struct HeadSample {
  Matrix hm, ho;
  CorrespondenceLabels labels;
};

struct HeadLoss {
  double loss = 0.0;
  Matrix grad_w;
  Matrix grad_b;
};

namespace detail {

inline Matrix normalize_rows(const Matrix& h, Vector& norms) {
  norms = h.rowwise().norm();
  Matrix f = h;
  for (Index r = 0; r < f.rows(); ++r)
    if (norms[r] > 0.0) f.row(r) /= norms[r];
  return f;
}

/// Backpropagate through row-wise L2 normalization.
inline Matrix normalize_rows_backward(const Matrix& f, const Vector& norms, const Matrix& df) {
  Matrix dh = df;
  for (Index r = 0; r < f.rows(); ++r) {
    if (!(norms[r] > 0.0)) continue;
    dh.row(r) = (df.row(r) - f.row(r) * f.row(r).dot(df.row(r))) / norms[r];
  }
  return dh;
}

}  // namespace detail

/// Matching loss on logits A / tau with A built from the projected head output; gradients for w and b.
inline HeadLoss head_loss(const HeadSample& s, const Matrix& w, const Matrix& b, double tau) {
  Matrix hm = s.hm * w;
  hm.rowwise() += b.row(0);
  Matrix ho = s.ho * w;
  ho.rowwise() += b.row(0);
  Vector nm, no;
  const Matrix fm = detail::normalize_rows(hm, nm);
  const Matrix fo = detail::normalize_rows(ho, no);
  const LossResult l = matching_loss(AssignmentMatrix{fm * fo.transpose() / tau}, s.labels);
  const Matrix g = l.grad / tau;
  const Matrix dhm = detail::normalize_rows_backward(fm, nm, g * fo);
  const Matrix dho = detail::normalize_rows_backward(fo, no, g.transpose() * fm);
  HeadLoss out;
  out.loss = l.loss;
  out.grad_w = s.hm.transpose() * dhm + s.ho.transpose() * dho;
  out.grad_b = dhm.colwise().sum() + dho.colwise().sum();
  return out;
}

inline std::vector<HeadSample> head_samples(const ModelWeights& w, const PipelineConfig& base, const SuiteConfig& suite,
                                            const ToyTrainConfig& t, std::uint64_t seed) {
  PipelineConfig p = base;
  p.fine_points = t.points;
  p.fine_sparse_points = std::min(p.fine_sparse_points, t.points);
  std::vector<HeadSample> out(static_cast<std::size_t>(t.instances));
  parallel_for(t.instances, [&](Index k) {
    const SyntheticInstance inst = suite_instance(suite, seed, k);
    const NormalizedFrames frames{inst.proposal.cloud.points.colwise().mean().transpose(), inst.object.info.center,
                                  inst.object.info.radius};
    const PointCloud pm =
        normalize_to_unit_sphere(inst.proposal.cloud, NormalizationInfo{frames.proposal_center, frames.radius});
    const PointCloud po = normalize_to_unit_sphere(inst.object.cloud, inst.object.info);
    const Pose gt = reported_to_internal(inst.gt, frames);
    const Pose init = perturb_gt_pose(gt, t.perturb_deg, t.perturb_trans, derive_seed(inst.seed, 31));
    FineFeatures f = fine_features(pm, po, init, w, p);
    HeadSample& s = out[static_cast<std::size_t>(k)];
    s.labels = correspondence_labels(f.dense_m.points, f.dense_o.points, gt, t.delta_dis);
    s.hm = std::move(f.hm);
    s.ho = std::move(f.ho);
  });
  return out;
}

struct ToyTrainResult {
  ModelWeights weights;
  std::vector<double> loss_curve;  // mean loss before step 0, every log_every steps, and after the last step
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Full-batch gradient descent on fine/out/{w,b}.
inline ToyTrainResult train_toy(const ModelWeights& w0, const PipelineConfig& base, const SuiteConfig& suite,
                                const ToyTrainConfig& t, std::uint64_t seed) {
  if (t.instances < 1 || t.points < 3 || t.steps < 0 || !(t.learning_rate > 0.0))
    fail(ErrorCode::kInvalidArgument, "train-toy needs instances >= 1, points >= 3, steps >= 0, learning_rate > 0");
  const std::vector<HeadSample> samples = head_samples(w0, base, suite, t, seed);
  Matrix w = w0.get("fine/out/w");
  Matrix b = w0.get("fine/out/b");
  auto evaluate = [&](bool with_grad, Matrix* gw, Matrix* gb) {
    std::vector<HeadLoss> parts(samples.size());
    parallel_for(static_cast<Index>(samples.size()),
                 [&](Index k) { parts[static_cast<std::size_t>(k)] = head_loss(samples[k], w, b, base.tau); });
    double loss = 0.0;
    if (with_grad) {
      gw->setZero(w.rows(), w.cols());
      gb->setZero(b.rows(), b.cols());
    }
    const double inv = 1.0 / static_cast<double>(parts.size());
    for (const auto& p : parts) {
      loss += p.loss * inv;
      if (with_grad) {
        *gw += p.grad_w * inv;
        *gb += p.grad_b * inv;
      }
    }
    return loss;
  };
  ToyTrainResult out{w0, {}, 0.0, 0.0};
  Matrix gw, gb;
  for (int step = 0; step < t.steps; ++step) {
    const double loss = evaluate(true, &gw, &gb);
    if (step == 0) out.initial_loss = loss;
    if (t.log_every > 0 && step % t.log_every == 0) out.loss_curve.push_back(loss);
    w -= t.learning_rate * gw;
    b -= t.learning_rate * gb;
  }
  out.final_loss = evaluate(false, nullptr, nullptr);
  if (t.steps == 0) out.initial_loss = out.final_loss;
  out.loss_curve.push_back(out.final_loss);
  out.weights = w0.with("fine/out/w", w).with("fine/out/b", b);
  return out;
}

}  // namespace posematch
