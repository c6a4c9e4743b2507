#pragma once

// Finite-difference check of the matching loss gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "posematch/loss.hpp"

namespace posematch {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  Index entries = 0;
};

inline constexpr double kGradCheckStep = 1e-3;

/// Fourth-order central differences; relative error |a - n| / max(|a|, |n|, floor).
inline GradCheckReport gradcheck_matching_loss(const AssignmentMatrix& a, const CorrespondenceLabels& labels,
                                               double h = kGradCheckStep, double floor = 1e-6) {
  const LossResult analytic = matching_loss(a, labels);
  GradCheckReport rep;
  AssignmentMatrix probe = a;
  auto loss_at = [&](Index i, Index j, double x) {
    probe.values(i, j) = x;
    return matching_loss(probe, labels).loss;
  };
  for (Index i = 0; i < a.values.rows(); ++i)
    for (Index j = 0; j < a.values.cols(); ++j) {
      const double orig = a.values(i, j);
      const double numeric = (8.0 * (loss_at(i, j, orig + h) - loss_at(i, j, orig - h)) -
                              (loss_at(i, j, orig + 2 * h) - loss_at(i, j, orig - 2 * h))) /
                             (12.0 * h);
      probe.values(i, j) = orig;
      const double g = analytic.grad(i, j);
      const double abs_err = std::abs(g - numeric);
      rep.max_absolute_error = std::max(rep.max_absolute_error, abs_err);
      rep.max_relative_error =
          std::max(rep.max_relative_error, abs_err / std::max({std::abs(g), std::abs(numeric), floor}));
      ++rep.entries;
    }
  return rep;
}

/// Seeded random logits and labels of shape (rows+1) x (cols+1).
inline std::pair<AssignmentMatrix, CorrespondenceLabels> random_loss_instance(Index rows, Index cols,
                                                                              std::uint64_t seed) {
  Rng rng(seed, 0x6C055);
  AssignmentMatrix a{Matrix::NullaryExpr(rows + 1, cols + 1, [&] { return 2.0 * rng.normal(); })};
  CorrespondenceLabels labels;
  for (Index i = 0; i < rows; ++i) labels.y_m.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(cols + 1))));
  for (Index j = 0; j < cols; ++j) labels.y_o.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(rows + 1))));
  return {std::move(a), std::move(labels)};
}

}  // namespace posematch
