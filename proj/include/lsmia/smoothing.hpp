#pragma once

// Generalized label smoothing with smoothing factor alpha in (-inf, 1].
//
//   y_ls = (1 - alpha) * onehot(c) + alpha / C
//
// alpha > 0 is conventional smoothing, alpha = 0 hard labels, alpha < 0
// negative smoothing (targets leave the simplex but still sum to 1).

#include "lsmia/core.hpp"

#include <algorithm>
#include <cmath>

namespace lsmia {

template <typename Scalar>
struct SoftTarget {
  VectorX<Scalar> values;
  Scalar alpha{0};
  Index hard_label{0};

  Index num_classes() const { return values.size(); }
};

/// Smoothing factor as a function of the epoch: held at zero for
/// `warmup_epochs`, linearly ramped to `target_alpha` over `ramp_epochs`,
/// constant afterwards.
struct SmoothingSchedule {
  double target_alpha = 0.0;
  int warmup_epochs = 0;
  int ramp_epochs = 0;
};

template <typename Scalar>
struct SaturationThresholds {
  Scalar target_threshold;
  Scalar other_threshold;
};

template <typename Scalar>
SoftTarget<Scalar> smooth_labels(Index hard_label, Scalar alpha, Index num_classes) {
  require(num_classes >= 2, "smooth_labels: num_classes must be >= 2");
  require(alpha <= Scalar(1), "smooth_labels: alpha must be <= 1");
  require(hard_label >= 0 && hard_label < num_classes, "smooth_labels: label out of range");
  SoftTarget<Scalar> t;
  t.alpha = alpha;
  t.hard_label = hard_label;
  const Scalar off = alpha / Scalar(num_classes);
  t.values = VectorX<Scalar>::Constant(num_classes, off);
  t.values(hard_label) = Scalar(1) - alpha + off;
  return t;
}

/// Max-subtracted softmax of a logit vector.
template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0 || !logits.allFinite()) throw NumericError("softmax: non-finite or empty logits");
  const Scalar shift = logits.maxCoeff();
  VectorX<Scalar> e = (logits.derived().array() - shift).exp().matrix();
  return e / e.sum();
}

/// Row-wise softmax of an N x C logit matrix.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (!logits.allFinite()) throw NumericError("softmax: non-finite logits");
  MatrixX<Scalar> e = (logits.derived().colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  return e.array().colwise() / e.rowwise().sum().array();
}

/// d p_i / d z_j = p_i (delta_ij - p_j).
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_jacobian(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const VectorX<Scalar> p = softmax(logits);
  MatrixX<Scalar> jac = -p * p.transpose();
  jac.diagonal() += p;
  return jac;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// -sum_k y_k log p_k with p floored at 1e-12.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Scalar smoothed_ce_loss(const Eigen::MatrixBase<Derived>& probabilities, const SoftTarget<Scalar>& target) {
  require(probabilities.size() == target.values.size(), "smoothed_ce_loss: dimension mismatch");
  Scalar loss{0};
  for (Index k = 0; k < probabilities.size(); ++k)
    loss -= target.values(k) * std::log(std::max<Scalar>(probabilities(k), Scalar(kProbabilityFloor)));
  return loss;
}

/// Gradient of smoothed_ce_loss(softmax(z)) with respect to the logits z: p - y_ls.
template <typename Derived, typename Scalar = typename Derived::Scalar>
VectorX<Scalar> logit_gradient(const Eigen::MatrixBase<Derived>& probabilities, const SoftTarget<Scalar>& target) {
  require(probabilities.size() == target.values.size(), "logit_gradient: dimension mismatch");
  return probabilities - target.values;
}

/// Probabilities at which the smoothed logit gradient changes sign.
template <typename Scalar>
SaturationThresholds<Scalar> saturation_thresholds(Scalar alpha, Index num_classes) {
  require(num_classes >= 2, "saturation_thresholds: num_classes must be >= 2");
  const Scalar off = alpha / Scalar(num_classes);
  return {Scalar(1) - alpha + off, off};
}

inline double schedule_alpha(const SmoothingSchedule& schedule, int epoch) {
  require(epoch >= 0, "schedule_alpha: epoch must be >= 0");
  if (epoch < schedule.warmup_epochs) return 0.0;
  const int into_ramp = epoch - schedule.warmup_epochs;
  if (into_ramp >= schedule.ramp_epochs) return schedule.target_alpha;
  return schedule.target_alpha * static_cast<double>(into_ramp) / static_cast<double>(schedule.ramp_epochs);
}

/// Schedule with the default negative-smoothing warmup: 10% of epochs at
/// alpha = 0, then a 20% linear ramp. Non-negative targets apply immediately.
inline SmoothingSchedule default_schedule(double target_alpha, int epochs) {
  SmoothingSchedule s;
  s.target_alpha = target_alpha;
  if (target_alpha < 0.0) {
    s.warmup_epochs = epochs / 10;
    s.ramp_epochs = epochs / 5;
  }
  return s;
}

}  // namespace lsmia
