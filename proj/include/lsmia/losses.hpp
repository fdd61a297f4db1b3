#pragma once

// Scalar attack/training losses on a single logit vector, each with its
// analytic gradient with respect to the logits.

#include "lsmia/core.hpp"

namespace lsmia {

struct LossValue {
  double value = 0.0;
  Vector logit_gradient;
  Vector probabilities;
  bool clamped = false;
};

/// Loss selector for input-space gradients.
struct InputLoss {
  enum class Kind { kSmoothedCe, kPoincare, kCeIdentity };
  Kind kind = Kind::kCeIdentity;
  double alpha = 0.0;   // smoothed CE only
  double weight = 1.0;  // multiplies value and gradient

  static InputLoss ce_identity() { return {}; }
  static InputLoss poincare() { return {Kind::kPoincare, 0.0, 1.0}; }
  static InputLoss smoothed_ce(double alpha) { return {Kind::kSmoothedCe, alpha, 1.0}; }
};

InputLoss::Kind parse_loss_kind(const std::string& name);
std::string to_string(InputLoss::Kind kind);

/// Cross-entropy against the hard target via log-sum-exp.
double ce_identity_loss(const Eigen::Ref<const Vector>& logits, Index target_class);
LossValue ce_identity_loss_with_gradient(const Eigen::Ref<const Vector>& logits, Index target_class);

inline constexpr double kPoincareTargetValue = 0.9999;
inline constexpr double kPoincareBallMargin = 1e-6;

/// Hyperbolic distance arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2))) inside the unit ball.
double poincare_distance(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v);

/// Poincare distance between the l1-normalized logits and the 0.9999 one-hot target.
double poincare_loss(const Eigen::Ref<const Vector>& logits, Index target_class, Index num_classes);
LossValue poincare_loss_with_gradient(const Eigen::Ref<const Vector>& logits, Index target_class);

LossValue evaluate_loss(const InputLoss& loss, const Eigen::Ref<const Vector>& logits, Index target_class);

}  // namespace lsmia
