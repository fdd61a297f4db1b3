#include "lsmia/losses.hpp"

#include "lsmia/smoothing.hpp"

#include <cmath>

namespace lsmia {

InputLoss::Kind parse_loss_kind(const std::string& name) {
  if (name == "ce_identity" || name == "identity-logit" || name == "ce") return InputLoss::Kind::kCeIdentity;
  if (name == "poincare") return InputLoss::Kind::kPoincare;
  if (name == "smoothed_ce" || name == "smoothed-ce") return InputLoss::Kind::kSmoothedCe;
  throw InvalidArgument("unknown loss kind '" + name + "'");
}

std::string to_string(InputLoss::Kind kind) {
  switch (kind) {
    case InputLoss::Kind::kCeIdentity: return "ce_identity";
    case InputLoss::Kind::kPoincare: return "poincare";
    case InputLoss::Kind::kSmoothedCe: return "smoothed_ce";
  }
  throw InvalidArgument("unknown loss kind");
}

namespace {

void check_class(const Eigen::Ref<const Vector>& logits, Index target_class) {
  require(target_class >= 0 && target_class < logits.size(), "loss: target class out of range");
}

double log_sum_exp(const Eigen::Ref<const Vector>& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

}  // namespace

double ce_identity_loss(const Eigen::Ref<const Vector>& logits, Index target_class) {
  check_class(logits, target_class);
  if (!logits.allFinite()) throw NumericError("ce_identity_loss: non-finite logits");
  return log_sum_exp(logits) - logits(target_class);
}

LossValue ce_identity_loss_with_gradient(const Eigen::Ref<const Vector>& logits, Index target_class) {
  LossValue out;
  out.value = ce_identity_loss(logits, target_class);
  out.probabilities = softmax(logits);
  out.logit_gradient = out.probabilities;
  out.logit_gradient(target_class) -= 1.0;
  return out;
}

double poincare_distance(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v) {
  require(u.size() == v.size(), "poincare_distance: dimension mismatch");
  const double a = (u - v).squaredNorm();
  const double b = 1.0 - u.squaredNorm();
  const double c = 1.0 - v.squaredNorm();
  if (b <= 0.0 || c <= 0.0) throw NumericError("poincare_distance: point outside the open unit ball");
  // arcosh(1 + q) = log(1 + q + sqrt(q (q + 2))) keeps precision near q = 0
  const double q = 2.0 * a / (b * c);
  return std::log1p(q + std::sqrt(q * (q + 2.0)));
}

namespace {

struct NormalizedLogits {
  Vector u;
  double l1 = 0.0;
  double scale = 1.0;  // clamp factor applied after l1 normalization
  bool clamped = false;
};

NormalizedLogits normalize_logits(const Eigen::Ref<const Vector>& logits) {
  if (!logits.allFinite()) throw NumericError("poincare_loss: non-finite logits");
  NormalizedLogits n;
  n.l1 = logits.lpNorm<1>();
  if (n.l1 == 0.0) throw NumericError("poincare_loss: zero logit vector cannot be l1-normalized");
  n.u = logits / n.l1;
  const double norm = n.u.norm();
  if (norm >= 1.0) {
    n.scale = (1.0 - kPoincareBallMargin) / std::max(1.0, norm);
    n.u *= n.scale;
    n.clamped = true;
  }
  return n;
}

Vector poincare_target(Index num_classes, Index target_class) {
  Vector v = Vector::Zero(num_classes);
  v(target_class) = kPoincareTargetValue;
  return v;
}

}  // namespace

double poincare_loss(const Eigen::Ref<const Vector>& logits, Index target_class, Index num_classes) {
  require(logits.size() == num_classes, "poincare_loss: logit count does not match num_classes");
  check_class(logits, target_class);
  const NormalizedLogits n = normalize_logits(logits);
  return poincare_distance(n.u, poincare_target(num_classes, target_class));
}

LossValue poincare_loss_with_gradient(const Eigen::Ref<const Vector>& logits, Index target_class) {
  check_class(logits, target_class);
  const Index classes = logits.size();
  const NormalizedLogits n = normalize_logits(logits);
  const Vector v = poincare_target(classes, target_class);

  LossValue out;
  out.value = poincare_distance(n.u, v);
  out.probabilities = softmax(logits);
  out.clamped = n.clamped;

  const Vector diff = n.u - v;
  const double a = diff.squaredNorm();
  if (a == 0.0) {
    out.logit_gradient = Vector::Zero(classes);
    return out;
  }
  const double b = 1.0 - n.u.squaredNorm();
  const double c = 1.0 - v.squaredNorm();
  const double q = 2.0 * a / (b * c);
  // d arcosh(1+q)/dq, then dq/du
  const double outer = 1.0 / std::sqrt(q * (q + 2.0));
  const Vector grad_u = outer * (4.0 / (b * c)) * (diff + (a / b) * n.u);

  // back through u = scale * o / |o|_1
  const Vector h = n.scale * grad_u;
  const Vector u_unscaled = logits / n.l1;
  const double h_dot_u = h.dot(u_unscaled);
  out.logit_gradient.resize(classes);
  for (Index j = 0; j < classes; ++j) {
    const double sign = logits(j) > 0.0 ? 1.0 : (logits(j) < 0.0 ? -1.0 : 0.0);
    out.logit_gradient(j) = (h(j) - sign * h_dot_u) / n.l1;
  }
  return out;
}

LossValue evaluate_loss(const InputLoss& loss, const Eigen::Ref<const Vector>& logits, Index target_class) {
  LossValue out;
  switch (loss.kind) {
    case InputLoss::Kind::kCeIdentity:
      out = ce_identity_loss_with_gradient(logits, target_class);
      break;
    case InputLoss::Kind::kPoincare:
      out = poincare_loss_with_gradient(logits, target_class);
      break;
    case InputLoss::Kind::kSmoothedCe: {
      check_class(logits, target_class);
      const auto target = smooth_labels<double>(target_class, loss.alpha, logits.size());
      out.probabilities = softmax(logits);
      out.value = smoothed_ce_loss(out.probabilities, target);
      out.logit_gradient = logit_gradient(out.probabilities, target);
      break;
    }
    default:
      throw InvalidArgument("unknown loss kind");
  }
  out.value *= loss.weight;
  out.logit_gradient *= loss.weight;
  return out;
}

}  // namespace lsmia
