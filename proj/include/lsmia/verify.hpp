#pragma once

// Analytic-vs-numerical verification of the whole gradient chain: softmax
// Jacobian, smoothed logit gradient, saturation thresholds, backprop through
// the classifier, and the Poincare loss gradient.

#include "lsmia/core.hpp"
#include "lsmia/smoothing.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace lsmia {

struct CheckResult {
  std::string name;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  int instances = 0;
  bool passed = false;
};

struct VerificationReport {
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool passed() const;
  const CheckResult& check(const std::string& name) const;
};

struct VerifyOptions {
  std::uint64_t seed = 20240601;
  int logit_instances = 1000;
  int saturation_instances = 100;
  int network_instances = 20;
  /// Replaces the analytic logit gradient under test (fault injection).
  std::function<Vector(const Vector& probabilities, const SoftTarget<double>& target)> logit_gradient_override;
};

/// Central difference step used throughout.
inline constexpr double kFiniteDifferenceStep = 1e-5;

VerificationReport verify_gradients(const VerifyOptions& options = {});

nlohmann::json to_json(const VerificationReport& report);

}  // namespace lsmia
