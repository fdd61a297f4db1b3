#pragma once

// First-order optimizers over flat parameter vectors. Shared by model
// training and latent optimization.

#include "lsmia/core.hpp"

#include <cmath>
#include <string>

namespace lsmia {

struct OptimizerConfig {
  enum class Kind { kSgd, kAdam };
  Kind kind = Kind::kSgd;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerConfig sgd(double momentum = 0.0) {
    OptimizerConfig c;
    c.momentum = momentum;
    return c;
  }
  static OptimizerConfig adam(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8) {
    OptimizerConfig c;
    c.kind = Kind::kAdam;
    c.beta1 = beta1;
    c.beta2 = beta2;
    c.epsilon = epsilon;
    return c;
  }
};

/// Stateful optimizer for one parameter vector (heavy-ball SGD or Adam).
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, Index size)
      : config_(config), first_(Vector::Zero(size)), second_(Vector::Zero(size)) {}

  void step(Vector& params, const Vector& grad, double learning_rate) {
    if (grad.size() != params.size()) throw InvalidArgument("optimizer: gradient size mismatch");
    ++t_;
    if (config_.kind == OptimizerConfig::Kind::kSgd) {
      if (config_.momentum == 0.0) {
        params -= learning_rate * grad;
        return;
      }
      // v <- mu v + g ; p <- p - lr v
      first_ = config_.momentum * first_ + grad;
      params -= learning_rate * first_;
      return;
    }
    first_ = config_.beta1 * first_ + (1.0 - config_.beta1) * grad;
    second_ = config_.beta2 * second_ + (1.0 - config_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    params.array() -= learning_rate * (first_.array() / c1) / ((second_.array() / c2).sqrt() + config_.epsilon);
  }

  long steps() const { return t_; }

 private:
  OptimizerConfig config_;
  Vector first_;
  Vector second_;
  long t_ = 0;
};

inline std::string to_string(OptimizerConfig::Kind kind) {
  return kind == OptimizerConfig::Kind::kSgd ? "sgd" : "adam";
}

}  // namespace lsmia
