#include "lsmia/verify.hpp"

#include "lsmia/classifier.hpp"
#include "lsmia/losses.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace lsmia {

bool VerificationReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

const CheckResult& VerificationReport::check(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return c;
  throw InvalidArgument("no verification check named '" + name + "'");
}

namespace {

constexpr double kH = kFiniteDifferenceStep;

Vector random_logits(Rng& rng, Index classes, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  Vector z(classes);
  for (Index i = 0; i < classes; ++i) z(i) = u(rng);
  return z;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

CheckResult make(const std::string& name, double tol) { return {name, 0.0, tol, 0, false}; }

void finish(CheckResult& c) { c.passed = c.max_deviation <= c.tolerance && std::isfinite(c.max_deviation); }

}  // namespace

VerificationReport verify_gradients(const VerifyOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  VerificationReport report;
  Rng rng(options.seed);
  std::uniform_int_distribution<int> class_dist(2, 20);
  std::uniform_real_distribution<double> alpha_dist(-0.5, 1.0);

  auto grad_fn = [&](const Vector& p, const SoftTarget<double>& t) -> Vector {
    if (options.logit_gradient_override) return options.logit_gradient_override(p, t);
    return logit_gradient(p, t);
  };

  CheckResult jac_fd = make("softmax_jacobian_fd", 1e-6);
  CheckResult jac_rows = make("softmax_jacobian_row_sums", 1e-10);
  CheckResult grad_fd = make("logit_gradient_fd", 1e-6);
  CheckResult grad_chain = make("logit_gradient_jacobian_chain", 1e-8);
  CheckResult decomposition = make("loss_decomposition", 1e-9);
  CheckResult sums = make("smoothed_target_sum", 1e-9);

  for (int n = 0; n < options.logit_instances; ++n) {
    const Index classes = class_dist(rng);
    const double alpha = alpha_dist(rng);
    const Index label = std::uniform_int_distribution<Index>(0, classes - 1)(rng);
    const Vector z = random_logits(rng, classes, 3.0);
    const auto target = smooth_labels<double>(label, alpha, classes);
    const Vector p = softmax(z);

    sums.max_deviation = std::max(sums.max_deviation, std::abs(target.values.sum() - 1.0));

    const Matrix jac = softmax_jacobian(z);
    jac_rows.max_deviation = std::max(jac_rows.max_deviation, jac.rowwise().sum().cwiseAbs().maxCoeff());
    for (Index j = 0; j < classes; ++j) {
      Vector zp = z, zm = z;
      zp(j) += kH;
      zm(j) -= kH;
      const Vector col = (softmax(zp) - softmax(zm)) / (2.0 * kH);
      jac_fd.max_deviation = std::max(jac_fd.max_deviation, (jac.col(j) - col).cwiseAbs().maxCoeff());
    }

    const Vector analytic = grad_fn(p, target);
    for (Index j = 0; j < classes; ++j) {
      Vector zp = z, zm = z;
      zp(j) += kH;
      zm(j) -= kH;
      const double numeric =
          (smoothed_ce_loss(softmax(zp), target) - smoothed_ce_loss(softmax(zm), target)) / (2.0 * kH);
      grad_fd.max_deviation = std::max(grad_fd.max_deviation, std::abs(analytic(j) - numeric));
    }
    // dL/dz = J^T dL/dp with dL/dp = -y / p
    const Vector dl_dp = -(target.values.array() / p.array()).matrix();
    const Vector chain = jac.transpose() * dl_dp;
    grad_chain.max_deviation = std::max(grad_chain.max_deviation, (analytic - chain).cwiseAbs().maxCoeff());

    const auto hard = smooth_labels<double>(label, 0.0, classes);
    SoftTarget<double> ones{Vector::Ones(classes), 0.0, label};
    const double decomposed =
        (1.0 - alpha) * smoothed_ce_loss(p, hard) + alpha / static_cast<double>(classes) * smoothed_ce_loss(p, ones);
    decomposition.max_deviation = std::max(decomposition.max_deviation, std::abs(smoothed_ce_loss(p, target) - decomposed));
  }
  for (CheckResult* c : {&jac_fd, &jac_rows, &grad_fd, &grad_chain, &decomposition, &sums}) {
    c->instances = options.logit_instances;
    finish(*c);
    report.checks.push_back(*c);
  }

  // Sign flip of the target-logit gradient located by bisection over
  // p_target, remaining mass spread evenly over the other classes.
  CheckResult flip = make("saturation_sign_flip", 1e-9);
  CheckResult no_flip = make("negative_alpha_never_saturates", 0.0);
  std::uniform_real_distribution<double> pos_alpha(1e-3, 1.0);
  std::uniform_real_distribution<double> neg_alpha(-0.5, -1e-3);
  for (int n = 0; n < options.saturation_instances; ++n) {
    const Index classes = class_dist(rng);
    auto target_component = [&](double alpha, double q) {
      const auto t = smooth_labels<double>(0, alpha, classes);
      Vector p = Vector::Constant(classes, (1.0 - q) / static_cast<double>(classes - 1));
      p(0) = q;
      return grad_fn(p, t)(0);
    };
    const double alpha = pos_alpha(rng);
    double lo = 0.0, hi = 1.0;
    if (!(target_component(alpha, lo) < 0.0 && target_component(alpha, hi) > 0.0)) {
      flip.max_deviation = std::numeric_limits<double>::infinity();
    } else {
      for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
        const double mid = 0.5 * (lo + hi);
        (target_component(alpha, mid) < 0.0 ? lo : hi) = mid;
      }
      const double closed = saturation_thresholds<double>(alpha, classes).target_threshold;
      flip.max_deviation = std::max(flip.max_deviation, std::abs(0.5 * (lo + hi) - closed));
    }
    const double negative = neg_alpha(rng);
    for (int k = 0; k <= 100; ++k)
      if (target_component(negative, k / 100.0) >= 0.0) no_flip.max_deviation = 1.0;
  }
  for (CheckResult* c : {&flip, &no_flip}) {
    c->instances = options.saturation_instances;
    finish(*c);
    report.checks.push_back(*c);
  }

  // Backprop through random small classifiers, train-mode batch norm.
  CheckResult params = make("backprop_parameters_fd", 1e-4);
  CheckResult inputs = make("backprop_input_fd", 1e-4);
  CheckResult poincare = make("poincare_logit_gradient_fd", 1e-6);
  std::uniform_int_distribution<int> width(1, 10);
  std::uniform_int_distribution<int> depth(0, 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int n = 0; n < options.network_instances; ++n) {
    MlpConfig cfg;
    cfg.input_dim = width(rng);
    cfg.hidden_dims.assign(static_cast<std::size_t>(depth(rng)), 0);
    for (int& h : cfg.hidden_dims) h = std::max(2, width(rng));
    cfg.num_classes = std::max(2, width(rng));
    cfg.batch_norm = n % 2 == 0;
    MlpClassifier model(cfg, rng());
    // move biases and batch-norm affine parameters off their init values so
    // that no unit sits exactly on a ReLU kink
    for (auto& layer : model.mutable_dense())
      for (Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = 0.3 * normal(rng);
    for (auto& bn : model.mutable_batch_norm()) {
      for (Index i = 0; i < bn.gamma.size(); ++i) {
        bn.gamma(i) = 1.0 + 0.3 * normal(rng);
        bn.beta(i) = 0.3 * normal(rng);
      }
    }
    const Index batch = 4;
    Matrix x(batch, cfg.input_dim);
    for (Index i = 0; i < x.size(); ++i) x(i) = normal(rng);
    Labels y(batch);
    for (Index i = 0; i < batch; ++i) y(i) = std::uniform_int_distribution<int>(0, cfg.num_classes - 1)(rng);
    const double alpha = alpha_dist(rng);
    const Mode mode = cfg.batch_norm && n % 4 == 0 ? Mode::kEval : Mode::kTrain;

    auto loss_at = [&](MlpClassifier& m, const Matrix& input) {
      MlpClassifier probe = m;  // train-mode forward updates running stats; keep m untouched
      return smoothed_batch_loss(forward(probe, input, mode).logits, y, alpha).loss;
    };
    MlpClassifier work = model;
    const ForwardResult fwd = forward(work, x, mode);
    const BatchLoss bl = smoothed_batch_loss(fwd.logits, y, alpha);
    const BackwardResult back = backward(work, fwd.cache, bl.logit_gradient);
    const Vector analytic = flatten(back.parameters);

    const Vector theta = flatten_parameters(model);
    for (Index k = 0; k < theta.size(); ++k) {
      MlpClassifier plus = model, minus = model;
      Vector tp = theta, tm = theta;
      tp(k) += kH;
      tm(k) -= kH;
      assign_parameters(plus, tp);
      assign_parameters(minus, tm);
      const double numeric = (loss_at(plus, x) - loss_at(minus, x)) / (2.0 * kH);
      params.max_deviation = std::max(params.max_deviation, relative_error(analytic(k), numeric));
    }
    for (Index k = 0; k < x.size(); ++k) {
      Matrix xp = x, xm = x;
      xp(k) += kH;
      xm(k) -= kH;
      const double numeric = (loss_at(model, xp) - loss_at(model, xm)) / (2.0 * kH);
      inputs.max_deviation = std::max(inputs.max_deviation, relative_error(back.input(k), numeric));
    }

    const Vector z = random_logits(rng, cfg.num_classes, 3.0);
    const Index target = std::uniform_int_distribution<Index>(0, cfg.num_classes - 1)(rng);
    const LossValue lv = poincare_loss_with_gradient(z, target);
    for (Index j = 0; j < z.size(); ++j) {
      Vector zp = z, zm = z;
      zp(j) += kH;
      zm(j) -= kH;
      const double numeric =
          (poincare_loss(zp, target, z.size()) - poincare_loss(zm, target, z.size())) / (2.0 * kH);
      poincare.max_deviation = std::max(poincare.max_deviation, relative_error(lv.logit_gradient(j), numeric));
    }
  }
  for (CheckResult* c : {&params, &inputs, &poincare}) {
    c->instances = options.network_instances;
    finish(*c);
    report.checks.push_back(*c);
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

nlohmann::json to_json(const VerificationReport& report) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : report.checks)
    checks.push_back({{"name", c.name},
                      {"max_deviation", c.max_deviation},
                      {"tolerance", c.tolerance},
                      {"instances", c.instances},
                      {"passed", c.passed}});
  return {{"passed", report.passed()}, {"checks", checks}};
}

}  // namespace lsmia
