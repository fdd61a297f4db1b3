#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lsmia/losses.hpp"
#include "lsmia/smoothing.hpp"

#include <cmath>
#include <random>

using namespace lsmia;

namespace {

long double arcosh_distance(const Vector& u, const Vector& v) {
  long double a = 0, nu = 0, nv = 0;
  for (Index i = 0; i < u.size(); ++i) {
    const long double d = static_cast<long double>(u(i)) - v(i);
    a += d * d;
    nu += static_cast<long double>(u(i)) * u(i);
    nv += static_cast<long double>(v(i)) * v(i);
  }
  return std::acosh(1.0L + 2.0L * a / ((1.0L - nu) * (1.0L - nv)));
}

Vector random_vector(std::mt19937_64& rng, Index n, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

}  // namespace

TEST_CASE("identity cross-entropy") {
  Vector sure(3);
  sure << 60.0, 0.0, 0.0;
  CHECK(ce_identity_loss(sure, 0) < 1e-20);
  CHECK(ce_identity_loss(Vector::Constant(7, 1.5), 3) == doctest::Approx(std::log(7.0)).epsilon(1e-14));

  Vector z(4);
  z << 0.3, -1.2, 2.0, 0.1;
  const long double lse = std::log(std::exp(0.3L) + std::exp(-1.2L) + std::exp(2.0L) + std::exp(0.1L));
  CHECK(std::abs(ce_identity_loss(z, 1) - static_cast<double>(lse + 1.2L)) < 1e-14);

  const LossValue lv = ce_identity_loss_with_gradient(z, 1);
  const double h = 1e-5;
  for (int j = 0; j < 4; ++j) {
    Vector zp = z, zm = z;
    zp(j) += h;
    zm(j) -= h;
    CHECK(std::abs(lv.logit_gradient(j) - (ce_identity_loss(zp, 1) - ce_identity_loss(zm, 1)) / (2 * h)) < 1e-8);
  }
}

TEST_CASE("poincare distance") {
  Vector u(3);
  u << 0.2, -0.1, 0.3;
  CHECK(poincare_distance(u, u) == 0.0);

  Vector at_target = Vector::Zero(4);
  at_target(0) = kPoincareTargetValue;
  Vector v = at_target;
  CHECK(std::abs(poincare_distance(at_target, v)) < 1e-6);

  Vector half(3), target(3);
  half << 0.5, 0.5, 0.0;
  target << 0.9999, 0.0, 0.0;
  CHECK(std::abs(poincare_distance(half, target) - static_cast<double>(arcosh_distance(half, target))) < 1e-9);

  Vector outside(2);
  outside << 1.0, 0.0;
  CHECK_THROWS_AS(poincare_distance(outside, Vector::Zero(2)), NumericError);
}

TEST_CASE("poincare distance is a symmetric positive definite function") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> r(0.0, 0.95);
  for (int n = 0; n < 500; ++n) {
    const Index d = 2 + n % 6;
    Vector a = random_vector(rng, d, 1.0), b = random_vector(rng, d, 1.0);
    a *= r(rng) / a.norm();
    b *= r(rng) / b.norm();
    const double ab = poincare_distance(a, b);
    CHECK(ab == doctest::Approx(poincare_distance(b, a)).epsilon(1e-12));
    CHECK(ab > 0.0);
    CHECK(ab == doctest::Approx(static_cast<double>(arcosh_distance(a, b))).epsilon(1e-9));
  }
}

TEST_CASE("poincare loss over l1-normalized logits") {
  Vector logits(3);
  logits << 2.0, 1.0, -1.0;
  Vector u = logits / 4.0;
  Vector v = Vector::Zero(3);
  v(0) = kPoincareTargetValue;
  CHECK(poincare_loss(logits, 0, 3) == doctest::Approx(static_cast<double>(arcosh_distance(u, v))).epsilon(1e-12));
  CHECK_THROWS_AS(poincare_loss(Vector::Zero(3), 0, 3), NumericError);
  CHECK_THROWS_AS(poincare_loss(logits, 0, 4), InvalidArgument);
}

TEST_CASE("poincare gradient matches finite differences") {
  std::mt19937_64 rng(17);
  const double h = 1e-6;
  for (int n = 0; n < 300; ++n) {
    const Index c = 2 + n % 9;
    const Vector z = random_vector(rng, c, 2.0);
    const Index t = n % c;
    const LossValue lv = poincare_loss_with_gradient(z, t);
    CHECK(lv.value == doctest::Approx(poincare_loss(z, t, c)).epsilon(1e-14));
    for (Index j = 0; j < c; ++j) {
      Vector zp = z, zm = z;
      zp(j) += h;
      zm(j) -= h;
      const double fd = (poincare_loss(zp, t, c) - poincare_loss(zm, t, c)) / (2 * h);
      CHECK(std::abs(lv.logit_gradient(j) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("loss selector applies weight and kind") {
  Vector z(3);
  z << 0.5, -0.2, 1.1;
  InputLoss smoothed = InputLoss::smoothed_ce(0.1);
  const LossValue s = evaluate_loss(smoothed, z, 2);
  const auto target = smooth_labels<double>(2, 0.1, 3);
  CHECK(s.value == doctest::Approx(smoothed_ce_loss(softmax(z), target)).epsilon(1e-14));

  InputLoss doubled = InputLoss::poincare();
  doubled.weight = 2.0;
  const LossValue one = evaluate_loss(InputLoss::poincare(), z, 1);
  const LossValue two = evaluate_loss(doubled, z, 1);
  CHECK(std::abs(two.value - 2.0 * one.value) < 1e-12);
  CHECK((two.logit_gradient - 2.0 * one.logit_gradient).cwiseAbs().maxCoeff() < 1e-10);

  CHECK(parse_loss_kind("ce_identity") == InputLoss::Kind::kCeIdentity);
  CHECK(to_string(parse_loss_kind("poincare")) == "poincare");
  CHECK_THROWS_AS(parse_loss_kind("hinge"), InvalidArgument);
}
