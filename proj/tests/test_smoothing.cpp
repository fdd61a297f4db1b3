#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lsmia/smoothing.hpp"

#include <cmath>
#include <random>

using namespace lsmia;

TEST_CASE("smoothed targets of the three-class examples") {
  const auto pos = smooth_labels<double>(0, 0.3, 3);
  CHECK(pos.values(0) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(pos.values(1) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(pos.values(2) == doctest::Approx(0.1).epsilon(1e-15));

  const auto neg = smooth_labels<double>(0, -0.3, 3);
  CHECK(neg.values(0) == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(neg.values(1) == doctest::Approx(-0.1).epsilon(1e-15));
  CHECK(neg.values(2) == doctest::Approx(-0.1).epsilon(1e-15));

  for (Index c : {2, 5, 17}) {
    const auto hard = smooth_labels<double>(c - 1, 0.0, c);
    for (Index k = 0; k < c; ++k) CHECK(hard.values(k) == (k == c - 1 ? 1.0 : 0.0));
  }
}

TEST_CASE("smooth_labels rejects bad arguments") {
  CHECK_THROWS_AS(smooth_labels<double>(0, 1.1, 3), InvalidArgument);
  CHECK_THROWS_AS(smooth_labels<double>(3, 0.1, 3), InvalidArgument);
  CHECK_THROWS_AS(smooth_labels<double>(0, 0.1, 1), InvalidArgument);
}

TEST_CASE("smoothed targets sum to one") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> alpha(-3.0, 1.0);
  std::uniform_int_distribution<int> classes(2, 50);
  for (int n = 0; n < 1000; ++n) {
    const int c = classes(rng);
    const auto t = smooth_labels<double>(n % c, alpha(rng), c);
    CHECK(std::abs(t.values.sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("softmax values") {
  Vector z(2);
  z << 0.0, 0.0;
  CHECK(softmax(z).isApprox(Vector::Constant(2, 0.5)));
  z = Vector::Constant(3, -4.2);
  CHECK((softmax(z).array() - 1.0 / 3.0).abs().maxCoeff() < 1e-16);

  Vector w(3);
  w << 1.0, 2.0, 3.0;
  const long double total = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  const Vector p = softmax(w);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p(i) - static_cast<double>(std::exp(static_cast<long double>(i + 1)) / total)) < 1e-15);

  // templated scalar: long double path agrees with itself in extended precision
  VectorX<long double> wl = w.cast<long double>();
  const auto pl = softmax(wl);
  CHECK(std::abs(pl(2) - std::exp(3.0L) / total) < 1e-18L);

  Vector bad(2);
  bad << 1.0, std::nan("");
  CHECK_THROWS_AS(softmax(bad), NumericError);
}

TEST_CASE("softmax Jacobian") {
  Vector z(2);
  z << 0.0, 0.0;
  Matrix expected(2, 2);
  expected << 0.25, -0.25, -0.25, 0.25;
  CHECK((softmax_jacobian(z) - expected).cwiseAbs().maxCoeff() < 1e-16);

  Vector w(3);
  w << 1.0, 2.0, 3.0;
  const Matrix jac = softmax_jacobian(w);
  const double h = 1e-5;
  for (int j = 0; j < 3; ++j) {
    Vector wp = w, wm = w;
    wp(j) += h;
    wm(j) -= h;
    const Vector col = (softmax(wp) - softmax(wm)) / (2 * h);
    CHECK((jac.col(j) - col).cwiseAbs().maxCoeff() < 1e-6);
  }

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int r = 0; r < 200; ++r) {
    Vector v(2 + r % 15);
    for (Index i = 0; i < v.size(); ++i) v(i) = n(rng);
    CHECK(softmax_jacobian(v).rowwise().sum().cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("smoothed cross-entropy") {
  Vector p(3);
  p << 0.7, 0.2, 0.1;
  const auto t = smooth_labels<double>(0, 0.3, 3);
  const long double expected = -(0.8L * std::log(0.7L) + 0.1L * std::log(0.2L) + 0.1L * std::log(0.1L));
  CHECK(std::abs(smoothed_ce_loss(p, t) - static_cast<double>(expected)) < 1e-14);

  Vector sure(3);
  sure << 1.0, 0.0, 0.0;
  CHECK(smoothed_ce_loss(sure, smooth_labels<double>(0, 0.0, 3)) == doctest::Approx(0.0));

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (double alpha : {0.3, -0.3}) {
    for (int r = 0; r < 500; ++r) {
      const int c = 2 + r % 10;
      Vector q(c);
      for (int i = 0; i < c; ++i) q(i) = u(rng);
      q /= q.sum();
      const auto target = smooth_labels<double>(r % c, alpha, c);
      const auto hard = smooth_labels<double>(r % c, 0.0, c);
      double uniform = 0.0;
      for (int i = 0; i < c; ++i) uniform -= std::log(q(i));
      const double decomposed = (1 - alpha) * smoothed_ce_loss(q, hard) + alpha / c * uniform;
      CHECK(std::abs(smoothed_ce_loss(q, target) - decomposed) < 1e-9);
    }
  }
}

TEST_CASE("logit gradient") {
  const auto t = smooth_labels<double>(1, 0.2, 4);
  CHECK(logit_gradient(t.values, t).cwiseAbs().maxCoeff() == 0.0);

  const auto ten = smooth_labels<double>(0, 0.1, 10);
  Vector p = Vector::Constant(10, 0.01);
  p(0) = 0.91;
  CHECK(std::abs(logit_gradient(p, ten)(0)) < 1e-15);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 2.0);
  const double h = 1e-5;
  for (int r = 0; r < 100; ++r) {
    const int c = 2 + r % 8;
    Vector z(c);
    for (int i = 0; i < c; ++i) z(i) = n(rng);
    const auto target = smooth_labels<double>(r % c, -0.05, c);
    const Vector g = logit_gradient(softmax(z), target);
    for (int j = 0; j < c; ++j) {
      Vector zp = z, zm = z;
      zp(j) += h;
      zm(j) -= h;
      const double fd = (smoothed_ce_loss(softmax(zp), target) - smoothed_ce_loss(softmax(zm), target)) / (2 * h);
      CHECK(std::abs(g(j) - fd) < 1e-6);
    }
  }
}

TEST_CASE("negative smoothing keeps pushing the target logit") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int r = 0; r < 500; ++r) {
    const int c = 2 + r % 19;
    const double alpha = -0.5 * u(rng) - 1e-4;
    Vector p(c);
    for (int i = 0; i < c; ++i) p(i) = u(rng) + 1e-9;
    p /= p.sum();
    CHECK(logit_gradient(p, smooth_labels<double>(0, alpha, c))(0) < 0.0);
  }
}

TEST_CASE("saturation thresholds") {
  const auto ten = saturation_thresholds(0.1, 10);
  CHECK(ten.target_threshold == doctest::Approx(0.91).epsilon(1e-15));
  CHECK(ten.other_threshold == doctest::Approx(0.01).epsilon(1e-15));

  const auto hard = saturation_thresholds(0.0, 7);
  CHECK(hard.target_threshold == 1.0);
  CHECK(hard.other_threshold == 0.0);

  const auto wide = saturation_thresholds(-0.05, 530);
  CHECK(wide.target_threshold == 1.0 + 0.05 - 0.05 / 530.0);
  CHECK(wide.target_threshold > 1.0);
}

TEST_CASE("negative smoothing schedule") {
  const SmoothingSchedule s{-0.05, 10, 20};
  CHECK(schedule_alpha(s, 0) == 0.0);
  CHECK(schedule_alpha(s, 5) == 0.0);
  CHECK(schedule_alpha(s, 20) == doctest::Approx(-0.025).epsilon(1e-15));
  CHECK(schedule_alpha(s, 30) == -0.05);
  CHECK(schedule_alpha(s, 4000) == -0.05);

  const auto d = default_schedule(-0.05, 5000);
  CHECK(d.warmup_epochs == 500);
  CHECK(d.ramp_epochs == 1000);
  const auto p = default_schedule(0.05, 5000);
  CHECK(p.warmup_epochs == 0);
  CHECK(schedule_alpha(p, 0) == 0.05);
  for (int e = 1; e < 5000; ++e) CHECK(schedule_alpha(d, e) <= schedule_alpha(d, e - 1));
}
