#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lsmia/classifier.hpp"
#include "lsmia/data.hpp"
#include "lsmia/inversion.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace lsmia;

namespace {

const LabeledDataset& toy_data() {
  static const LabeledDataset d = gen_blobs(BlobSpec::triangle(2.0, 0.4, 60, 1));
  return d;
}

const MlpClassifier& toy_model() {
  static const MlpClassifier m = [] {
    MlpClassifier model(MlpConfig{}, 4);
    TrainConfig t;
    t.epochs = 300;
    t.learning_rate = 0.05;
    t.seed = 4;
    train(model, toy_data(), t);
    return model;
  }();
  return m;
}

Matrix random_matrix(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m(i) = n(rng);
  return m;
}

/// Reference ranking: every (score, index) pair sorted by score, ties by index.
std::vector<Index> brute_force_top(const std::vector<double>& scores, std::size_t keep) {
  std::vector<std::pair<double, Index>> pairs;
  for (std::size_t i = 0; i < scores.size(); ++i) pairs.emplace_back(-scores[i], static_cast<Index>(i));
  std::sort(pairs.begin(), pairs.end());
  std::vector<Index> out;
  for (std::size_t k = 0; k < keep; ++k) out.push_back(pairs[k].second);
  return out;
}

/// Target confidence of every jittered copy, averaged by hand one point at a time.
double brute_force_confidence(const MlpClassifier& model, const Vector& x, const JitterTransform& t, int count,
                              Index row, Index target) {
  double sum = 0.0;
  for (int k = 0; k < count; ++k) {
    const Vector j = apply_jitter(x, t, static_cast<std::uint64_t>(row * count + k));
    sum += predict_proba(model, j.transpose())(0, target);
  }
  return sum / count;
}

}  // namespace

TEST_CASE("pca prior on an exact affine subspace") {
  std::mt19937_64 rng(1);
  const Matrix basis = random_matrix(rng, 2, 5);
  const Matrix coeffs = random_matrix(rng, 80, 2);
  Vector offset(5);
  offset << 1, -2, 0.5, 3, 0;
  const Matrix data = (coeffs * basis).rowwise() + offset.transpose();
  const Prior p = fit_pca_prior(data, 2);
  CHECK((p.components.transpose() * p.components - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-8);
  for (Index i = 0; i < data.rows(); ++i) {
    const Vector x = data.row(i).transpose();
    CHECK((prior_decode(p, prior_encode(p, x)) - x).cwiseAbs().maxCoeff() < 1e-8);
  }
  CHECK((prior_decode(p, Vector::Zero(2)) - p.mean).norm() == 0.0);
}

TEST_CASE("pca prior with full latent dimension reconstructs everything") {
  std::mt19937_64 rng(2);
  const Matrix data = random_matrix(rng, 30, 4);
  const Prior p = fit_pca_prior(data, 4);
  for (Index i = 0; i < data.rows(); ++i) {
    const Vector x = data.row(i).transpose();
    CHECK((prior_decode(p, prior_encode(p, x)) - x).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("pca explained variance matches an independent covariance eigensolve") {
  std::mt19937_64 rng(3);
  Matrix data = random_matrix(rng, 200, 4);
  data.col(0) *= 3.0;
  data.col(2) *= 0.5;
  data.col(1) += 0.7 * data.col(0);
  const Prior p = fit_pca_prior(data, 3);

  // covariance assembled with explicit loops, eigenvalues from the generic solver
  const Index n = data.rows(), d = data.cols();
  Vector mean = Vector::Zero(d);
  for (Index i = 0; i < n; ++i) mean += data.row(i).transpose();
  mean /= static_cast<double>(n);
  Matrix cov = Matrix::Zero(d, d);
  for (Index i = 0; i < n; ++i) {
    const Vector c = data.row(i).transpose() - mean;
    cov += c * c.transpose();
  }
  cov /= static_cast<double>(n - 1);
  Eigen::EigenSolver<Matrix> solver(cov);
  std::vector<double> ev;
  for (Index i = 0; i < d; ++i) ev.push_back(solver.eigenvalues()(i).real());
  std::sort(ev.rbegin(), ev.rend());
  for (Index j = 0; j < 3; ++j) {
    CHECK(std::abs(p.explained_variance(j) - ev[static_cast<std::size_t>(j)]) < 1e-6);
    const Vector w = p.components.col(j);
    CHECK((w.transpose() * cov * w)(0, 0) == doctest::Approx(p.explained_variance(j)).epsilon(1e-9));
  }
  CHECK_THROWS_AS(fit_pca_prior(data, 5), InvalidArgument);
}

TEST_CASE("identity prior") {
  const Prior p = identity_prior(3);
  Vector x(3);
  x << 0.1, -4.0, 2.5;
  CHECK(prior_decode(p, x) == x);
  CHECK(prior_encode(p, x) == x);
  CHECK(latent_gradient(p, x) == x);
}

TEST_CASE("latent gradient matches finite differences through decode") {
  std::mt19937_64 rng(4);
  const Prior p = fit_pca_prior(random_matrix(rng, 50, 2), 2);
  const MlpClassifier& m = toy_model();
  for (const InputLoss& loss : {InputLoss::ce_identity(), InputLoss::poincare()}) {
    for (int r = 0; r < 20; ++r) {
      const Vector z = random_matrix(rng, 2, 1);
      const Vector g = latent_gradient(p, input_gradient(m, prior_decode(p, z), loss, 1));
      const double h = 1e-6;
      for (Index j = 0; j < 2; ++j) {
        Vector zp = z, zm = z;
        zp(j) += h;
        zm(j) -= h;
        const double fd = (evaluate_input(m, prior_decode(p, zp), loss, 1).loss -
                           evaluate_input(m, prior_decode(p, zm), loss, 1).loss) /
                          (2 * h);
        CHECK(std::abs(g(j) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("attack step accounting") {
  const MlpClassifier& m = toy_model();
  const Vector center = toy_data().class_rows(2).colwise().mean().transpose();

  AttackConfig c;
  c.stop_confidence = 0.5;
  const Trajectory done = simple_invert(m, 2, center, c);
  CHECK(done.step_count() == 0);
  CHECK(done.stop == StopReason::kConfidence);
  CHECK(done.final_x == center);

  c.stop_confidence.reset();
  c.max_steps = 50;
  const Vector far = toy_data().class_rows(0).colwise().mean().transpose();
  const Trajectory fixed = simple_invert(m, 2, far, c);
  CHECK(fixed.step_count() == 50);
  CHECK(fixed.stop == StopReason::kMaxSteps);
  for (const auto& s : fixed.steps) CHECK((s.confidence >= 0.0 && s.confidence <= 1.0));
  // steps[t] is the state before update t
  CHECK(fixed.steps.front().x == far);
  CHECK((fixed.steps[1].x - (far - c.learning_rate * fixed.steps[0].gradient)).cwiseAbs().maxCoeff() < 1e-15);

  c.learning_rate = 0.0;
  const Trajectory frozen = simple_invert(m, 2, far, c);
  CHECK(frozen.final_x == far);

  c.learning_rate = 0.1;
  c.stop_confidence = 0.95;
  c.max_steps = 5000;
  const Trajectory reach = simple_invert(m, 2, far, c);
  CHECK(reach.stop == StopReason::kConfidence);
  CHECK(reach.final_confidence > 0.95);
  for (const auto& s : reach.steps) CHECK(s.confidence <= 0.95);
}

TEST_CASE("identity prior reproduces the direct attack") {
  const MlpClassifier& m = toy_model();
  const Vector start = toy_data().class_rows(1).row(3).transpose();
  AttackConfig c;
  c.max_steps = 40;
  c.stop_confidence.reset();
  const Trajectory direct = simple_invert(m, 0, start, c);
  const Trajectory latent = optimize_latent(m, identity_prior(2), start, 0, c);
  REQUIRE(direct.step_count() == latent.step_count());
  for (std::size_t t = 0; t < direct.step_count(); ++t) {
    CHECK(direct.steps[t].x == latent.steps[t].x);
    CHECK(direct.steps[t].gradient == latent.steps[t].gradient);
  }
  CHECK(direct.final_x == latent.final_x);

  AttackConfig one = c;
  one.pool_size = one.candidates_per_class = one.final_per_class = 1;
  one.transform_count = 1;
  const AttackRun run = run_ppa(m, identity_prior(2), {0}, one);
  const Matrix pool = sample_latent_pool(identity_prior(2), one);
  const Trajectory ref = simple_invert(m, 0, pool.row(0).transpose(), one);
  REQUIRE(run.classes.size() == 1);
  const Trajectory& got = run.classes[0].trajectories.at(0);
  CHECK(got.step_count() == ref.step_count());
  CHECK(got.final_x == ref.final_x);
  CHECK(run.classes[0].selected.at(0).point == ref.final_x);
}

TEST_CASE("latent optimization raises target confidence") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.max_steps = 50;
  c.stop_confidence.reset();
  c.pool_size = 60;
  c.seed = 5;
  const Matrix pool = sample_latent_pool(p, c);
  int improved = 0, total = 0;
  for (Index target = 0; target < 3; ++target) {
    std::vector<Index> idx(static_cast<std::size_t>(pool.rows()));
    std::iota(idx.begin(), idx.end(), Index{0});
    const auto traj = optimize_latents(m, p, pool, idx, target, c, 2);
    for (const auto& t : traj) {
      REQUIRE(t.stop != StopReason::kFailed);
      improved += t.final_confidence >= t.steps.front().confidence ? 1 : 0;
      ++total;
    }
  }
  CHECK(improved >= 0.9 * total);
}

TEST_CASE("parallel latent optimization equals the serial run") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.max_steps = 30;
  c.pool_size = 12;
  const Matrix pool = sample_latent_pool(p, c);
  std::vector<Index> idx(12);
  std::iota(idx.begin(), idx.end(), Index{0});
  const auto serial = optimize_latents(m, p, pool, idx, 1, c, 1);
  const auto parallel = optimize_latents(m, p, pool, idx, 1, c, 3);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].final_x == parallel[i].final_x);
    CHECK(serial[i].step_count() == parallel[i].step_count());
  }
}

TEST_CASE("stage-one selection equals brute-force enumeration") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.pool_size = 50;
  c.candidates_per_class = 10;
  c.final_per_class = 3;
  c.transform = {0.2, 3};
  c.transform_count = 4;
  c.seed = 17;
  const Matrix pool = sample_latent_pool(p, c);
  const auto sel = sample_candidates(m, p, pool, {0, 1, 2}, c);
  const JitterTransform t = stage_transform(c, streams::kStage1);
  for (Index target = 0; target < 3; ++target) {
    std::vector<double> scores;
    for (Index i = 0; i < 50; ++i)
      scores.push_back(brute_force_confidence(m, prior_decode(p, pool.row(i).transpose()), t, 4, i, target));
    const auto expected = brute_force_top(scores, 10);
    CHECK(sel[static_cast<std::size_t>(target)].indices == expected);
    for (std::size_t k = 0; k < 10; ++k)
      CHECK(std::abs(sel[static_cast<std::size_t>(target)].scores[k] - scores[static_cast<std::size_t>(expected[k])]) <
            1e-12);
  }
}

TEST_CASE("stage-one degenerate cases") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.pool_size = 20;
  c.candidates_per_class = 20;
  c.final_per_class = 1;
  const Matrix pool = sample_latent_pool(p, c);
  const auto all = sample_candidates(m, p, pool, {1}, c);
  std::vector<Index> sorted = all[0].indices;
  std::sort(sorted.begin(), sorted.end());
  std::vector<Index> every(20);
  std::iota(every.begin(), every.end(), Index{0});
  CHECK(sorted == every);

  c.candidates_per_class = 5;
  c.transform = {0.0, 0};
  c.transform_count = 1;
  const auto plain = sample_candidates(m, p, pool, {2}, c);
  Matrix decoded(20, 2);
  for (Index i = 0; i < 20; ++i) decoded.row(i) = prior_decode(p, pool.row(i).transpose()).transpose();
  const Matrix probs = predict_proba(m, decoded);
  std::vector<double> conf(probs.col(2).data(), probs.col(2).data() + 20);
  CHECK(plain[0].indices == brute_force_top(conf, 5));
}

TEST_CASE("stage-one ranking follows candidate values, not their positions") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.pool_size = 30;
  c.candidates_per_class = 30;
  c.final_per_class = 1;
  c.transform = {0.0, 0};
  c.transform_count = 1;
  Matrix pool = sample_latent_pool(p, c);
  pool.row(7) = pool.row(3);  // exact tie: lower index first
  const auto a = sample_candidates(m, p, pool, {0}, c)[0];
  const auto pos3 = std::find(a.indices.begin(), a.indices.end(), 3);
  const auto pos7 = std::find(a.indices.begin(), a.indices.end(), 7);
  CHECK(pos3 < pos7);
  CHECK(pos7 - pos3 == 1);

  std::vector<Index> perm(30);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(8);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix shuffled(30, pool.cols());
  for (Index i = 0; i < 30; ++i) shuffled.row(i) = pool.row(perm[static_cast<std::size_t>(i)]);
  const auto b = sample_candidates(m, p, shuffled, {0}, c)[0];
  for (std::size_t k = 0; k < 30; ++k) CHECK(std::abs(b.scores[k] - a.scores[k]) < 1e-12);
}

TEST_CASE("stage-three selection equals brute-force scoring") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.loss = InputLoss::poincare();
  c.max_steps = 10;
  c.stop_confidence.reset();
  c.pool_size = 50;
  c.candidates_per_class = 50;
  c.final_per_class = 8;
  c.transform = {0.15, 1};
  c.transform_count = 3;
  c.seed = 23;
  const Matrix pool = sample_latent_pool(p, c);
  std::vector<Index> idx(50);
  std::iota(idx.begin(), idx.end(), Index{100});
  const auto traj = optimize_latents(m, p, pool, idx, 1, c);
  const auto result = select_results(m, p, traj, 1, c);
  const JitterTransform t = stage_transform(c, streams::kStage3, 1);
  std::vector<double> scores;
  for (Index i = 0; i < 50; ++i)
    scores.push_back(brute_force_confidence(m, traj[static_cast<std::size_t>(i)].final_x, t, 3, i, 1));
  const auto expected = brute_force_top(scores, 8);
  REQUIRE(result.selected.size() == 8);
  CHECK(result.shortfall.empty());
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(result.selected[k].candidate_index == 100 + expected[k]);
    CHECK(std::abs(result.selected[k].robust_confidence - scores[static_cast<std::size_t>(expected[k])]) < 1e-12);
  }

  AttackConfig all = c;
  all.final_per_class = 50;
  const auto identity = select_results(m, p, traj, 1, all);
  std::vector<Index> got;
  for (const auto& s : identity.selected) got.push_back(s.candidate_index);
  std::sort(got.begin(), got.end());
  CHECK(got == idx);
}

TEST_CASE("stage-three shortfall is recorded") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.max_steps = 5;
  c.pool_size = 4;
  c.candidates_per_class = 4;
  c.final_per_class = 3;
  const Matrix pool = sample_latent_pool(p, c);
  auto traj = optimize_latents(m, p, pool, {0, 1, 2, 3}, 0, c);
  traj[0].stop = traj[2].stop = StopReason::kFailed;
  const auto r = select_results(m, p, traj, 0, c);
  CHECK(r.selected.size() == 2);
  CHECK(!r.shortfall.empty());
  for (auto& t : traj) t.stop = StopReason::kFailed;
  CHECK_THROWS_AS(select_results(m, p, traj, 0, c), InvalidArgument);
}

TEST_CASE("pipeline determinism and shape") {
  const MlpClassifier& m = toy_model();
  const Prior p = fit_pca_prior(toy_data().features, 2);
  AttackConfig c;
  c.loss = InputLoss::poincare();
  c.max_steps = 20;
  c.pool_size = 40;
  c.candidates_per_class = 6;
  c.final_per_class = 2;
  c.transform_count = 3;
  c.seed = 9;
  const AttackRun a = run_ppa(m, p, {0, 1, 2}, c, 1);
  const AttackRun b = run_ppa(m, p, {0, 1, 2}, c, 3);
  CHECK(to_json(a).dump() == to_json(b).dump());
  const auto recon = a.reconstructions(3);
  CHECK(recon.size() == 6);
  for (int cls = 0; cls < 3; ++cls) CHECK(recon.class_size(cls) == 2);

  AttackConfig other = c;
  other.seed = 10;
  CHECK(to_json(run_ppa(m, p, {0, 1, 2}, other)).dump() != to_json(a).dump());
}

TEST_CASE("attack config") {
  AttackConfig c;
  c.loss = InputLoss::poincare();
  c.optimizer = OptimizerConfig::adam(0.1, 0.2, 1e-6);
  c.stop_confidence.reset();
  c.pool_size = 9;
  c.candidates_per_class = 4;
  c.final_per_class = 2;
  const AttackConfig back = attack_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(!back.stop_confidence.has_value());

  AttackConfig bad;
  bad.final_per_class = 2;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  CHECK_THROWS_AS(attack_config_from_json({{"max_step", 3}}), InvalidArgument);
  CHECK_THROWS_AS(attack_config_from_json({{"stop_confidence", 1.5}}), InvalidArgument);
}
