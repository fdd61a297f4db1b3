#include "lsmia/inversion.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

namespace lsmia {

// ---------------------------------------------------------------------------
// Priors

Prior identity_prior(Index dim) {
  require(dim >= 1, "identity_prior: dim must be >= 1");
  Prior p;
  p.kind = Prior::Kind::kIdentity;
  p.mean = Vector::Zero(dim);
  p.components = Matrix::Identity(dim, dim);
  return p;
}

Prior fit_pca_prior(const Eigen::Ref<const Matrix>& aux_data, Index latent_dim) {
  const Index n = aux_data.rows();
  const Index d = aux_data.cols();
  require(latent_dim >= 1, "fit_pca_prior: latent_dim must be >= 1");
  require(n >= 2 && latent_dim <= std::min(n - 1, d), "fit_pca_prior: latent_dim must be <= min(N - 1, d)");
  if (!aux_data.allFinite()) throw NumericError("fit_pca_prior: non-finite data");

  Prior p;
  p.kind = Prior::Kind::kPca;
  p.mean = aux_data.colwise().mean().transpose();
  const Matrix centered = aux_data.rowwise() - p.mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("fit_pca_prior: eigendecomposition failed");
  // eigenvalues ascend; take the top k in descending order
  p.components.resize(d, latent_dim);
  p.explained_variance.resize(latent_dim);
  for (Index j = 0; j < latent_dim; ++j) {
    Vector w = eig.eigenvectors().col(d - 1 - j);
    // deterministic orientation: largest-magnitude entry positive
    Index big = 0;
    w.cwiseAbs().maxCoeff(&big);
    if (w(big) < 0.0) w = -w;
    p.components.col(j) = w;
    p.explained_variance(j) = eig.eigenvalues()(d - 1 - j);
  }
  return p;
}

Vector prior_decode(const Prior& prior, const Eigen::Ref<const Vector>& z) {
  require(z.size() == prior.latent_dim(), "prior_decode: latent dimension mismatch");
  if (prior.kind == Prior::Kind::kIdentity) return z;
  return prior.mean + prior.components * z;
}

Vector prior_encode(const Prior& prior, const Eigen::Ref<const Vector>& x) {
  require(x.size() == prior.input_dim(), "prior_encode: input dimension mismatch");
  if (prior.kind == Prior::Kind::kIdentity) return x;
  return prior.components.transpose() * (x - prior.mean);
}

Vector latent_gradient(const Prior& prior, const Eigen::Ref<const Vector>& input_gradient) {
  require(input_gradient.size() == prior.input_dim(), "latent_gradient: dimension mismatch");
  if (prior.kind == Prior::Kind::kIdentity) return input_gradient;
  return prior.components.transpose() * input_gradient;
}

// ---------------------------------------------------------------------------
// Configuration

void AttackConfig::validate() const {
  require(max_steps >= 1, "AttackConfig: max_steps must be >= 1");
  require(learning_rate >= 0.0, "AttackConfig: learning_rate must be >= 0");
  if (stop_confidence)
    require(*stop_confidence > 0.0 && *stop_confidence <= 1.0, "AttackConfig: stop_confidence must lie in (0, 1]");
  require(final_per_class >= 1, "AttackConfig: final_per_class must be >= 1");
  require(final_per_class <= candidates_per_class, "AttackConfig: final_per_class must be <= candidates_per_class");
  require(candidates_per_class <= pool_size, "AttackConfig: candidates_per_class must be <= pool_size");
  require(transform.stddev >= 0.0, "AttackConfig: transform stddev must be >= 0");
  require(transform_count >= 1, "AttackConfig: transform_count must be >= 1");
}

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::kConfidence: return "confidence";
    case StopReason::kMaxSteps: return "max_steps";
    case StopReason::kFailed: return "failed";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Optimization

namespace {

Trajectory run_optimization(const MlpClassifier& model, const Prior& prior, const Eigen::Ref<const Vector>& z0,
                            Index target_class, const AttackConfig& config, Index candidate_index) {
  require(target_class >= 0 && target_class < model.config().num_classes, "attack: target class out of range");
  require(z0.size() == prior.latent_dim(), "attack: latent dimension mismatch");
  const bool latent = prior.kind != Prior::Kind::kIdentity;
  Trajectory traj;
  traj.target_class = target_class;
  traj.candidate_index = candidate_index;
  traj.steps.reserve(static_cast<std::size_t>(std::min(config.max_steps, 1024)));

  Optimizer optimizer(config.optimizer, prior.latent_dim());
  Vector z = z0;
  for (int t = 0;; ++t) {
    const Vector x = prior_decode(prior, z);
    InputGradient ev;
    try {
      ev = evaluate_input(model, x, config.loss, target_class);
    } catch (const NumericError& e) {
      throw NumericError("attack step " + std::to_string(t) + ": " + e.what());
    }
    traj.clamp_events += ev.clamped ? 1 : 0;
    const double conf = ev.probabilities(target_class);
    const bool confident = config.stop_confidence && conf > *config.stop_confidence;
    if (confident || t == config.max_steps) {
      traj.final_x = x;
      if (latent) traj.final_z = z;
      traj.final_loss = ev.loss;
      traj.final_confidence = conf;
      traj.stop = confident ? StopReason::kConfidence : StopReason::kMaxSteps;
      break;
    }
    TrajectoryStep step;
    step.x = x;
    if (latent) step.z = z;
    step.loss = ev.loss;
    step.confidence = conf;
    step.gradient = ev.gradient;
    traj.steps.push_back(std::move(step));
    const Vector gz = latent_gradient(prior, traj.steps.back().gradient);
    optimizer.step(z, gz, config.learning_rate);
    if (!z.allFinite()) throw NumericError("attack step " + std::to_string(t) + ": non-finite iterate");
  }
  return traj;
}

}  // namespace

Trajectory optimize_latent(const MlpClassifier& model, const Prior& prior, const Eigen::Ref<const Vector>& z0,
                           Index target_class, const AttackConfig& config, Index candidate_index) {
  try {
    return run_optimization(model, prior, z0, target_class, config, candidate_index);
  } catch (const NumericError& e) {
    Trajectory failed;
    failed.target_class = target_class;
    failed.candidate_index = candidate_index;
    failed.stop = StopReason::kFailed;
    failed.failure = e.what();
    return failed;
  }
}

Trajectory simple_invert(const MlpClassifier& model, Index target_class, const Eigen::Ref<const Vector>& start,
                         const AttackConfig& config) {
  require(config.max_steps >= 1, "simple_invert: max_steps must be >= 1");
  return run_optimization(model, identity_prior(start.size()), start, target_class, config, 0);
}

// ---------------------------------------------------------------------------
// Three-stage pipeline

Matrix sample_latent_pool(const Prior& prior, const AttackConfig& config) {
  Rng rng(derive_seed(config.seed, streams::kPool));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix pool(config.pool_size, prior.latent_dim());
  for (Index i = 0; i < pool.rows(); ++i)
    for (Index j = 0; j < pool.cols(); ++j) pool(i, j) = normal(rng);
  return pool;
}

JitterTransform stage_transform(const AttackConfig& config, std::uint64_t stage, Index target_class) {
  return {config.transform.stddev,
          derive_seed(config.seed ^ config.transform.seed, stage, static_cast<std::uint64_t>(target_class))};
}

Matrix robust_confidence(const MlpClassifier& model, const Eigen::Ref<const Matrix>& points,
                         const JitterTransform& transform, int transform_count) {
  require(transform_count >= 1, "robust_confidence: transform_count must be >= 1");
  const Index n = points.rows();
  Matrix jittered(n * transform_count, points.cols());
  for (Index i = 0; i < n; ++i)
    for (int t = 0; t < transform_count; ++t)
      jittered.row(i * transform_count + t) =
          apply_jitter(points.row(i).transpose(), transform, static_cast<std::uint64_t>(i * transform_count + t))
              .transpose();
  const Matrix probs = predict_proba(model, jittered);
  Matrix mean = Matrix::Zero(n, probs.cols());
  for (Index i = 0; i < n; ++i) {
    for (int t = 0; t < transform_count; ++t) mean.row(i) += probs.row(i * transform_count + t);
    mean.row(i) /= static_cast<double>(transform_count);
  }
  return mean;
}

namespace {

/// Indices sorted by descending score, ascending index on ties.
std::vector<Index> rank_descending(const std::vector<double>& scores) {
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return order;
}

}  // namespace

std::vector<CandidateSelection> sample_candidates(const MlpClassifier& model, const Prior& prior,
                                                  const Eigen::Ref<const Matrix>& pool,
                                                  const std::vector<Index>& target_classes,
                                                  const AttackConfig& config) {
  require(pool.rows() >= config.candidates_per_class, "sample_candidates: pool smaller than candidates_per_class");
  require(pool.cols() == prior.latent_dim(), "sample_candidates: pool latent dimension mismatch");
  Matrix decoded(pool.rows(), prior.input_dim());
  for (Index i = 0; i < pool.rows(); ++i) decoded.row(i) = prior_decode(prior, pool.row(i).transpose()).transpose();
  const Matrix scores =
      robust_confidence(model, decoded, stage_transform(config, streams::kStage1), config.transform_count);

  std::vector<CandidateSelection> out;
  for (Index c : target_classes) {
    require(c >= 0 && c < model.config().num_classes, "sample_candidates: target class out of range");
    std::vector<double> col(scores.col(c).data(), scores.col(c).data() + scores.rows());
    const auto order = rank_descending(col);
    CandidateSelection sel;
    sel.target_class = c;
    for (int k = 0; k < config.candidates_per_class; ++k) {
      sel.indices.push_back(order[static_cast<std::size_t>(k)]);
      sel.scores.push_back(col[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
    }
    out.push_back(std::move(sel));
  }
  return out;
}

std::vector<Trajectory> optimize_latents(const MlpClassifier& model, const Prior& prior,
                                         const Eigen::Ref<const Matrix>& latents,
                                         const std::vector<Index>& candidate_indices, Index target_class,
                                         const AttackConfig& config, int jobs) {
  require(static_cast<Index>(candidate_indices.size()) == latents.rows(),
          "optimize_latents: one candidate index per latent row required");
  const std::size_t n = candidate_indices.size();
  std::vector<Trajectory> out(n);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < n; i += stride)
      out[i] = optimize_latent(model, prior, latents.row(static_cast<Index>(i)).transpose(), target_class, config,
                               candidate_indices[i]);
  };
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }
  return out;
}

SelectionResult select_results(const MlpClassifier& model, const Prior& prior,
                               const std::vector<Trajectory>& optimized, Index target_class,
                               const AttackConfig& config) {
  (void)prior;
  std::vector<const Trajectory*> usable;
  for (const auto& t : optimized)
    if (t.stop != StopReason::kFailed) usable.push_back(&t);
  if (usable.empty()) throw InvalidArgument("select_results: no successfully optimized candidates");

  Matrix points(static_cast<Index>(usable.size()), usable.front()->final_x.size());
  for (std::size_t i = 0; i < usable.size(); ++i) points.row(static_cast<Index>(i)) = usable[i]->final_x.transpose();
  const Matrix conf = robust_confidence(model, points, stage_transform(config, streams::kStage3, target_class),
                                        config.transform_count);
  std::vector<double> scores(conf.col(target_class).data(), conf.col(target_class).data() + conf.rows());
  const auto order = rank_descending(scores);

  SelectionResult result;
  const auto keep = std::min<std::size_t>(usable.size(), static_cast<std::size_t>(config.final_per_class));
  if (keep < static_cast<std::size_t>(config.final_per_class))
    result.shortfall = "only " + std::to_string(usable.size()) + " usable candidates for " +
                       std::to_string(config.final_per_class) + " requested results";
  for (std::size_t k = 0; k < keep; ++k) {
    const Trajectory& t = *usable[static_cast<std::size_t>(order[k])];
    SelectedResult r;
    r.candidate_index = t.candidate_index;
    r.latent = t.final_z.size() > 0 ? t.final_z : t.final_x;
    r.point = t.final_x;
    r.robust_confidence = scores[static_cast<std::size_t>(order[k])];
    result.selected.push_back(std::move(r));
  }
  return result;
}

AttackRun run_ppa(const MlpClassifier& model, const Prior& prior, const std::vector<Index>& target_classes,
                  const AttackConfig& config, int jobs) {
  config.validate();
  require(!target_classes.empty(), "run_ppa: no target classes");
  require(prior.input_dim() == model.config().input_dim, "run_ppa: prior and model input dimensions differ");
  AttackRun run;
  run.config = config;
  run.target_classes = target_classes;

  Matrix pool;
  std::vector<CandidateSelection> initial;
  try {
    pool = sample_latent_pool(prior, config);
    initial = sample_candidates(model, prior, pool, target_classes, config);
  } catch (const std::exception& e) {
    throw NumericError(std::string("stage 1 (sampling): ") + e.what());
  }
  for (std::size_t c = 0; c < target_classes.size(); ++c) {
    ClassAttack ca;
    ca.target_class = target_classes[c];
    ca.initial = initial[c];
    Matrix latents(static_cast<Index>(ca.initial.indices.size()), pool.cols());
    for (std::size_t k = 0; k < ca.initial.indices.size(); ++k)
      latents.row(static_cast<Index>(k)) = pool.row(ca.initial.indices[k]);
    ca.trajectories = optimize_latents(model, prior, latents, ca.initial.indices, ca.target_class, config, jobs);
    try {
      SelectionResult sel = select_results(model, prior, ca.trajectories, ca.target_class, config);
      ca.selected = std::move(sel.selected);
      ca.shortfall = std::move(sel.shortfall);
    } catch (const std::exception& e) {
      ca.shortfall = std::string("stage 3 (selection): ") + e.what();
    }
    run.classes.push_back(std::move(ca));
  }
  return run;
}

LabeledDataset AttackRun::reconstructions(int class_count) const {
  std::size_t total = 0;
  for (const auto& c : classes) total += c.selected.size();
  LabeledDataset ds;
  ds.class_count = class_count;
  ds.features.resize(static_cast<Index>(total), classes.empty() || classes.front().selected.empty()
                                                    ? 0
                                                    : classes.front().selected.front().point.size());
  ds.labels.resize(static_cast<Index>(total));
  Index r = 0;
  for (const auto& c : classes)
    for (const auto& s : c.selected) {
      if (ds.features.cols() == 0) ds.features.resize(static_cast<Index>(total), s.point.size());
      ds.features.row(r) = s.point.transpose();
      ds.labels(r++) = static_cast<int>(c.target_class);
    }
  ds.provenance = {{"source", "attack_run"}};
  return ds;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
nlohmann::json vec(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
}  // namespace

nlohmann::json to_json(const AttackConfig& c) {
  nlohmann::json opt = {{"kind", to_string(c.optimizer.kind)}};
  if (c.optimizer.kind == OptimizerConfig::Kind::kSgd) {
    opt["momentum"] = c.optimizer.momentum;
  } else {
    opt["beta1"] = c.optimizer.beta1;
    opt["beta2"] = c.optimizer.beta2;
    opt["epsilon"] = c.optimizer.epsilon;
  }
  nlohmann::json j = {{"loss", to_string(c.loss.kind)},
                      {"optimizer", opt},
                      {"learning_rate", c.learning_rate},
                      {"max_steps", c.max_steps},
                      {"pool_size", c.pool_size},
                      {"candidates_per_class", c.candidates_per_class},
                      {"final_per_class", c.final_per_class},
                      {"transform_stddev", c.transform.stddev},
                      {"transform_count", c.transform_count},
                      {"seed", c.seed}};
  if (c.loss.kind == InputLoss::Kind::kSmoothedCe) j["loss_alpha"] = c.loss.alpha;
  j["stop_confidence"] = c.stop_confidence ? nlohmann::json(*c.stop_confidence) : nlohmann::json(nullptr);
  return j;
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> kKeys = {"loss", "loss_alpha", "optimizer", "learning_rate", "max_steps",
                                                 "stop_confidence", "pool_size", "candidates_per_class",
                                                 "final_per_class", "transform_stddev", "transform_count", "seed"};
  for (const auto& [key, value] : j.items())
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end())
      throw InvalidArgument("attack config: unknown key '" + key + "'");
  AttackConfig c;
  if (j.contains("loss")) c.loss.kind = parse_loss_kind(j.at("loss").get<std::string>());
  c.loss.alpha = j.value("loss_alpha", 0.0);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    const std::string kind = o.value("kind", std::string("sgd"));
    if (kind == "sgd") {
      c.optimizer = OptimizerConfig::sgd(o.value("momentum", 0.0));
    } else if (kind == "adam") {
      c.optimizer = OptimizerConfig::adam(o.value("beta1", 0.9), o.value("beta2", 0.999), o.value("epsilon", 1e-8));
    } else {
      throw InvalidArgument("unknown optimizer '" + kind + "'");
    }
  }
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.max_steps = j.value("max_steps", c.max_steps);
  if (j.contains("stop_confidence")) {
    if (j.at("stop_confidence").is_null())
      c.stop_confidence.reset();
    else
      c.stop_confidence = j.at("stop_confidence").get<double>();
  }
  c.pool_size = j.value("pool_size", c.pool_size);
  c.candidates_per_class = j.value("candidates_per_class", c.candidates_per_class);
  c.final_per_class = j.value("final_per_class", c.final_per_class);
  c.transform.stddev = j.value("transform_stddev", c.transform.stddev);
  c.transform_count = j.value("transform_count", c.transform_count);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json to_json(const Prior& p) {
  nlohmann::json j = {{"kind", p.kind == Prior::Kind::kIdentity ? "identity" : "pca"},
                      {"input_dim", p.input_dim()},
                      {"latent_dim", p.latent_dim()}};
  if (p.kind == Prior::Kind::kPca) {
    j["mean"] = vec(p.mean);
    nlohmann::json cols = nlohmann::json::array();
    for (Index k = 0; k < p.components.cols(); ++k) cols.push_back(vec(p.components.col(k)));
    j["components"] = cols;
    j["explained_variance"] = vec(p.explained_variance);
  }
  return j;
}

nlohmann::json to_json(const AttackRun& run) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : run.classes) {
    nlohmann::json selected = nlohmann::json::array();
    for (const auto& s : c.selected)
      selected.push_back({{"candidate_index", s.candidate_index},
                          {"point", vec(s.point)},
                          {"latent", vec(s.latent)},
                          {"robust_confidence", s.robust_confidence}});
    nlohmann::json trajectories = nlohmann::json::array();
    for (const auto& t : c.trajectories) {
      nlohmann::json tj = {{"candidate_index", t.candidate_index},
                           {"steps", t.step_count()},
                           {"stop_reason", to_string(t.stop)},
                           {"final_confidence", t.final_confidence},
                           {"final_loss", t.final_loss},
                           {"clamp_events", t.clamp_events}};
      if (!t.failure.empty()) tj["failure"] = t.failure;
      trajectories.push_back(std::move(tj));
    }
    nlohmann::json cj = {{"target_class", c.target_class},
                         {"initial_indices", c.initial.indices},
                         {"initial_scores", c.initial.scores},
                         {"trajectories", trajectories},
                         {"selected", selected}};
    if (!c.shortfall.empty()) cj["shortfall"] = c.shortfall;
    classes.push_back(std::move(cj));
  }
  return {{"config", to_json(run.config)}, {"target_classes", run.target_classes}, {"classes", classes}};
}

void write_trajectory_csv(const Trajectory& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const Index d = t.final_x.size();
  const Index k = t.final_z.size();
  out << "step";
  for (Index j = 0; j < d; ++j) out << ",x" << j;
  for (Index j = 0; j < k; ++j) out << ",z" << j;
  out << ",loss,confidence";
  for (Index j = 0; j < d; ++j) out << ",grad" << j;
  out << "\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << ',' << buf;
  };
  for (std::size_t s = 0; s < t.steps.size(); ++s) {
    const auto& st = t.steps[s];
    out << s;
    for (Index j = 0; j < d; ++j) num(st.x(j));
    for (Index j = 0; j < k; ++j) num(st.z(j));
    num(st.loss);
    num(st.confidence);
    for (Index j = 0; j < d; ++j) num(st.gradient(j));
    out << "\n";
  }
  // final state, gradient columns left empty
  out << t.steps.size();
  for (Index j = 0; j < d; ++j) num(t.final_x(j));
  for (Index j = 0; j < k; ++j) num(t.final_z(j));
  num(t.final_loss);
  num(t.final_confidence);
  for (Index j = 0; j < d; ++j) out << ',';
  out << "\n";
}

void save_attack_run(const AttackRun& run, const std::filesystem::path& dir, const nlohmann::json& provenance) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "trajectories", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json j = to_json(run);
  j["provenance"] = provenance;
  {
    std::ofstream out(dir / "run.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "run.json").string());
    out << j.dump(1) << "\n";
  }
  for (const auto& c : run.classes)
    for (const auto& t : c.trajectories) {
      if (t.stop == StopReason::kFailed) continue;
      write_trajectory_csv(t, dir / "trajectories" /
                                  ("class" + std::to_string(c.target_class) + "_cand" +
                                   std::to_string(t.candidate_index) + ".csv"));
    }
}

}  // namespace lsmia
