#include "lsmia/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace lsmia {

AttackAccuracy attack_accuracy(const MlpClassifier& eval_model, const LabeledDataset& reconstructions, int k) {
  const int classes = eval_model.config().num_classes;
  require(k >= 1 && k < classes, "attack_accuracy: k must satisfy 1 <= k < C");
  AttackAccuracy out;
  out.k = k;
  const Index n = reconstructions.size();
  if (n == 0) return out;
  const Matrix logits = forward_eval(eval_model, reconstructions.features).logits;
  Index top1 = 0, topk = 0;
  for (Index i = 0; i < n; ++i) {
    const int c = reconstructions.labels(i);
    const double own = logits(i, c);
    // rank = number of classes strictly ahead, plus lower-index ties
    int ahead = 0;
    for (int j = 0; j < classes; ++j)
      if (j != c && (logits(i, j) > own || (logits(i, j) == own && j < c))) ++ahead;
    top1 += ahead == 0 ? 1 : 0;
    topk += ahead < k ? 1 : 0;
  }
  out.acc_at_1 = static_cast<double>(top1) / static_cast<double>(n);
  out.acc_at_k = static_cast<double>(topk) / static_cast<double>(n);
  return out;
}

namespace {

Vector nearest_distances(const Matrix& queries, const Matrix& references) {
  Vector out(queries.rows());
  for (Index i = 0; i < queries.rows(); ++i)
    out(i) = std::sqrt((references.rowwise() - queries.row(i)).rowwise().squaredNorm().minCoeff());
  return out;
}

}  // namespace

double feature_distance(const MlpClassifier& eval_model, const Eigen::Ref<const Matrix>& reconstructions,
                        const LabeledDataset& train_data, int target_class) {
  const Matrix refs = train_data.class_rows(target_class);
  if (refs.rows() == 0) throw InvalidArgument("feature_distance: no training samples of the target class");
  if (reconstructions.rows() == 0) throw InvalidArgument("feature_distance: no reconstructions");
  return nearest_distances(penultimate_embedding(eval_model, reconstructions), penultimate_embedding(eval_model, refs))
      .mean();
}

double feature_distance(const MlpClassifier& eval_model, const LabeledDataset& reconstructions,
                        const LabeledDataset& train_data) {
  if (reconstructions.size() == 0) throw InvalidArgument("feature_distance: no reconstructions");
  double total = 0.0;
  for (int c = 0; c < reconstructions.class_count; ++c) {
    const Matrix rows = reconstructions.class_rows(c);
    if (rows.rows() == 0) continue;
    total += feature_distance(eval_model, rows, train_data, c) * static_cast<double>(rows.rows());
  }
  return total / static_cast<double>(reconstructions.size());
}

SurrogateConfig default_surrogate(const MlpConfig& target_family, std::uint64_t seed) {
  SurrogateConfig s;
  s.model = target_family;
  s.train.optimizer = OptimizerConfig::adam();
  s.train.learning_rate = 1e-3;
  s.train.epochs = 50;
  s.train.batch_size = 0;
  s.train.seed = seed;
  return s;
}

KnowledgeExtraction knowledge_extraction(const LabeledDataset& reconstructions, const LabeledDataset& original_train,
                                         const LabeledDataset& original_test, const SurrogateConfig& surrogate) {
  for (int c = 0; c < reconstructions.class_count; ++c)
    require(reconstructions.class_size(c) >= 1, "knowledge_extraction: every class needs a reconstruction");
  MlpClassifier model(surrogate.model, surrogate.train.seed);
  train(model, reconstructions, surrogate.train);
  KnowledgeExtraction out;
  out.xi_train = accuracy(model, original_train);
  out.xi_test = original_test.size() > 0 ? accuracy(model, original_test) : 0.0;
  return out;
}

std::optional<double> cosine_similarity(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

std::vector<SimilarityPoint> gradient_cosine_series(const std::vector<Trajectory>& trajectories) {
  std::size_t longest = 0;
  for (const auto& t : trajectories) {
    if (t.stop == StopReason::kFailed) continue;
    if (t.step_count() < 2) throw InvalidArgument("gradient_cosine_series: trajectory with fewer than two steps");
    longest = std::max(longest, t.step_count());
  }
  std::vector<SimilarityPoint> series(longest > 0 ? longest - 1 : 0);
  std::vector<double> sum(series.size(), 0.0), sumsq(series.size(), 0.0);
  for (const auto& t : trajectories) {
    if (t.stop == StopReason::kFailed) continue;
    for (std::size_t s = 1; s < t.step_count(); ++s) {
      const auto sc = cosine_similarity(t.steps[s].gradient, t.steps[s - 1].gradient);
      if (!sc) continue;
      sum[s - 1] += *sc;
      sumsq[s - 1] += *sc * *sc;
      ++series[s - 1].count;
    }
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i].count == 0) continue;
    const double n = series[i].count;
    series[i].mean = sum[i] / n;
    series[i].stddev = std::sqrt(std::max(0.0, sumsq[i] / n - series[i].mean * series[i].mean));
  }
  return series;
}

double mean_gradient_cosine(const std::vector<Trajectory>& trajectories) {
  double total = 0.0;
  int used = 0;
  for (const auto& t : trajectories) {
    if (t.stop == StopReason::kFailed || t.step_count() < 2) continue;
    double sum = 0.0;
    int n = 0;
    for (std::size_t s = 1; s < t.step_count(); ++s)
      if (const auto sc = cosine_similarity(t.steps[s].gradient, t.steps[s - 1].gradient)) {
        sum += *sc;
        ++n;
      }
    if (n == 0) continue;
    total += sum / n;
    ++used;
  }
  if (used == 0) throw InvalidArgument("mean_gradient_cosine: no trajectory with two or more defined steps");
  return total / used;
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / n);
  std::sort(values.begin(), values.end());
  // linear interpolation between order statistics
  auto quantile = [&](double q) {
    const double pos = q * (n - 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  s.q1 = quantile(0.25);
  s.median = quantile(0.5);
  s.q3 = quantile(0.75);
  return s;
}

EmbeddingStats embedding_stats(const Eigen::Ref<const Matrix>& embeddings, const Labels& labels, int class_count) {
  const Index n = embeddings.rows();
  require(labels.size() == n, "embedding_stats: label count mismatch");
  require(n >= 2, "embedding_stats: need at least two samples");

  Matrix dist = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) dist(i, j) = dist(j, i) = (embeddings.row(i) - embeddings.row(j)).norm();

  EmbeddingStats out;
  std::vector<Index> class_sizes(static_cast<std::size_t>(class_count), 0);
  for (Index i = 0; i < n; ++i) ++class_sizes[static_cast<std::size_t>(labels(i))];
  for (int c = 0; c < class_count; ++c)
    if (class_sizes[static_cast<std::size_t>(c)] == 1) out.excluded_classes.push_back(c);

  out.max_distance = dist.maxCoeff();
  const double scale = out.max_distance > 0.0 ? 1.0 / out.max_distance : 0.0;

  for (Index i = 0; i < n; ++i) {
    double intra_sum = 0.0, inter_sum = 0.0;
    double intra_min = std::numeric_limits<double>::infinity();
    double inter_min = std::numeric_limits<double>::infinity();
    Index intra_n = 0, inter_n = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dij = dist(i, j) * scale;
      if (labels(j) == labels(i)) {
        intra_sum += dij;
        intra_min = std::min(intra_min, dij);
        ++intra_n;
      } else {
        inter_sum += dij;
        inter_min = std::min(inter_min, dij);
        ++inter_n;
      }
    }
    if (intra_n > 0) {
      out.intra_mean_values.push_back(intra_sum / static_cast<double>(intra_n));
      out.intra_nearest_values.push_back(intra_min);
    }
    if (inter_n > 0) {
      out.inter_mean_values.push_back(inter_sum / static_cast<double>(inter_n));
      out.inter_nearest_values.push_back(inter_min);
    }
  }
  out.intraclass_mean = summarize(out.intra_mean_values);
  out.interclass_mean = summarize(out.inter_mean_values);
  out.intraclass_nearest = summarize(out.intra_nearest_values);
  out.interclass_nearest = summarize(out.inter_nearest_values);
  return out;
}

EmbeddingStats embedding_stats(const MlpClassifier& model, const LabeledDataset& dataset) {
  return embedding_stats(penultimate_embedding(model, dataset.features), dataset.labels, dataset.class_count);
}

// ---------------------------------------------------------------------------
// Adversarial probes

namespace {

Vector sign(const Vector& g) { return g.unaryExpr([](double v) { return double((v > 0.0) - (v < 0.0)); }); }

/// Signed ascent direction for the probe objective.
Vector probe_direction(const MlpClassifier& model, const Vector& x, int label, std::optional<int> target) {
  if (target) return -sign(input_gradient(model, x, InputLoss::ce_identity(), *target));
  return sign(input_gradient(model, x, InputLoss::ce_identity(), label));
}

}  // namespace

Vector fgsm(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, int label, double epsilon,
            std::optional<int> target) {
  require(epsilon >= 0.0, "fgsm: epsilon must be >= 0");
  const Vector x0 = x;
  return x0 + epsilon * probe_direction(model, x0, label, target);
}

Vector pgd(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, int label, const PgdConfig& config,
           std::optional<int> target, std::uint64_t draw_index) {
  require(config.epsilon >= 0.0, "pgd: epsilon must be >= 0");
  require(config.step_size > 0.0, "pgd: step_size must be > 0");
  require(config.steps >= 1, "pgd: steps must be >= 1");
  const Vector x0 = x;
  const Vector lower = (x0.array() - config.epsilon).matrix();
  const Vector upper = (x0.array() + config.epsilon).matrix();
  Vector adv = x0;
  if (config.random_start) {
    Rng rng(derive_seed(config.seed, streams::kAdversarial, draw_index));
    std::uniform_real_distribution<double> uniform(-config.epsilon, config.epsilon);
    for (Index j = 0; j < adv.size(); ++j) adv(j) += uniform(rng);
    adv = adv.cwiseMax(lower).cwiseMin(upper);
  }
  for (int s = 0; s < config.steps; ++s) {
    adv = adv + config.step_size * probe_direction(model, adv, label, target);
    adv = adv.cwiseMax(lower).cwiseMin(upper);
  }
  return adv;
}

AdversarialAttack parse_adversarial_attack(const std::string& name) {
  if (name == "fgsm") return AdversarialAttack::kFgsm;
  if (name == "pgd") return AdversarialAttack::kPgd;
  if (name == "bim") return AdversarialAttack::kBim;
  throw InvalidArgument("unknown adversarial attack '" + name + "'");
}

std::string to_string(AdversarialAttack attack) {
  switch (attack) {
    case AdversarialAttack::kFgsm: return "fgsm";
    case AdversarialAttack::kPgd: return "pgd";
    case AdversarialAttack::kBim: return "bim";
  }
  return "unknown";
}

RobustnessReport robustness(const MlpClassifier& model, const LabeledDataset& data, AdversarialAttack attack,
                            const PgdConfig& params) {
  require(data.size() > 0, "robustness: empty dataset");
  RobustnessReport report;
  report.attack = attack;
  report.params = params;
  if (attack == AdversarialAttack::kBim) report.params.random_start = false;
  report.samples = data.size();
  report.clean_accuracy = accuracy(model, data);

  const int classes = model.config().num_classes;
  Rng target_rng(derive_seed(params.seed, streams::kTargets));
  std::uniform_int_distribution<int> offset(1, classes - 1);

  auto run = [&](const Vector& x, int label, std::optional<int> target, std::uint64_t draw) {
    if (attack == AdversarialAttack::kFgsm) return fgsm(model, x, label, params.epsilon, target);
    return pgd(model, x, label, report.params, target, draw);
  };

  Index untargeted = 0, targeted = 0;
  for (Index i = 0; i < data.size(); ++i) {
    const Vector x = data.features.row(i).transpose();
    const int label = data.labels(i);
    const int target = (label + offset(target_rng)) % classes;
    const Vector adv_u = run(x, label, std::nullopt, static_cast<std::uint64_t>(2 * i));
    const Vector adv_t = run(x, label, target, static_cast<std::uint64_t>(2 * i + 1));
    const Labels pred = predict(model, (Matrix(2, x.size()) << adv_u.transpose(), adv_t.transpose()).finished());
    untargeted += pred(0) != label ? 1 : 0;
    targeted += pred(1) == target ? 1 : 0;
  }
  report.untargeted_success = static_cast<double>(untargeted) / static_cast<double>(data.size());
  report.targeted_success = static_cast<double>(targeted) / static_cast<double>(data.size());
  return report;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.stddev}, {"q1", s.q1}, {"median", s.median}, {"q3", s.q3}, {"count", s.count}};
}

nlohmann::json to_json(const EmbeddingStats& s) {
  return {{"intraclass_mean", to_json(s.intraclass_mean)},
          {"interclass_mean", to_json(s.interclass_mean)},
          {"intraclass_nearest", to_json(s.intraclass_nearest)},
          {"interclass_nearest", to_json(s.interclass_nearest)},
          {"intra_inter_ratio", s.intra_inter_ratio()},
          {"max_distance", s.max_distance},
          {"excluded_classes", s.excluded_classes},
          {"scaling", "global maximum pairwise distance"}};
}

nlohmann::json to_json(const RobustnessReport& r) {
  return {{"attack", to_string(r.attack)},
          {"epsilon", r.params.epsilon},
          {"step_size", r.params.step_size},
          {"steps", r.params.steps},
          {"random_start", r.params.random_start},
          {"seed", r.params.seed},
          {"samples", r.samples},
          {"clean_accuracy", r.clean_accuracy},
          {"untargeted_success", r.untargeted_success},
          {"targeted_success", r.targeted_success}};
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json series = nlohmann::json::array();
  for (const auto& p : r.gradient_similarity) series.push_back({{"mean", p.mean}, {"std", p.stddev}, {"count", p.count}});
  return {{"acc_at_1", r.accuracy.acc_at_1},
          {"acc_at_k", r.accuracy.acc_at_k},
          {"k", r.accuracy.k},
          {"delta_eval", r.delta_eval},
          {"xi_train", r.knowledge.xi_train},
          {"xi_test", r.knowledge.xi_test},
          {"ece", r.ece},
          {"test_accuracy", r.test_accuracy},
          {"embedding", to_json(r.embedding)},
          {"mean_gradient_similarity",
           r.mean_gradient_similarity ? nlohmann::json(*r.mean_gradient_similarity) : nlohmann::json()},
          {"gradient_similarity", series},
          {"notes", r.notes}};
}

}  // namespace lsmia
