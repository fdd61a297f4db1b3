#pragma once

// Attack and model evaluation quantities.

#include "lsmia/classifier.hpp"
#include "lsmia/core.hpp"
#include "lsmia/data.hpp"
#include "lsmia/inversion.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <vector>

namespace lsmia {

struct AttackAccuracy {
  double acc_at_1 = 0.0;
  double acc_at_k = 0.0;
  int k = 1;
};

/// Fraction of reconstructions whose eval-model top-1 / top-k prediction
/// contains their target class. Requires 1 <= k < C.
AttackAccuracy attack_accuracy(const MlpClassifier& eval_model, const LabeledDataset& reconstructions, int k);

/// Mean penultimate-space l2 distance from each reconstruction to the
/// nearest training sample of `target_class`.
double feature_distance(const MlpClassifier& eval_model, const Eigen::Ref<const Matrix>& reconstructions,
                        const LabeledDataset& train_data, int target_class);

/// Same, over a labeled reconstruction set (each row against its own class).
double feature_distance(const MlpClassifier& eval_model, const LabeledDataset& reconstructions,
                        const LabeledDataset& train_data);

struct SurrogateConfig {
  MlpConfig model;
  TrainConfig train;
};

/// Surrogate of the target family: fresh seed, Adam lr 1e-3, 50 epochs.
SurrogateConfig default_surrogate(const MlpConfig& target_family, std::uint64_t seed);

struct KnowledgeExtraction {
  double xi_train = 0.0;
  double xi_test = 0.0;
};

KnowledgeExtraction knowledge_extraction(const LabeledDataset& reconstructions, const LabeledDataset& original_train,
                                         const LabeledDataset& original_test, const SurrogateConfig& surrogate);

struct SimilarityPoint {
  double mean = 0.0;
  double stddev = 0.0;
  int count = 0;
};

/// Cosine similarity of two gradients; nullopt when either has zero norm.
std::optional<double> cosine_similarity(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b);

/// S_C between consecutive recorded gradients, aggregated across
/// trajectories per step index (entry t compares steps t+1 and t).
std::vector<SimilarityPoint> gradient_cosine_series(const std::vector<Trajectory>& trajectories);

/// Per-trajectory mean of S_C over all consecutive steps, averaged over trajectories.
double mean_gradient_cosine(const std::vector<Trajectory>& trajectories);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  int count = 0;
};

Summary summarize(std::vector<double> values);

struct EmbeddingStats {
  Summary intraclass_mean;
  Summary interclass_mean;
  Summary intraclass_nearest;
  Summary interclass_nearest;
  double max_distance = 0.0;
  std::vector<int> excluded_classes;  // fewer than two samples

  /// Per-sample distributions (already max-scaled) behind the summaries.
  std::vector<double> intra_mean_values, inter_mean_values, intra_nearest_values, inter_nearest_values;

  double intra_inter_ratio() const { return intraclass_mean.mean / interclass_mean.mean; }
};

EmbeddingStats embedding_stats(const MlpClassifier& model, const LabeledDataset& dataset);
/// Same statistics on precomputed embeddings.
EmbeddingStats embedding_stats(const Eigen::Ref<const Matrix>& embeddings, const Labels& labels, int class_count);

// Adversarial probes. All use the hard-label cross-entropy; untargeted steps
// ascend the loss of `label`, targeted steps descend the loss of `target`.

Vector fgsm(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, int label, double epsilon,
            std::optional<int> target = std::nullopt);

struct PgdConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int steps = 10;
  bool random_start = true;
  std::uint64_t seed = 0;

  static PgdConfig bim(double epsilon, double step_size, int steps) { return {epsilon, step_size, steps, false, 0}; }
};

Vector pgd(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, int label, const PgdConfig& config,
           std::optional<int> target = std::nullopt, std::uint64_t draw_index = 0);

enum class AdversarialAttack { kFgsm, kPgd, kBim };
AdversarialAttack parse_adversarial_attack(const std::string& name);
std::string to_string(AdversarialAttack attack);

struct RobustnessReport {
  AdversarialAttack attack = AdversarialAttack::kFgsm;
  PgdConfig params;
  double clean_accuracy = 0.0;
  double untargeted_success = 0.0;
  double targeted_success = 0.0;
  Index samples = 0;
};

/// Runs the probe over every sample, untargeted and targeted (random target
/// label != true label per sample, seeded by params.seed).
RobustnessReport robustness(const MlpClassifier& model, const LabeledDataset& data, AdversarialAttack attack,
                            const PgdConfig& params);

/// Everything measured for one attacked model.
struct MetricsReport {
  AttackAccuracy accuracy;
  double delta_eval = 0.0;
  KnowledgeExtraction knowledge;
  double ece = 0.0;
  double test_accuracy = 0.0;
  EmbeddingStats embedding;
  std::vector<SimilarityPoint> gradient_similarity;
  std::optional<double> mean_gradient_similarity;  // unset when no trajectory has two steps
  std::vector<std::string> notes;
};

nlohmann::json to_json(const MetricsReport& r);
nlohmann::json to_json(const Summary& s);
nlohmann::json to_json(const EmbeddingStats& s);
nlohmann::json to_json(const RobustnessReport& r);

}  // namespace lsmia
