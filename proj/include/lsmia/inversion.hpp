#pragma once

// Model inversion: gradient-based reconstruction of class-representative
// inputs from a frozen classifier, optionally through an affine latent prior,
// and the three-stage sample / optimize / select pipeline.
//
// Attacks only ever see the model and the prior, never training data.

#include "lsmia/classifier.hpp"
#include "lsmia/core.hpp"
#include "lsmia/data.hpp"
#include "lsmia/losses.hpp"
#include "lsmia/optim.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lsmia {

/// x = mean + components * z. The identity prior has k == d and W = I.
struct Prior {
  enum class Kind { kIdentity, kPca };
  Kind kind = Kind::kIdentity;
  Vector mean;
  Matrix components;          // d x k, orthonormal columns
  Vector explained_variance;  // pca only, descending

  Index input_dim() const { return mean.size(); }
  Index latent_dim() const { return components.cols(); }
};

Prior identity_prior(Index dim);
/// Top-k principal directions of `aux_data` (rows are samples).
Prior fit_pca_prior(const Eigen::Ref<const Matrix>& aux_data, Index latent_dim);
Vector prior_decode(const Prior& prior, const Eigen::Ref<const Vector>& z);
Vector prior_encode(const Prior& prior, const Eigen::Ref<const Vector>& x);
/// Pulls an input-space gradient back to latent space (W^T g).
Vector latent_gradient(const Prior& prior, const Eigen::Ref<const Vector>& input_gradient);

struct AttackConfig {
  InputLoss loss = InputLoss::ce_identity();
  OptimizerConfig optimizer = OptimizerConfig::sgd(0.0);
  double learning_rate = 0.1;
  int max_steps = 5000;
  std::optional<double> stop_confidence = 0.95;
  int pool_size = 1;
  int candidates_per_class = 1;
  int final_per_class = 1;
  JitterTransform transform{0.1, 0};
  int transform_count = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class StopReason { kConfidence, kMaxSteps, kFailed };
std::string to_string(StopReason reason);

struct TrajectoryStep {
  Vector x;
  Vector z;  // empty for the identity prior
  double loss = 0.0;
  double confidence = 0.0;
  Vector gradient;  // input-space gradient at x
};

/// One optimization run. `steps[t]` holds the state before update t; the
/// state after the last update is in the final_* fields.
struct Trajectory {
  Index target_class = 0;
  Index candidate_index = 0;
  std::vector<TrajectoryStep> steps;
  Vector final_x;
  Vector final_z;
  double final_loss = 0.0;
  double final_confidence = 0.0;
  StopReason stop = StopReason::kMaxSteps;
  int clamp_events = 0;
  std::string failure;

  std::size_t step_count() const { return steps.size(); }
};

struct SelectedResult {
  Index candidate_index = 0;
  Vector latent;
  Vector point;
  double robust_confidence = 0.0;
};

struct CandidateSelection {
  Index target_class = 0;
  std::vector<Index> indices;  // pool indices, best first
  std::vector<double> scores;
};

struct ClassAttack {
  Index target_class = 0;
  CandidateSelection initial;
  std::vector<Trajectory> trajectories;
  std::vector<SelectedResult> selected;
  std::string shortfall;
};

struct AttackRun {
  AttackConfig config;
  std::vector<Index> target_classes;
  std::vector<ClassAttack> classes;

  /// Selected reconstructions stacked as rows, with their target labels.
  LabeledDataset reconstructions(int class_count) const;
};

/// Latent optimization for one candidate; numeric failures are recorded in
/// the returned trajectory (stop == kFailed) rather than thrown.
Trajectory optimize_latent(const MlpClassifier& model, const Prior& prior, const Eigen::Ref<const Vector>& z0,
                           Index target_class, const AttackConfig& config, Index candidate_index = 0);

/// Direct input-space attack; throws NumericError on a non-finite gradient.
Trajectory simple_invert(const MlpClassifier& model, Index target_class, const Eigen::Ref<const Vector>& start,
                         const AttackConfig& config);

/// Standard-normal latent pool of `config.pool_size` rows.
Matrix sample_latent_pool(const Prior& prior, const AttackConfig& config);

/// Jitter used for stage-1 (pool) and stage-3 (selection) scoring.
JitterTransform stage_transform(const AttackConfig& config, std::uint64_t stage, Index target_class = 0);

/// Mean target-class confidence over `transform_count` jittered copies of
/// each row of `points`; row i uses draw indices i*T .. i*T + T-1.
Matrix robust_confidence(const MlpClassifier& model, const Eigen::Ref<const Matrix>& points,
                         const JitterTransform& transform, int transform_count);

std::vector<CandidateSelection> sample_candidates(const MlpClassifier& model, const Prior& prior,
                                                  const Eigen::Ref<const Matrix>& pool,
                                                  const std::vector<Index>& target_classes,
                                                  const AttackConfig& config);

std::vector<Trajectory> optimize_latents(const MlpClassifier& model, const Prior& prior,
                                         const Eigen::Ref<const Matrix>& latents,
                                         const std::vector<Index>& candidate_indices, Index target_class,
                                         const AttackConfig& config, int jobs = 1);

struct SelectionResult {
  std::vector<SelectedResult> selected;
  std::string shortfall;
};

SelectionResult select_results(const MlpClassifier& model, const Prior& prior,
                               const std::vector<Trajectory>& optimized, Index target_class,
                               const AttackConfig& config);

AttackRun run_ppa(const MlpClassifier& model, const Prior& prior, const std::vector<Index>& target_classes,
                  const AttackConfig& config, int jobs = 1);

nlohmann::json to_json(const AttackConfig& config);
AttackConfig attack_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Prior& prior);
nlohmann::json to_json(const AttackRun& run);
/// Writes `run.json` and one CSV per trajectory into `dir`.
void save_attack_run(const AttackRun& run, const std::filesystem::path& dir, const nlohmann::json& provenance);
void write_trajectory_csv(const Trajectory& trajectory, const std::filesystem::path& path);

}  // namespace lsmia
