#pragma once

// Config-driven experiment runner: the plumbing behind the command line tool.
// Every stochastic choice is derived from the master seed.

#include "lsmia/classifier.hpp"
#include "lsmia/core.hpp"
#include "lsmia/data.hpp"
#include "lsmia/inversion.hpp"
#include "lsmia/metrics.hpp"

#include <nlohmann/json.hpp>

#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace lsmia {

enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kNumeric = 5,
  kVerification = 6,
};

/// Raised when a verification run breaches a tolerance.
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps an in-flight exception onto its exit status.
ExitCode exit_code_for(const std::exception_ptr& error);

struct DataSection {
  enum class Source { kBlobs, kCsv };
  Source source = Source::kBlobs;
  BlobSpec blobs = BlobSpec::triangle();
  std::filesystem::path path;  // csv source
  double test_fraction = 0.1;
  int aux_per_class = 100;     // attacker's held-out data, same distribution
};

struct TargetSpec {
  std::string name;
  SmoothingSchedule smoothing;
};

struct PriorSection {
  Prior::Kind kind = Prior::Kind::kPca;
  int latent_dim = 2;
};

/// Direct input-space attacks started from auxiliary samples of one class.
struct SimpleAttackSection {
  AttackConfig attack;
  int source_class = 1;
  int target_class = 2;
  int starts = 1;
};

struct PpaSection {
  AttackConfig attack;
  std::vector<Index> target_classes;  // empty: every class
};

struct MetricsSection {
  std::optional<int> k;  // default min(5, C - 1)
  int ece_bins = 10;
  int surrogate_epochs = 50;
  double surrogate_learning_rate = 1e-3;
};

struct RobustnessSection {
  std::vector<AdversarialAttack> attacks{AdversarialAttack::kFgsm, AdversarialAttack::kPgd};
  PgdConfig params;
};

struct GridSection {
  double x_min = -4.0, x_max = 4.0, y_min = -4.0, y_max = 4.0;
  int resolution = 101;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  DataSection data;
  MlpConfig model;
  TrainConfig train;
  std::vector<TargetSpec> targets;
  MlpConfig eval_model;
  TrainConfig eval_train;
  PriorSection prior;
  SimpleAttackSection simple;
  PpaSection ppa;
  MetricsSection metrics;
  RobustnessSection robustness;
  GridSection grid;

  void validate() const;
  const TargetSpec& target(const std::string& name) const;
};

/// Missing fields take their defaults; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Canonical form; excludes the output directory.
nlohmann::json to_json(const ExperimentConfig& config);
/// The three-model toy comparison.
ExperimentConfig toy_preset();

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& config);

/// Header embedded in every artifact. The timestamp never enters a hash.
nlohmann::json provenance(const ExperimentConfig& config);
/// Writes `payload` with provenance and a payload hash (computed without the timestamp).
void write_artifact(const std::filesystem::path& path, const ExperimentConfig& config, nlohmann::json payload);
nlohmann::json read_json(const std::filesystem::path& path);
/// Artifact with its timestamp removed, for byte comparisons.
std::string stable_dump(nlohmann::json artifact);

struct ExperimentData {
  LabeledDataset train;
  LabeledDataset test;
  LabeledDataset aux;
};

ExperimentData make_data(const ExperimentConfig& config);

struct TrainedModel {
  TargetSpec spec;
  MlpClassifier model;
  TrainHistory history;
};

TrainedModel train_target(const ExperimentConfig& config, const ExperimentData& data, const TargetSpec& spec);
std::vector<TrainedModel> train_targets(const ExperimentConfig& config, const ExperimentData& data, int jobs = 1);
/// Independent architecture and seed, hard labels, trained on the target training split.
MlpClassifier train_eval_model(const ExperimentConfig& config, const ExperimentData& data);
Prior make_prior(const ExperimentConfig& config, const ExperimentData& data);

struct SimpleAttackResult {
  std::vector<Trajectory> trajectories;
  double mean_distance = 0.0;  // input-space l2 to the nearest target-class training point
  double mean_steps = 0.0;
  double success_rate = 0.0;   // stop confidence reached
  std::optional<double> mean_gradient_similarity;
};

SimpleAttackResult run_simple_attacks(const ExperimentConfig& config, const MlpClassifier& model,
                                      const ExperimentData& data, int jobs = 1);
AttackRun run_ppa_attack(const ExperimentConfig& config, const MlpClassifier& model, const Prior& prior,
                         int jobs = 1);
MetricsReport evaluate_attack(const ExperimentConfig& config, const AttackRun& run, const MlpClassifier& target,
                              const MlpClassifier& eval_model, const ExperimentData& data);
std::vector<RobustnessReport> run_robustness(const ExperimentConfig& config, const MlpClassifier& model,
                                             const ExperimentData& data);

/// Rows (x1, x2, p_1 .. p_C) over a resolution x resolution grid, x1 varying fastest.
Matrix confidence_grid(const MlpClassifier& model, const GridSection& grid);

nlohmann::json to_json(const SimpleAttackResult& result);

struct ModelComparison {
  std::string name;
  double alpha = 0.0;
  double test_accuracy = 0.0;
  double test_ece = 0.0;
  SimpleAttackResult simple;
  MetricsReport metrics;
  std::vector<RobustnessReport> robustness;
};

/// The whole pipeline for every target model of the config.
std::vector<ModelComparison> run_comparison(const ExperimentConfig& config, int jobs = 1);
nlohmann::json to_json(const ModelComparison& comparison);

// Commands. Each writes its artifacts under config.output_dir.

void cmd_gen_data(const ExperimentConfig& config);
void cmd_train(const ExperimentConfig& config, int jobs = 1);
void cmd_attack(const ExperimentConfig& config, const std::string& mode, int jobs = 1);
void cmd_evaluate(const ExperimentConfig& config, int jobs = 1);
/// Throws VerificationFailure naming the first breached check.
nlohmann::json cmd_verify_gradients(std::uint64_t seed, const std::optional<std::filesystem::path>& out);
void cmd_confidence_grid(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& out_csv);
void cmd_robustness(const ExperimentConfig& config, const std::optional<AdversarialAttack>& attack, int jobs = 1);
void cmd_run(const ExperimentConfig& config, int jobs = 1);

}  // namespace lsmia
