#pragma once

// Feedforward rectifier classifier with optional batch normalization after
// every hidden linear layer:
//
//   x -> [Linear -> BatchNorm -> ReLU] x H -> Linear -> logits
//
// Forward/backward are written out by hand; parameters can be viewed as one
// flat vector for optimizers and finite-difference checks.

#include "lsmia/core.hpp"
#include "lsmia/data.hpp"
#include "lsmia/losses.hpp"
#include "lsmia/optim.hpp"
#include "lsmia/smoothing.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <vector>

namespace lsmia {

struct MlpConfig {
  int input_dim = 2;
  std::vector<int> hidden_dims{20, 20};
  int num_classes = 3;
  bool batch_norm = true;

  void validate() const;
};

enum class Mode { kTrain, kEval };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;
};

struct BatchNormLayer {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;
};

class MlpClassifier {
 public:
  /// He-uniform weights (bound sqrt(6 / fan_in)) drawn from `seed`; zero biases.
  MlpClassifier(const MlpConfig& config, std::uint64_t seed);

  const MlpConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  /// Bumped on every mutation; used to detect stale forward caches.
  std::uint64_t revision() const { return revision_; }

  const std::vector<DenseLayer>& dense() const { return dense_; }
  const std::vector<BatchNormLayer>& batch_norm() const { return bn_; }
  std::vector<DenseLayer>& mutable_dense() {
    ++revision_;
    return dense_;
  }
  std::vector<BatchNormLayer>& mutable_batch_norm() {
    ++revision_;
    return bn_;
  }

  std::size_t hidden_layers() const { return config_.hidden_dims.size(); }
  Index parameter_count() const;

 private:
  MlpConfig config_;
  std::uint64_t seed_ = 0;
  std::uint64_t revision_ = 0;
  std::vector<DenseLayer> dense_;
  std::vector<BatchNormLayer> bn_;
};

/// Activation record of one forward pass.
struct ForwardCache {
  Mode mode = Mode::kEval;
  std::uint64_t revision = 0;
  Matrix input;
  std::vector<Matrix> pre_norm;    // linear outputs of hidden layers
  std::vector<Matrix> normalized;  // x_hat (batch norm only)
  std::vector<Vector> inv_std;     // per-feature 1/sqrt(var + eps) used in the pass
  std::vector<Matrix> activations; // post-ReLU outputs of hidden layers
};

struct ForwardResult {
  Matrix logits;
  ForwardCache cache;
};

struct MlpGradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  std::vector<Vector> gamma;
  std::vector<Vector> beta;
};

struct BackwardResult {
  MlpGradients parameters;
  Matrix input;
};

/// Train mode uses batch statistics and updates the running statistics.
ForwardResult forward(MlpClassifier& model, const Eigen::Ref<const Matrix>& batch, Mode mode);
/// Eval-mode forward; never mutates the model.
ForwardResult forward_eval(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch);

BackwardResult backward(const MlpClassifier& model, const ForwardCache& cache,
                        const Eigen::Ref<const Matrix>& logit_gradients);

Matrix predict_proba(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch);
Labels predict(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch);
double accuracy(const MlpClassifier& model, const LabeledDataset& data);

/// Post-ReLU activations of the last hidden layer in eval mode.
Matrix penultimate_embedding(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch);

struct InputGradient {
  double loss = 0.0;
  Vector probabilities;
  Vector gradient;
  bool clamped = false;
};

/// Loss value, probabilities and input gradient at one input (eval mode).
InputGradient evaluate_input(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, const InputLoss& loss,
                             Index target_class);
Vector input_gradient(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, const InputLoss& loss,
                      Index target_class);

/// Parameters in a fixed order: per dense layer weight (column-major) and
/// bias, then per batch-norm layer gamma and beta.
Vector flatten_parameters(const MlpClassifier& model);
void assign_parameters(MlpClassifier& model, const Eigen::Ref<const Vector>& flat);
Vector flatten(const MlpGradients& grads);

/// Mean smoothed cross-entropy over a batch and its logit gradient (already divided by N).
struct BatchLoss {
  double loss = 0.0;
  Matrix logit_gradient;
  Matrix probabilities;
};
BatchLoss smoothed_batch_loss(const Eigen::Ref<const Matrix>& logits, const Labels& labels, double alpha);

struct TrainConfig {
  OptimizerConfig optimizer = OptimizerConfig::sgd(0.9);
  double learning_rate = 0.001;
  std::vector<int> lr_milestones;
  double lr_decay_factor = 0.1;
  int epochs = 5000;
  int batch_size = 0;  // 0 or >= N: full batch
  std::uint64_t seed = 0;
  SmoothingSchedule smoothing;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double alpha = 0.0;
  double learning_rate = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<double> test_accuracy;
  std::optional<double> test_ece;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

/// Trains in place. With `test` given, each epoch also records eval-mode
/// test accuracy and ECE.
TrainHistory train(MlpClassifier& model, const LabeledDataset& data, const TrainConfig& config,
                   const LabeledDataset* test = nullptr);

/// l2 expected calibration error over `bins` equal-width confidence bins.
double ece(const Eigen::Ref<const Matrix>& probabilities, const Labels& labels, int bins = 10);

nlohmann::json to_json(const MlpConfig& config);
MlpConfig mlp_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json checkpoint_json(const MlpClassifier& model);
MlpClassifier model_from_checkpoint(const nlohmann::json& j);
void save_checkpoint(const MlpClassifier& model, const std::filesystem::path& path);
MlpClassifier load_checkpoint(const std::filesystem::path& path);

}  // namespace lsmia
