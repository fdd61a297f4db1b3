#include "lsmia/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace lsmia {

void MlpConfig::validate() const {
  require(input_dim >= 1, "MlpConfig: input_dim must be >= 1");
  require(num_classes >= 2, "MlpConfig: num_classes must be >= 2");
  for (int h : hidden_dims) require(h >= 1, "MlpConfig: hidden dims must be >= 1");
}

void TrainConfig::validate() const {
  require(learning_rate > 0.0, "TrainConfig: learning_rate must be > 0");
  require(epochs >= 1, "TrainConfig: epochs must be >= 1");
  require(batch_size >= 0, "TrainConfig: batch_size must be >= 1 (0 selects full batch)");
  require(smoothing.target_alpha <= 1.0, "TrainConfig: smoothing alpha must be <= 1");
  require(smoothing.warmup_epochs >= 0 && smoothing.ramp_epochs >= 0, "TrainConfig: negative schedule length");
}

MlpClassifier::MlpClassifier(const MlpConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  Rng rng(derive_seed(seed, streams::kInit));
  int fan_in = config_.input_dim;
  std::vector<int> widths = config_.hidden_dims;
  widths.push_back(config_.num_classes);
  for (int width : widths) {
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> uniform(-bound, bound);
    DenseLayer layer;
    layer.weight.resize(width, fan_in);
    for (Index j = 0; j < layer.weight.cols(); ++j)
      for (Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = uniform(rng);
    layer.bias = Vector::Zero(width);
    dense_.push_back(std::move(layer));
    fan_in = width;
  }
  if (config_.batch_norm) {
    for (int h : config_.hidden_dims) {
      BatchNormLayer bn;
      bn.gamma = Vector::Ones(h);
      bn.beta = Vector::Zero(h);
      bn.running_mean = Vector::Zero(h);
      bn.running_var = Vector::Ones(h);
      bn_.push_back(std::move(bn));
    }
  }
}

Index MlpClassifier::parameter_count() const {
  Index n = 0;
  for (const auto& l : dense_) n += l.weight.size() + l.bias.size();
  for (const auto& b : bn_) n += b.gamma.size() + b.beta.size();
  return n;
}

namespace {

ForwardResult forward_impl(const MlpClassifier& model, std::vector<BatchNormLayer>* bn_update,
                           const Eigen::Ref<const Matrix>& batch, Mode mode) {
  const auto& cfg = model.config();
  require(batch.cols() == cfg.input_dim, "forward: batch width " + std::to_string(batch.cols()) +
                                             " does not match input_dim " + std::to_string(cfg.input_dim));
  require(batch.rows() >= 1, "forward: empty batch");
  if (mode == Mode::kTrain && cfg.batch_norm && batch.rows() < 2)
    throw InvalidArgument("forward: train-mode batch norm needs at least two samples");

  ForwardResult out;
  ForwardCache& cache = out.cache;
  cache.mode = mode;
  cache.input = batch;
  const double n = static_cast<double>(batch.rows());

  const Matrix* h = &cache.input;
  for (std::size_t l = 0; l < model.hidden_layers(); ++l) {
    const DenseLayer& layer = model.dense()[l];
    Matrix z = (*h) * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    Matrix y;
    if (cfg.batch_norm) {
      const BatchNormLayer& bn = model.batch_norm()[l];
      RowVector mean, var;
      if (mode == Mode::kTrain) {
        mean = z.colwise().mean();
        var = (z.rowwise() - mean).array().square().colwise().mean();
        BatchNormLayer& target = (*bn_update)[l];
        target.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * mean.transpose();
        target.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * (var.transpose() * (n / (n - 1.0)));
      } else {
        mean = bn.running_mean.transpose();
        var = bn.running_var.transpose();
      }
      Vector inv_std = (var.transpose().array() + bn.epsilon).rsqrt().matrix();
      Matrix xhat = (z.rowwise() - mean).array().rowwise() * inv_std.transpose().array();
      y = (xhat.array().rowwise() * bn.gamma.transpose().array()).matrix();
      y.rowwise() += bn.beta.transpose();
      cache.normalized.push_back(std::move(xhat));
      cache.inv_std.push_back(std::move(inv_std));
    } else {
      y = z;
    }
    cache.pre_norm.push_back(std::move(z));
    cache.activations.push_back(y.cwiseMax(0.0));
    if (!cache.activations.back().allFinite())
      throw NumericError("forward: non-finite activations in hidden layer " + std::to_string(l + 1));
    h = &cache.activations.back();
  }
  const DenseLayer& last = model.dense().back();
  out.logits = (*h) * last.weight.transpose();
  out.logits.rowwise() += last.bias.transpose();
  if (!out.logits.allFinite()) throw NumericError("forward: non-finite values in output layer");
  return out;
}

}  // namespace

ForwardResult forward(MlpClassifier& model, const Eigen::Ref<const Matrix>& batch, Mode mode) {
  if (mode == Mode::kEval) return forward_eval(model, batch);
  // Statistics are staged into a copy so the pass itself sees the pre-update running values.
  std::vector<BatchNormLayer> updated = model.batch_norm();
  ForwardResult out = forward_impl(model, &updated, batch, mode);
  if (model.config().batch_norm) model.mutable_batch_norm() = std::move(updated);
  out.cache.revision = model.revision();
  return out;
}

ForwardResult forward_eval(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch) {
  ForwardResult out = forward_impl(model, nullptr, batch, Mode::kEval);
  out.cache.revision = model.revision();
  return out;
}

BackwardResult backward(const MlpClassifier& model, const ForwardCache& cache,
                        const Eigen::Ref<const Matrix>& logit_gradients) {
  if (cache.revision != model.revision())
    throw InvalidState("backward: forward cache is stale (model changed since the forward pass)");
  const auto& cfg = model.config();
  const std::size_t hidden = model.hidden_layers();
  if (cache.activations.size() != hidden || cache.input.cols() != cfg.input_dim)
    throw InvalidState("backward: cache does not match the model architecture");
  if (logit_gradients.rows() != cache.input.rows() || logit_gradients.cols() != cfg.num_classes)
    throw InvalidArgument("backward: logit gradient shape mismatch");

  BackwardResult out;
  MlpGradients& g = out.parameters;
  g.weight.resize(hidden + 1);
  g.bias.resize(hidden + 1);
  if (cfg.batch_norm) {
    g.gamma.resize(hidden);
    g.beta.resize(hidden);
  }
  const double n = static_cast<double>(cache.input.rows());

  Matrix upstream = logit_gradients;
  for (std::size_t step = 0; step <= hidden; ++step) {
    const std::size_t l = hidden - step;
    const Matrix& layer_input = l == 0 ? cache.input : cache.activations[l - 1];
    Matrix dz;
    if (l == hidden) {
      dz = upstream;
    } else {
      Matrix dy = (cache.activations[l].array() > 0.0).select(upstream, 0.0);
      if (cfg.batch_norm) {
        const BatchNormLayer& bn = model.batch_norm()[l];
        const Matrix& xhat = cache.normalized[l];
        const Vector& inv_std = cache.inv_std[l];
        g.gamma[l] = (dy.array() * xhat.array()).colwise().sum().transpose();
        g.beta[l] = dy.colwise().sum().transpose();
        Matrix dxhat = dy.array().rowwise() * bn.gamma.transpose().array();
        if (cache.mode == Mode::kTrain) {
          const RowVector sum_dxhat = dxhat.colwise().sum();
          const RowVector sum_dxhat_xhat = (dxhat.array() * xhat.array()).colwise().sum();
          Matrix centered = (n * dxhat).rowwise() - sum_dxhat;
          centered -= (xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
          dz = (centered.array().rowwise() * (inv_std.transpose().array() / n)).matrix();
        } else {
          dz = dxhat.array().rowwise() * inv_std.transpose().array();
        }
      } else {
        dz = std::move(dy);
      }
    }
    const DenseLayer& layer = model.dense()[l];
    g.weight[l] = dz.transpose() * layer_input;
    g.bias[l] = dz.colwise().sum().transpose();
    upstream = dz * layer.weight;
  }
  out.input = std::move(upstream);
  return out;
}

Matrix predict_proba(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch) {
  return softmax_rows(forward_eval(model, batch).logits);
}

Labels predict(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch) {
  const Matrix logits = forward_eval(model, batch).logits;
  Labels out(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) out(i) = static_cast<int>(argmax(logits.row(i)));
  return out;
}

double accuracy(const MlpClassifier& model, const LabeledDataset& data) {
  if (data.size() == 0) return 0.0;
  const Labels pred = predict(model, data.features);
  return static_cast<double>((pred.array() == data.labels.array()).count()) / static_cast<double>(data.size());
}

Matrix penultimate_embedding(const MlpClassifier& model, const Eigen::Ref<const Matrix>& batch) {
  require(model.hidden_layers() >= 1, "penultimate_embedding: model has no hidden layer");
  return forward_eval(model, batch).cache.activations.back();
}

InputGradient evaluate_input(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, const InputLoss& loss,
                             Index target_class) {
  require(x.size() == model.config().input_dim, "input_gradient: input dimension mismatch");
  const Matrix row = x.transpose();
  const ForwardResult fwd = forward_eval(model, row);
  const Vector logits = fwd.logits.row(0).transpose();
  const LossValue lv = evaluate_loss(loss, logits, target_class);
  const BackwardResult back = backward(model, fwd.cache, lv.logit_gradient.transpose());
  InputGradient out;
  out.loss = lv.value;
  out.probabilities = lv.probabilities;
  out.gradient = back.input.row(0).transpose();
  out.clamped = lv.clamped;
  if (!out.gradient.allFinite()) throw NumericError("input_gradient: non-finite gradient");
  return out;
}

Vector input_gradient(const MlpClassifier& model, const Eigen::Ref<const Vector>& x, const InputLoss& loss,
                      Index target_class) {
  return evaluate_input(model, x, loss, target_class).gradient;
}

Vector flatten_parameters(const MlpClassifier& model) {
  Vector flat(model.parameter_count());
  Index k = 0;
  auto put = [&](const auto& m) {
    flat.segment(k, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    k += m.size();
  };
  for (const auto& l : model.dense()) {
    put(l.weight);
    put(l.bias);
  }
  for (const auto& b : model.batch_norm()) {
    put(b.gamma);
    put(b.beta);
  }
  return flat;
}

void assign_parameters(MlpClassifier& model, const Eigen::Ref<const Vector>& flat) {
  require(flat.size() == model.parameter_count(), "assign_parameters: size mismatch");
  Index k = 0;
  auto take = [&](auto& m) {
    Eigen::Map<Vector>(m.data(), m.size()) = flat.segment(k, m.size());
    k += m.size();
  };
  for (auto& l : model.mutable_dense()) {
    take(l.weight);
    take(l.bias);
  }
  for (auto& b : model.mutable_batch_norm()) {
    take(b.gamma);
    take(b.beta);
  }
}

Vector flatten(const MlpGradients& grads) {
  Index total = 0;
  for (std::size_t l = 0; l < grads.weight.size(); ++l) total += grads.weight[l].size() + grads.bias[l].size();
  for (std::size_t l = 0; l < grads.gamma.size(); ++l) total += grads.gamma[l].size() + grads.beta[l].size();
  Vector flat(total);
  Index k = 0;
  auto put = [&](const auto& m) {
    flat.segment(k, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    k += m.size();
  };
  for (std::size_t l = 0; l < grads.weight.size(); ++l) {
    put(grads.weight[l]);
    put(grads.bias[l]);
  }
  for (std::size_t l = 0; l < grads.gamma.size(); ++l) {
    put(grads.gamma[l]);
    put(grads.beta[l]);
  }
  return flat;
}

BatchLoss smoothed_batch_loss(const Eigen::Ref<const Matrix>& logits, const Labels& labels, double alpha) {
  require(logits.rows() == labels.size(), "smoothed_batch_loss: label count mismatch");
  const Index n = logits.rows();
  const Index classes = logits.cols();
  BatchLoss out;
  out.probabilities = softmax_rows(logits);
  out.logit_gradient.resize(n, classes);
  for (Index i = 0; i < n; ++i) {
    const auto target = smooth_labels<double>(labels(i), alpha, classes);
    const Vector p = out.probabilities.row(i).transpose();
    out.loss += smoothed_ce_loss(p, target);
    out.logit_gradient.row(i) = logit_gradient(p, target).transpose();
  }
  out.loss /= static_cast<double>(n);
  out.logit_gradient /= static_cast<double>(n);
  return out;
}

double ece(const Eigen::Ref<const Matrix>& probabilities, const Labels& labels, int bins) {
  require(bins >= 1, "ece: bins must be >= 1");
  require(probabilities.rows() == labels.size(), "ece: label count mismatch");
  const Index n = probabilities.rows();
  if (n == 0) return 0.0;
  std::vector<double> conf_sum(bins, 0.0), correct(bins, 0.0), count(bins, 0.0);
  for (Index i = 0; i < n; ++i) {
    const Index pred = argmax(probabilities.row(i));
    const double conf = probabilities(i, pred);
    const int b = std::clamp(static_cast<int>(std::floor(conf * bins)), 0, bins - 1);
    conf_sum[b] += conf;
    correct[b] += pred == labels(i) ? 1.0 : 0.0;
    count[b] += 1.0;
  }
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (count[b] == 0.0) continue;
    const double gap = correct[b] / count[b] - conf_sum[b] / count[b];
    total += count[b] / static_cast<double>(n) * gap * gap;
  }
  return std::sqrt(total);
}

TrainHistory train(MlpClassifier& model, const LabeledDataset& data, const TrainConfig& config,
                   const LabeledDataset* test) {
  config.validate();
  require(data.size() > 0, "train: empty dataset");
  require(data.dim() == model.config().input_dim, "train: dataset dimension does not match the model");
  for (Index i = 0; i < data.size(); ++i)
    require(data.labels(i) >= 0 && data.labels(i) < model.config().num_classes, "train: label out of range");

  const Index n = data.size();
  const Index batch = (config.batch_size <= 0 || config.batch_size >= n) ? n : config.batch_size;
  const bool bn = model.config().batch_norm;
  Optimizer optimizer(config.optimizer, model.parameter_count());
  Rng shuffle_rng(derive_seed(config.seed, streams::kShuffle));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  TrainHistory history;
  history.epochs.reserve(static_cast<std::size_t>(config.epochs));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double alpha = schedule_alpha(config.smoothing, epoch);
    double lr = config.learning_rate;
    for (int m : config.lr_milestones)
      if (epoch >= m) lr *= config.lr_decay_factor;
    if (batch < n) std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    Index correct = 0, seen = 0;
    for (Index start = 0; start < n; start += batch) {
      const Index len = std::min(batch, n - start);
      if (bn && len < 2) continue;
      Matrix xb(len, data.dim());
      Labels yb(len);
      for (Index r = 0; r < len; ++r) {
        const Index src = order[static_cast<std::size_t>(start + r)];
        xb.row(r) = data.features.row(src);
        yb(r) = data.labels(src);
      }
      ForwardResult fwd;
      try {
        fwd = forward(model, xb, Mode::kTrain);
      } catch (const NumericError& e) {
        throw TrainingDiverged(epoch, e.what());
      }
      const BatchLoss bl = smoothed_batch_loss(fwd.logits, yb, alpha);
      if (!std::isfinite(bl.loss)) throw TrainingDiverged(epoch, "non-finite loss");
      const BackwardResult back = backward(model, fwd.cache, bl.logit_gradient);
      Vector params = flatten_parameters(model);
      optimizer.step(params, flatten(back.parameters), lr);
      if (!params.allFinite()) throw TrainingDiverged(epoch, "non-finite parameters");
      assign_parameters(model, params);

      loss_sum += bl.loss * static_cast<double>(len);
      seen += len;
      for (Index r = 0; r < len; ++r) correct += argmax(fwd.logits.row(r)) == yb(r) ? 1 : 0;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.alpha = alpha;
    rec.learning_rate = lr;
    rec.loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.accuracy = seen > 0 ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (test != nullptr && test->size() > 0) {
      const Matrix p = predict_proba(model, test->features);
      Index ok = 0;
      for (Index i = 0; i < p.rows(); ++i) ok += argmax(p.row(i)) == test->labels(i) ? 1 : 0;
      rec.test_accuracy = static_cast<double>(ok) / static_cast<double>(test->size());
      rec.test_ece = ece(p, test->labels, 10);
    }
    history.epochs.push_back(rec);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Matrix matrix_from_json(const nlohmann::json& j, Index rows, Index cols) {
  if (!j.is_array() || static_cast<Index>(j.size()) != rows) throw ValidationError("checkpoint: bad matrix shape");
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const auto& row = j.at(static_cast<std::size_t>(i));
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) throw ValidationError("checkpoint: bad matrix row");
    for (Index c = 0; c < cols; ++c) m(i, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

Vector vector_from_json(const nlohmann::json& j, Index size) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<Index>(v.size()) != size) throw ValidationError("checkpoint: bad vector length");
  return Eigen::Map<const Vector>(v.data(), size);
}

}  // namespace

nlohmann::json to_json(const MlpConfig& c) {
  return {{"input_dim", c.input_dim},
          {"hidden_dims", c.hidden_dims},
          {"num_classes", c.num_classes},
          {"batch_norm", c.batch_norm},
          {"activation", "relu"}};
}

MlpConfig mlp_config_from_json(const nlohmann::json& j) {
  MlpConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.hidden_dims = j.value("hidden_dims", c.hidden_dims);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.batch_norm = j.value("batch_norm", c.batch_norm);
  if (j.value("activation", std::string("relu")) != "relu") throw InvalidArgument("only relu activation is supported");
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json opt = {{"kind", to_string(c.optimizer.kind)}};
  if (c.optimizer.kind == OptimizerConfig::Kind::kSgd) {
    opt["momentum"] = c.optimizer.momentum;
  } else {
    opt["beta1"] = c.optimizer.beta1;
    opt["beta2"] = c.optimizer.beta2;
    opt["epsilon"] = c.optimizer.epsilon;
  }
  return {{"optimizer", opt},
          {"learning_rate", c.learning_rate},
          {"lr_milestones", c.lr_milestones},
          {"lr_decay_factor", c.lr_decay_factor},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"smoothing",
           {{"alpha", c.smoothing.target_alpha},
            {"warmup_epochs", c.smoothing.warmup_epochs},
            {"ramp_epochs", c.smoothing.ramp_epochs}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
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
  c.lr_milestones = j.value("lr_milestones", c.lr_milestones);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("smoothing")) {
    const auto& s = j.at("smoothing");
    c.smoothing.target_alpha = s.value("alpha", 0.0);
    if (s.contains("warmup_epochs") || s.contains("ramp_epochs")) {
      c.smoothing.warmup_epochs = s.value("warmup_epochs", 0);
      c.smoothing.ramp_epochs = s.value("ramp_epochs", 0);
    } else {
      c.smoothing = default_schedule(c.smoothing.target_alpha, c.epochs);
    }
  }
  c.validate();
  return c;
}

nlohmann::json checkpoint_json(const MlpClassifier& model) {
  nlohmann::json dense = nlohmann::json::array();
  for (const auto& l : model.dense()) dense.push_back({{"weight", matrix_json(l.weight)}, {"bias", vector_json(l.bias)}});
  nlohmann::json bn = nlohmann::json::array();
  for (const auto& b : model.batch_norm())
    bn.push_back({{"gamma", vector_json(b.gamma)},
                  {"beta", vector_json(b.beta)},
                  {"running_mean", vector_json(b.running_mean)},
                  {"running_var", vector_json(b.running_var)},
                  {"epsilon", b.epsilon},
                  {"momentum", b.momentum}});
  return {{"format", "lsmia.mlp"},
          {"version", 1},
          {"config", to_json(model.config())},
          {"seed", model.seed()},
          {"dense", dense},
          {"batch_norm", bn}};
}

MlpClassifier model_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "lsmia.mlp") throw ValidationError("checkpoint: unknown format");
  if (j.value("version", 0) != 1) throw ValidationError("checkpoint: unsupported version");
  const MlpConfig cfg = mlp_config_from_json(j.at("config"));
  MlpClassifier model(cfg, j.at("seed").get<std::uint64_t>());
  auto& dense = model.mutable_dense();
  const auto& jd = j.at("dense");
  if (jd.size() != dense.size()) throw ValidationError("checkpoint: layer count mismatch");
  for (std::size_t l = 0; l < dense.size(); ++l) {
    dense[l].weight = matrix_from_json(jd[l].at("weight"), dense[l].weight.rows(), dense[l].weight.cols());
    dense[l].bias = vector_from_json(jd[l].at("bias"), dense[l].bias.size());
  }
  auto& bn = model.mutable_batch_norm();
  const auto& jb = j.at("batch_norm");
  if (jb.size() != bn.size()) throw ValidationError("checkpoint: batch-norm layer count mismatch");
  for (std::size_t l = 0; l < bn.size(); ++l) {
    const Index h = bn[l].gamma.size();
    bn[l].gamma = vector_from_json(jb[l].at("gamma"), h);
    bn[l].beta = vector_from_json(jb[l].at("beta"), h);
    bn[l].running_mean = vector_from_json(jb[l].at("running_mean"), h);
    bn[l].running_var = vector_from_json(jb[l].at("running_var"), h);
    bn[l].epsilon = jb[l].at("epsilon").get<double>();
    bn[l].momentum = jb[l].at("momentum").get<double>();
    if ((bn[l].running_var.array() <= 0.0).any()) throw ValidationError("checkpoint: non-positive running variance");
  }
  return model;
}

void save_checkpoint(const MlpClassifier& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << checkpoint_json(model).dump(1) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

MlpClassifier load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint " + path.string() + ": " + e.what());
  }
  return model_from_checkpoint(j);
}

}  // namespace lsmia
