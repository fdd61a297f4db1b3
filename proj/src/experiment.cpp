#include "lsmia/experiment.hpp"

#include "lsmia/verify.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <future>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <thread>

namespace lsmia {

namespace fs = std::filesystem;

ExitCode exit_code_for(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const VerificationFailure&) {
    return ExitCode::kVerification;
  } catch (const NumericError&) {
    return ExitCode::kNumeric;
  } catch (const IoError&) {
    return ExitCode::kIo;
  } catch (const fs::filesystem_error&) {
    return ExitCode::kIo;
  } catch (const InvalidArgument&) {
    return ExitCode::kConfig;
  } catch (const ValidationError&) {
    return ExitCode::kConfig;
  } catch (const ParseError&) {
    return ExitCode::kConfig;
  } catch (const nlohmann::json::exception&) {
    return ExitCode::kConfig;
  } catch (...) {
    return ExitCode::kFailure;
  }
}

// ---------------------------------------------------------------------------
// Config

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw InvalidArgument(where + ": unknown key '" + key + "'");
}

json schedule_json(const SmoothingSchedule& s) {
  return {{"alpha", s.target_alpha}, {"warmup_epochs", s.warmup_epochs}, {"ramp_epochs", s.ramp_epochs}};
}

SmoothingSchedule schedule_from_json(const json& j, int epochs) {
  const double alpha = j.value("alpha", 0.0);
  if (!j.contains("warmup_epochs") && !j.contains("ramp_epochs")) return default_schedule(alpha, epochs);
  return {alpha, j.value("warmup_epochs", 0), j.value("ramp_epochs", 0)};
}

json pgd_json(const PgdConfig& p) {
  return {{"epsilon", p.epsilon}, {"step_size", p.step_size}, {"steps", p.steps}, {"random_start", p.random_start}};
}

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vec_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  eval_model.validate();
  train.validate();
  eval_train.validate();
  simple.attack.validate();
  ppa.attack.validate();
  require(!targets.empty(), "config: at least one target model is required");
  std::set<std::string> names;
  for (const auto& t : targets) {
    require(!t.name.empty(), "config: target names must be non-empty");
    require(t.name != "eval", "config: target name 'eval' is reserved");
    require(names.insert(t.name).second, "config: duplicate target name '" + t.name + "'");
    require(t.smoothing.target_alpha <= 1.0, "config: smoothing alpha must be <= 1");
  }
  require(data.test_fraction > 0.0 && data.test_fraction < 1.0, "config: test_fraction must be in (0, 1)");
  require(data.aux_per_class >= 1, "config: aux_per_class must be positive");
  if (data.source == DataSection::Source::kBlobs) {
    require(static_cast<int>(data.blobs.centers.size()) == model.num_classes,
            "config: number of blob centers must equal model.num_classes");
    for (const auto& c : data.blobs.centers)
      require(c.size() == model.input_dim, "config: blob center dimension must equal model.input_dim");
    require(data.blobs.stddev >= 0.0, "config: blob stddev must be nonnegative");
    require(data.blobs.samples_per_class >= 2, "config: samples_per_class must be at least 2");
  } else {
    require(!data.path.empty(), "config: csv data source requires a path");
  }
  require(eval_model.input_dim == model.input_dim && eval_model.num_classes == model.num_classes,
          "config: eval model must share input and class dimensions with the targets");
  const int classes = model.num_classes;
  require(simple.source_class >= 0 && simple.source_class < classes, "config: simple.source_class out of range");
  require(simple.target_class >= 0 && simple.target_class < classes, "config: simple.target_class out of range");
  require(simple.starts >= 1, "config: simple.starts must be positive");
  for (Index c : ppa.target_classes) require(c >= 0 && c < classes, "config: ppa target class out of range");
  require(prior.latent_dim >= 1 && prior.latent_dim <= model.input_dim, "config: prior.latent_dim must be in [1, d]");
  if (metrics.k) require(*metrics.k >= 1 && *metrics.k < classes, "config: metrics.k must satisfy 1 <= k < C");
  require(metrics.ece_bins >= 1, "config: ece_bins must be positive");
  require(metrics.surrogate_epochs >= 1, "config: surrogate_epochs must be positive");
  require(robustness.params.epsilon >= 0.0 && robustness.params.step_size >= 0.0 && robustness.params.steps >= 1,
          "config: invalid robustness parameters");
  require(grid.resolution >= 2 && grid.x_max > grid.x_min && grid.y_max > grid.y_min, "config: invalid grid");
}

const TargetSpec& ExperimentConfig::target(const std::string& name) const {
  for (const auto& t : targets)
    if (t.name == name) return t;
  throw InvalidArgument("no target model named '" + name + "'");
}

ExperimentConfig experiment_config_from_json(const json& j) {
  reject_unknown(j, {"seed", "output_dir", "data", "model", "train", "targets", "eval_model", "eval_train", "prior",
                     "simple_attack", "ppa_attack", "metrics", "robustness", "grid", "description"},
                 "config");
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("model")) c.model = mlp_config_from_json(j.at("model"));
  if (j.contains("train")) {
    reject_unknown(j.at("train"), {"optimizer", "learning_rate", "lr_milestones", "lr_decay_factor", "epochs",
                                   "batch_size"},
                   "train");
    c.train = train_config_from_json(j.at("train"));
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"source", "centers", "stddev", "samples_per_class", "path", "test_fraction", "aux_per_class"},
                   "data");
    const std::string source = d.value("source", std::string("blobs"));
    if (source == "csv") {
      c.data.source = DataSection::Source::kCsv;
      c.data.path = d.at("path").get<std::string>();
    } else if (source == "blobs") {
      c.data.source = DataSection::Source::kBlobs;
      if (d.contains("centers")) {
        c.data.blobs.centers.clear();
        for (const auto& row : d.at("centers")) c.data.blobs.centers.push_back(vec_from_json(row));
      }
      c.data.blobs.stddev = d.value("stddev", c.data.blobs.stddev);
      c.data.blobs.samples_per_class = d.value("samples_per_class", c.data.blobs.samples_per_class);
    } else {
      throw InvalidArgument("data: unknown source '" + source + "'");
    }
    c.data.test_fraction = d.value("test_fraction", c.data.test_fraction);
    c.data.aux_per_class = d.value("aux_per_class", c.data.aux_per_class);
  }

  c.targets.clear();
  if (j.contains("targets")) {
    for (const auto& t : j.at("targets")) {
      reject_unknown(t, {"name", "alpha", "warmup_epochs", "ramp_epochs"}, "targets");
      c.targets.push_back({t.at("name").get<std::string>(), schedule_from_json(t, c.train.epochs)});
    }
  } else {
    c.targets.push_back({"hard", SmoothingSchedule{}});
  }

  c.eval_model = c.model;
  c.eval_model.hidden_dims = {40, 40, 40};
  if (j.contains("eval_model")) c.eval_model = mlp_config_from_json(j.at("eval_model"));
  c.eval_train = c.train;
  if (j.contains("eval_train")) c.eval_train = train_config_from_json(j.at("eval_train"));
  c.eval_train.smoothing = SmoothingSchedule{};

  if (j.contains("prior")) {
    const auto& p = j.at("prior");
    reject_unknown(p, {"kind", "latent_dim"}, "prior");
    const std::string kind = p.value("kind", std::string("pca"));
    if (kind == "pca")
      c.prior.kind = Prior::Kind::kPca;
    else if (kind == "identity")
      c.prior.kind = Prior::Kind::kIdentity;
    else
      throw InvalidArgument("prior: unknown kind '" + kind + "'");
    c.prior.latent_dim = p.value("latent_dim", c.model.input_dim);
  } else {
    c.prior.latent_dim = c.model.input_dim;
  }

  if (j.contains("simple_attack")) {
    json a = j.at("simple_attack");
    c.simple.source_class = a.value("source_class", c.simple.source_class);
    c.simple.target_class = a.value("target_class", c.simple.target_class);
    c.simple.starts = a.value("starts", c.simple.starts);
    for (const char* k : {"source_class", "target_class", "starts"}) a.erase(k);
    c.simple.attack = attack_config_from_json(a);
  }
  if (j.contains("ppa_attack")) {
    json a = j.at("ppa_attack");
    if (a.contains("target_classes")) c.ppa.target_classes = a.at("target_classes").get<std::vector<Index>>();
    a.erase("target_classes");
    c.ppa.attack = attack_config_from_json(a);
  }

  if (j.contains("metrics")) {
    const auto& m = j.at("metrics");
    reject_unknown(m, {"k", "ece_bins", "surrogate_epochs", "surrogate_learning_rate"}, "metrics");
    if (m.contains("k") && !m.at("k").is_null()) c.metrics.k = m.at("k").get<int>();
    c.metrics.ece_bins = m.value("ece_bins", c.metrics.ece_bins);
    c.metrics.surrogate_epochs = m.value("surrogate_epochs", c.metrics.surrogate_epochs);
    c.metrics.surrogate_learning_rate = m.value("surrogate_learning_rate", c.metrics.surrogate_learning_rate);
  }
  if (j.contains("robustness")) {
    const auto& r = j.at("robustness");
    reject_unknown(r, {"attacks", "epsilon", "step_size", "steps", "random_start"}, "robustness");
    if (r.contains("attacks")) {
      c.robustness.attacks.clear();
      for (const auto& a : r.at("attacks")) c.robustness.attacks.push_back(parse_adversarial_attack(a.get<std::string>()));
    }
    c.robustness.params.epsilon = r.value("epsilon", c.robustness.params.epsilon);
    c.robustness.params.step_size = r.value("step_size", c.robustness.params.step_size);
    c.robustness.params.steps = r.value("steps", c.robustness.params.steps);
    c.robustness.params.random_start = r.value("random_start", c.robustness.params.random_start);
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    reject_unknown(g, {"x_min", "x_max", "y_min", "y_max", "resolution"}, "grid");
    c.grid.x_min = g.value("x_min", c.grid.x_min);
    c.grid.x_max = g.value("x_max", c.grid.x_max);
    c.grid.y_min = g.value("y_min", c.grid.y_min);
    c.grid.y_max = g.value("y_max", c.grid.y_max);
    c.grid.resolution = g.value("resolution", c.grid.resolution);
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  const json j = read_json(path);
  ExperimentConfig c = experiment_config_from_json(j);
  if (c.data.source == DataSection::Source::kCsv && c.data.path.is_relative())
    c.data.path = path.parent_path() / c.data.path;
  return c;
}

json to_json(const ExperimentConfig& c) {
  json data = {{"test_fraction", c.data.test_fraction}, {"aux_per_class", c.data.aux_per_class}};
  if (c.data.source == DataSection::Source::kBlobs) {
    data["source"] = "blobs";
    json centers = json::array();
    for (const auto& v : c.data.blobs.centers) centers.push_back(vec_json(v));
    data["centers"] = centers;
    data["stddev"] = c.data.blobs.stddev;
    data["samples_per_class"] = c.data.blobs.samples_per_class;
  } else {
    data["source"] = "csv";
    data["path"] = c.data.path.generic_string();
  }
  json train = to_json(c.train);
  train.erase("smoothing");
  train.erase("seed");
  json eval_train = to_json(c.eval_train);
  eval_train.erase("smoothing");
  eval_train.erase("seed");
  json targets = json::array();
  for (const auto& t : c.targets) {
    json tj = schedule_json(t.smoothing);
    tj["name"] = t.name;
    targets.push_back(tj);
  }
  json simple = to_json(c.simple.attack);
  simple["source_class"] = c.simple.source_class;
  simple["target_class"] = c.simple.target_class;
  simple["starts"] = c.simple.starts;
  json ppa = to_json(c.ppa.attack);
  ppa["target_classes"] = c.ppa.target_classes;
  json attacks = json::array();
  for (auto a : c.robustness.attacks) attacks.push_back(to_string(a));
  json robust = pgd_json(c.robustness.params);
  robust["attacks"] = attacks;
  return {{"seed", c.seed},
          {"data", data},
          {"model", to_json(c.model)},
          {"train", train},
          {"targets", targets},
          {"eval_model", to_json(c.eval_model)},
          {"eval_train", eval_train},
          {"prior",
           {{"kind", c.prior.kind == Prior::Kind::kPca ? "pca" : "identity"}, {"latent_dim", c.prior.latent_dim}}},
          {"simple_attack", simple},
          {"ppa_attack", ppa},
          {"metrics",
           {{"k", c.metrics.k ? json(*c.metrics.k) : json(nullptr)},
            {"ece_bins", c.metrics.ece_bins},
            {"surrogate_epochs", c.metrics.surrogate_epochs},
            {"surrogate_learning_rate", c.metrics.surrogate_learning_rate}}},
          {"robustness", robust},
          {"grid",
           {{"x_min", c.grid.x_min},
            {"x_max", c.grid.x_max},
            {"y_min", c.grid.y_min},
            {"y_max", c.grid.y_max},
            {"resolution", c.grid.resolution}}}};
}

ExperimentConfig toy_preset() {
  ExperimentConfig c;
  c.output_dir = "out/toy";
  c.targets = {{"pos", default_schedule(0.05, c.train.epochs)},
               {"hard", default_schedule(0.0, c.train.epochs)},
               {"neg", default_schedule(-0.05, c.train.epochs)}};
  c.eval_model = c.model;
  c.eval_model.hidden_dims = {40, 40, 40};
  c.eval_train = c.train;
  c.prior.latent_dim = 2;
  c.simple.starts = 100;
  c.ppa.attack.loss = InputLoss::poincare();
  c.ppa.attack.optimizer = OptimizerConfig::sgd(0.0);
  c.ppa.attack.learning_rate = 0.1;
  c.ppa.attack.max_steps = 50;
  c.ppa.attack.stop_confidence = 0.95;
  c.ppa.attack.pool_size = 500;
  c.ppa.attack.candidates_per_class = 40;
  c.ppa.attack.final_per_class = 10;
  c.ppa.attack.transform = {0.1, 0};
  c.ppa.attack.transform_count = 8;
  c.robustness.params = {1.0, 0.25, 10, true, 0};
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Hashing and artifacts

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1)
    throw InvalidState("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * length);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(to_json(config).dump()); }

namespace {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

json provenance(const ExperimentConfig& config) {
  return {{"config_hash", config_hash(config)}, {"master_seed", config.seed}, {"timestamp", utc_timestamp()}};
}

std::string stable_dump(json artifact) {
  if (artifact.contains("provenance")) artifact["provenance"].erase("timestamp");
  artifact.erase("payload_sha256");
  return artifact.dump(1);
}

void write_artifact(const fs::path& path, const ExperimentConfig& config, json payload) {
  json j = std::move(payload);
  j["provenance"] = provenance(config);
  j["payload_sha256"] = sha256_hex(stable_dump(j));
  write_text(path, j.dump(1) + "\n");
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pipeline pieces

ExperimentData make_data(const ExperimentConfig& config) {
  ExperimentData d;
  LabeledDataset full;
  if (config.data.source == DataSection::Source::kBlobs) {
    BlobSpec spec = config.data.blobs;
    spec.seed = config.seed;
    full = gen_blobs(spec);
    BlobSpec aux = spec;
    aux.seed = derive_seed(config.seed, streams::kAux);
    aux.samples_per_class = config.data.aux_per_class;
    d.aux = gen_blobs(aux);
  } else {
    full = load_csv(config.data.path);
    require(full.dim() == config.model.input_dim && full.class_count == config.model.num_classes,
            "data: csv shape does not match the model config");
  }
  auto [rest, test] = split(full, config.data.test_fraction, derive_seed(config.seed, streams::kSplit));
  d.test = std::move(test);
  if (config.data.source == DataSection::Source::kCsv) {
    // the attacker's share is carved out of the file and never used for training
    const double share = static_cast<double>(config.data.aux_per_class * full.class_count) /
                         static_cast<double>(rest.size());
    require(share < 1.0, "data: aux_per_class leaves no training data");
    auto [train, aux] = split(rest, share, derive_seed(config.seed, streams::kAux));
    d.train = std::move(train);
    d.aux = std::move(aux);
  } else {
    d.train = std::move(rest);
  }
  return d;
}

TrainedModel train_target(const ExperimentConfig& config, const ExperimentData& data, const TargetSpec& spec) {
  TrainedModel t{spec, MlpClassifier(config.model, derive_seed(config.seed, streams::kInit)), {}};
  TrainConfig tc = config.train;
  tc.seed = derive_seed(config.seed, streams::kShuffle);
  tc.smoothing = spec.smoothing;
  t.history = train(t.model, data.train, tc, &data.test);
  return t;
}

namespace {

/// Runs fn(i) for i in [0, n) over `jobs` threads; results land at their index.
template <typename Fn>
void parallel_for(Index n, int jobs, Fn&& fn) {
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers == 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (Index i = w; i < n; i += workers) fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

std::vector<TrainedModel> train_targets(const ExperimentConfig& config, const ExperimentData& data, int jobs) {
  std::vector<std::optional<TrainedModel>> slots(config.targets.size());
  parallel_for(static_cast<Index>(config.targets.size()), jobs, [&](Index i) {
    slots[static_cast<std::size_t>(i)] = train_target(config, data, config.targets[static_cast<std::size_t>(i)]);
  });
  std::vector<TrainedModel> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

MlpClassifier train_eval_model(const ExperimentConfig& config, const ExperimentData& data) {
  MlpClassifier model(config.eval_model, derive_seed(config.seed, streams::kEvalModel));
  TrainConfig tc = config.eval_train;
  tc.seed = derive_seed(config.seed, streams::kEvalModel, 1);
  tc.smoothing = SmoothingSchedule{};
  train(model, data.train, tc);
  return model;
}

Prior make_prior(const ExperimentConfig& config, const ExperimentData& data) {
  if (config.prior.kind == Prior::Kind::kIdentity) return identity_prior(config.model.input_dim);
  return fit_pca_prior(data.aux.features, config.prior.latent_dim);
}

SimpleAttackResult run_simple_attacks(const ExperimentConfig& config, const MlpClassifier& model,
                                      const ExperimentData& data, int jobs) {
  const Matrix sources = data.aux.class_rows(config.simple.source_class);
  const Matrix targets = data.train.class_rows(config.simple.target_class);
  require(sources.rows() >= config.simple.starts, "simple attack: not enough auxiliary samples of the source class");
  require(targets.rows() >= 1, "simple attack: target class has no training samples");
  std::vector<Index> order(static_cast<std::size_t>(sources.rows()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);
  Rng rng(derive_seed(config.seed, streams::kStart));
  std::shuffle(order.begin(), order.end(), rng);

  SimpleAttackResult r;
  r.trajectories.resize(static_cast<std::size_t>(config.simple.starts));
  parallel_for(config.simple.starts, jobs, [&](Index i) {
    Trajectory t = simple_invert(model, config.simple.target_class,
                                 sources.row(order[static_cast<std::size_t>(i)]).transpose(), config.simple.attack);
    t.candidate_index = order[static_cast<std::size_t>(i)];
    r.trajectories[static_cast<std::size_t>(i)] = std::move(t);
  });
  for (const auto& t : r.trajectories) {
    r.mean_distance += std::sqrt((targets.rowwise() - t.final_x.transpose()).rowwise().squaredNorm().minCoeff());
    r.mean_steps += static_cast<double>(t.step_count());
    r.success_rate += t.stop == StopReason::kConfidence ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(r.trajectories.size());
  r.mean_distance /= n;
  r.mean_steps /= n;
  r.success_rate /= n;
  bool any_long = false;
  for (const auto& t : r.trajectories) any_long = any_long || t.step_count() >= 2;
  if (any_long) r.mean_gradient_similarity = mean_gradient_cosine(r.trajectories);
  return r;
}

AttackRun run_ppa_attack(const ExperimentConfig& config, const MlpClassifier& model, const Prior& prior, int jobs) {
  AttackConfig ac = config.ppa.attack;
  ac.seed = config.seed;
  std::vector<Index> classes = config.ppa.target_classes;
  if (classes.empty())
    for (Index c = 0; c < config.model.num_classes; ++c) classes.push_back(c);
  return run_ppa(model, prior, classes, ac, jobs);
}

MetricsReport evaluate_attack(const ExperimentConfig& config, const AttackRun& run, const MlpClassifier& target,
                              const MlpClassifier& eval_model, const ExperimentData& data) {
  MetricsReport r;
  const int classes = config.model.num_classes;
  const LabeledDataset recon = run.reconstructions(classes);
  int k = std::min(5, classes - 1);
  if (config.metrics.k) {
    k = *config.metrics.k;
  } else if (classes < 6) {
    r.notes.push_back("acc_at_k uses k = " + std::to_string(k) + " because C < 6");
  }
  for (const auto& c : run.classes)
    if (!c.shortfall.empty()) r.notes.push_back("class " + std::to_string(c.target_class) + ": " + c.shortfall);

  r.test_accuracy = accuracy(target, data.test);
  r.ece = ece(predict_proba(target, data.test.features), data.test.labels, config.metrics.ece_bins);
  r.embedding = embedding_stats(target, data.train);
  if (recon.size() == 0) {
    r.notes.push_back("no reconstructions; attack metrics left at zero");
    return r;
  }
  r.accuracy = attack_accuracy(eval_model, recon, k);
  r.delta_eval = feature_distance(eval_model, recon, data.train);

  bool every_class = true;
  for (int c = 0; c < classes; ++c) every_class = every_class && recon.class_size(c) >= 1;
  if (every_class) {
    SurrogateConfig s = default_surrogate(config.model, derive_seed(config.seed, streams::kSurrogate));
    s.train.epochs = config.metrics.surrogate_epochs;
    s.train.learning_rate = config.metrics.surrogate_learning_rate;
    r.knowledge = knowledge_extraction(recon, data.train, data.test, s);
  } else {
    r.notes.push_back("knowledge extraction skipped: some class has no reconstruction");
  }

  std::vector<Trajectory> all;
  for (const auto& c : run.classes)
    for (const auto& t : c.trajectories)
      if (t.stop != StopReason::kFailed && t.step_count() >= 2) all.push_back(t);
  if (!all.empty()) {
    r.gradient_similarity = gradient_cosine_series(all);
    r.mean_gradient_similarity = mean_gradient_cosine(all);
  } else {
    r.notes.push_back("gradient similarity undefined: no trajectory took two or more steps");
  }
  return r;
}

std::vector<RobustnessReport> run_robustness(const ExperimentConfig& config, const MlpClassifier& model,
                                             const ExperimentData& data) {
  PgdConfig params = config.robustness.params;
  params.seed = derive_seed(config.seed, streams::kAdversarial);
  std::vector<RobustnessReport> out;
  for (auto a : config.robustness.attacks) out.push_back(robustness(model, data.test, a, params));
  return out;
}

Matrix confidence_grid(const MlpClassifier& model, const GridSection& grid) {
  require(model.config().input_dim == 2, "confidence_grid: model input dimension must be 2");
  require(grid.resolution >= 2 && grid.x_max > grid.x_min && grid.y_max > grid.y_min,
          "confidence_grid: invalid bounds or resolution");
  const Index n = grid.resolution;
  Matrix points(n * n, 2);
  for (Index iy = 0; iy < n; ++iy)
    for (Index ix = 0; ix < n; ++ix) {
      points(iy * n + ix, 0) = grid.x_min + (grid.x_max - grid.x_min) * static_cast<double>(ix) / (n - 1);
      points(iy * n + ix, 1) = grid.y_min + (grid.y_max - grid.y_min) * static_cast<double>(iy) / (n - 1);
    }
  Matrix out(n * n, 2 + model.config().num_classes);
  out << points, predict_proba(model, points);
  return out;
}

json to_json(const SimpleAttackResult& r) {
  json runs = json::array();
  for (const auto& t : r.trajectories)
    runs.push_back({{"start_index", t.candidate_index},
                    {"steps", t.step_count()},
                    {"final_x", vec_json(t.final_x)},
                    {"final_confidence", t.final_confidence},
                    {"stop", to_string(t.stop)}});
  return {{"mean_distance", r.mean_distance},
          {"mean_steps", r.mean_steps},
          {"success_rate", r.success_rate},
          {"mean_gradient_similarity", r.mean_gradient_similarity ? json(*r.mean_gradient_similarity) : json()},
          {"runs", runs}};
}

std::vector<ModelComparison> run_comparison(const ExperimentConfig& config, int jobs) {
  const ExperimentData data = make_data(config);
  const std::vector<TrainedModel> models = train_targets(config, data, jobs);
  const MlpClassifier eval_model = train_eval_model(config, data);
  const Prior prior = make_prior(config, data);
  std::vector<ModelComparison> out;
  for (const auto& m : models) {
    ModelComparison c;
    c.name = m.spec.name;
    c.alpha = m.spec.smoothing.target_alpha;
    c.test_accuracy = accuracy(m.model, data.test);
    c.test_ece = ece(predict_proba(m.model, data.test.features), data.test.labels, config.metrics.ece_bins);
    c.simple = run_simple_attacks(config, m.model, data, jobs);
    const AttackRun run = run_ppa_attack(config, m.model, prior, jobs);
    c.metrics = evaluate_attack(config, run, m.model, eval_model, data);
    c.robustness = run_robustness(config, m.model, data);
    out.push_back(std::move(c));
  }
  return out;
}

json to_json(const ModelComparison& c) {
  json robust = json::array();
  for (const auto& r : c.robustness) robust.push_back(to_json(r));
  json simple = to_json(c.simple);
  simple.erase("runs");
  return {{"name", c.name},
          {"alpha", c.alpha},
          {"test_accuracy", c.test_accuracy},
          {"test_ece", c.test_ece},
          {"simple_attack", simple},
          {"metrics", to_json(c.metrics)},
          {"robustness", robust}};
}

// ---------------------------------------------------------------------------
// Commands

namespace {

fs::path data_dir(const ExperimentConfig& c) { return c.output_dir / "data"; }
fs::path model_path(const ExperimentConfig& c, const std::string& name) {
  return c.output_dir / "models" / (name + ".json");
}

ExperimentData load_data_artifacts(const ExperimentConfig& config) {
  const fs::path dir = data_dir(config);
  for (const char* f : {"train.csv", "test.csv", "aux.csv"})
    if (!fs::exists(dir / f)) throw IoError("missing " + (dir / f).string() + "; run gen-data first");
  return {load_csv(dir / "train.csv"), load_csv(dir / "test.csv"), load_csv(dir / "aux.csv")};
}

MlpClassifier load_model_artifact(const ExperimentConfig& config, const std::string& name) {
  const fs::path p = model_path(config, name);
  if (!fs::exists(p)) throw IoError("missing checkpoint " + p.string() + "; run train first");
  return load_checkpoint(p);
}

void write_history_csv(const TrainHistory& h, const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,alpha,learning_rate,loss,accuracy,test_accuracy,test_ece\n";
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << e.alpha << ',' << e.learning_rate << ',' << e.loss << ',' << e.accuracy << ',';
    if (e.test_accuracy) out << *e.test_accuracy;
    out << ',';
    if (e.test_ece) out << *e.test_ece;
    out << '\n';
  }
  write_text(path, out.str());
}

void write_matrix_csv(const Matrix& m, const std::vector<std::string>& header, const fs::path& path) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
    out << '\n';
  }
  write_text(path, out.str());
}

void write_metric_csvs(const MetricsReport& m, const fs::path& dir) {
  const auto& e = m.embedding;
  std::ostringstream emb;
  emb.precision(17);
  emb << "statistic,value\n";
  const std::pair<const char*, const std::vector<double>*> columns[] = {{"intraclass_mean", &e.intra_mean_values},
                                                                      {"interclass_mean", &e.inter_mean_values},
                                                                      {"intraclass_nearest", &e.intra_nearest_values},
                                                                      {"interclass_nearest", &e.inter_nearest_values}};
  for (const auto& [name, values] : columns)
    for (double v : *values) emb << name << ',' << v << '\n';
  write_text(dir / "embedding_distances.csv", emb.str());

  std::ostringstream sc;
  sc.precision(17);
  sc << "step,mean,std,count\n";
  for (std::size_t i = 0; i < m.gradient_similarity.size(); ++i) {
    const auto& p = m.gradient_similarity[i];
    sc << i + 1 << ',' << p.mean << ',' << p.stddev << ',' << p.count << '\n';
  }
  write_text(dir / "gradient_similarity.csv", sc.str());
}

std::vector<std::string> model_names(const ExperimentConfig& config) {
  std::vector<std::string> names;
  for (const auto& t : config.targets) names.push_back(t.name);
  return names;
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& config) {
  const ExperimentData d = make_data(config);
  const fs::path dir = data_dir(config);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_csv(d.train, dir / "train.csv");
  save_csv(d.test, dir / "test.csv");
  save_csv(d.aux, dir / "aux.csv");
  json files = json::object();
  for (const char* f : {"train.csv", "test.csv", "aux.csv"}) files[f] = file_sha256(dir / f);
  json payload = {{"kind", "dataset"},
                  {"data", to_json(config)["data"]},
                  {"sizes", {{"train", d.train.size()}, {"test", d.test.size()}, {"aux", d.aux.size()}}},
                  {"files", files}};
  write_artifact(dir / "provenance.json", config, payload);
}

void cmd_train(const ExperimentConfig& config, int jobs) {
  const ExperimentData data = load_data_artifacts(config);
  std::vector<TrainedModel> models = train_targets(config, data, jobs);
  json summary = json::array();
  for (const auto& m : models) {
    const fs::path ckpt = model_path(config, m.spec.name);
    fs::create_directories(ckpt.parent_path());
    save_checkpoint(m.model, ckpt);
    write_history_csv(m.history, config.output_dir / "models" / (m.spec.name + "_history.csv"));
    summary.push_back({{"name", m.spec.name},
                       {"smoothing", schedule_json(m.spec.smoothing)},
                       {"checkpoint_sha256", file_sha256(ckpt)},
                       {"final_loss", m.history.epochs.back().loss},
                       {"train_accuracy", accuracy(m.model, data.train)},
                       {"test_accuracy", accuracy(m.model, data.test)},
                       {"test_ece", *m.history.epochs.back().test_ece}});
  }
  const MlpClassifier eval_model = train_eval_model(config, data);
  const fs::path eval_path = model_path(config, "eval");
  save_checkpoint(eval_model, eval_path);
  json payload = {{"kind", "training"},
                  {"models", summary},
                  {"eval_model",
                   {{"checkpoint_sha256", file_sha256(eval_path)}, {"test_accuracy", accuracy(eval_model, data.test)}}}};
  write_artifact(config.output_dir / "models" / "training.json", config, payload);
}

void cmd_attack(const ExperimentConfig& config, const std::string& mode, int jobs) {
  require(mode == "simple" || mode == "ppa", "attack mode must be 'simple' or 'ppa'");
  const ExperimentData data = load_data_artifacts(config);
  const Prior prior = make_prior(config, data);
  for (const auto& name : model_names(config)) {
    const MlpClassifier model = load_model_artifact(config, name);
    const fs::path dir = config.output_dir / "attacks" / name / mode;
    json prov = provenance(config);
    prov["checkpoint_sha256"] = file_sha256(model_path(config, name));
    if (mode == "simple") {
      const SimpleAttackResult r = run_simple_attacks(config, model, data, jobs);
      AttackRun run;
      run.config = config.simple.attack;
      run.target_classes = {config.simple.target_class};
      ClassAttack ca;
      ca.target_class = config.simple.target_class;
      ca.trajectories = r.trajectories;
      for (const auto& t : r.trajectories) ca.selected.push_back({t.candidate_index, t.final_z, t.final_x, t.final_confidence});
      run.classes.push_back(std::move(ca));
      save_attack_run(run, dir, prov);
      json payload = to_json(r);
      payload["kind"] = "simple_attack";
      payload["model"] = name;
      payload["checkpoint_sha256"] = prov["checkpoint_sha256"];
      write_artifact(dir / "summary.json", config, payload);
    } else {
      AttackRun run;
      try {
        run = run_ppa_attack(config, model, prior, jobs);
      } catch (const std::exception& e) {
        write_artifact(dir / "error.json", config, {{"kind", "attack_error"}, {"model", name}, {"error", e.what()}});
        throw;
      }
      save_attack_run(run, dir, prov);
    }
  }
}

void cmd_evaluate(const ExperimentConfig& config, int jobs) {
  const ExperimentData data = load_data_artifacts(config);
  const MlpClassifier eval_model = load_model_artifact(config, "eval");
  const Prior prior = make_prior(config, data);
  json reports = json::array();
  for (const auto& name : model_names(config)) {
    const MlpClassifier model = load_model_artifact(config, name);
    const fs::path run_path = config.output_dir / "attacks" / name / "ppa" / "run.json";
    if (!fs::exists(run_path)) throw IoError("missing " + run_path.string() + "; run attack --mode ppa first");
    // Trajectories are regenerated deterministically; the stored run pins their hash.
    const AttackRun run = run_ppa_attack(config, model, prior, jobs);
    json stored = read_json(run_path);
    stored.erase("provenance");
    json fresh = to_json(run);
    if (stored.dump() != fresh.dump())
      throw ValidationError(run_path.string() + " does not match the configured attack; rerun the attack command");
    const MetricsReport m = evaluate_attack(config, run, model, eval_model, data);
    write_metric_csvs(m, config.output_dir / "metrics" / name);
    json entry = to_json(m);
    entry["model"] = name;
    entry["checkpoint_sha256"] = file_sha256(model_path(config, name));
    entry["attack_run_sha256"] = sha256_hex(fresh.dump());
    const fs::path simple_path = config.output_dir / "attacks" / name / "simple" / "summary.json";
    if (fs::exists(simple_path)) {
      json s = read_json(simple_path);
      entry["simple_attack"] = {{"mean_distance", s.at("mean_distance")},
                                {"mean_steps", s.at("mean_steps")},
                                {"success_rate", s.at("success_rate")},
                                {"mean_gradient_similarity", s.at("mean_gradient_similarity")}};
    }
    reports.push_back(entry);
  }
  json payload = {{"kind", "evaluation"},
                  {"eval_checkpoint_sha256", file_sha256(model_path(config, "eval"))},
                  {"eval_model", to_json(config.eval_model)},
                  {"notes", {"feature distance is measured with the evaluation model only; no face-recognition "
                             "model distance is computed"}},
                  {"models", reports}};
  write_artifact(config.output_dir / "evaluation.json", config, payload);
}

json cmd_verify_gradients(std::uint64_t seed, const std::optional<fs::path>& out) {
  VerifyOptions options;
  options.seed = seed;
  const VerificationReport report = verify_gradients(options);
  json j = to_json(report);
  j["kind"] = "gradient_verification";
  j["seed"] = seed;
  if (out) {
    json artifact = j;
    artifact["provenance"] = {{"master_seed", seed}, {"timestamp", utc_timestamp()}};
    artifact["payload_sha256"] = sha256_hex(stable_dump(artifact));
    write_text(*out / "verify_gradients.json", artifact.dump(1) + "\n");
  }
  for (const auto& c : report.checks)
    if (!c.passed)
      throw VerificationFailure("check '" + c.name + "' failed: max deviation " + std::to_string(c.max_deviation) +
                                " exceeds tolerance " + std::to_string(c.tolerance));
  return j;
}

void cmd_confidence_grid(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& out_csv) {
  const MlpClassifier model = load_checkpoint(checkpoint);
  const Matrix grid = confidence_grid(model, config.grid);
  std::vector<std::string> header{"x1", "x2"};
  for (int c = 0; c < model.config().num_classes; ++c) header.push_back("p_" + std::to_string(c));
  write_matrix_csv(grid, header, out_csv);
}

void cmd_robustness(const ExperimentConfig& config, const std::optional<AdversarialAttack>& attack, int jobs) {
  ExperimentConfig c = config;
  if (attack) c.robustness.attacks = {*attack};
  const ExperimentData data = load_data_artifacts(c);
  const auto names = model_names(c);
  std::vector<json> entries(names.size());
  parallel_for(static_cast<Index>(names.size()), jobs, [&](Index i) {
    const auto& name = names[static_cast<std::size_t>(i)];
    const MlpClassifier model = load_model_artifact(c, name);
    json reports = json::array();
    for (const auto& r : run_robustness(c, model, data)) reports.push_back(to_json(r));
    entries[static_cast<std::size_t>(i)] = {
        {"model", name}, {"checkpoint_sha256", file_sha256(model_path(c, name))}, {"reports", reports}};
  });
  write_artifact(c.output_dir / "robustness.json", c, {{"kind", "robustness"}, {"models", entries}});
}

void cmd_run(const ExperimentConfig& config, int jobs) {
  cmd_gen_data(config);
  cmd_train(config, jobs);
  cmd_attack(config, "simple", jobs);
  cmd_attack(config, "ppa", jobs);
  cmd_evaluate(config, jobs);
  cmd_robustness(config, std::nullopt, jobs);
  if (config.model.input_dim == 2)
    for (const auto& name : model_names(config))
      cmd_confidence_grid(config, model_path(config, name), config.output_dir / "grids" / (name + ".csv"));
}

}  // namespace lsmia
