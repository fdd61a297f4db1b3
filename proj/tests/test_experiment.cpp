#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lsmia/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace lsmia;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kFixtures = LSMIA_FIXTURES;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "lsmia_test_experiment" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Relative path -> comparable content; json artifacts lose their timestamp.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).string();
    files[rel] = e.path().extension() == ".json" ? stable_dump(read_json(e.path())) : slurp(e.path());
  }
  return files;
}

ExperimentConfig quick(const fs::path& out) {
  ExperimentConfig c = load_experiment_config(kFixtures / "csv_quick.json");
  c.output_dir = out;
  return c;
}

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig c = load_experiment_config(kFixtures / "csv_quick.json");
  CHECK(c.seed == 11);
  CHECK(c.data.source == DataSection::Source::kCsv);
  CHECK(c.data.path == kFixtures / "blobs_small.csv");
  CHECK(c.targets.size() == 2);
  CHECK(c.target("neg").smoothing.target_alpha == -0.05);
  CHECK(c.eval_model.hidden_dims == std::vector<int>{16, 16, 16});
  CHECK(c.train.epochs == 40);
  CHECK_THROWS_AS(c.target("pos"), InvalidArgument);

  const ExperimentConfig back = experiment_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));

  CHECK_THROWS_AS(load_experiment_config(kFixtures / "unknown_key.json"), InvalidArgument);
  CHECK_THROWS_AS(load_experiment_config(kFixtures / "bad_value.json"), InvalidArgument);
  CHECK_THROWS_AS(load_experiment_config(kFixtures / "absent.json"), IoError);
  CHECK_THROWS_AS(experiment_config_from_json(json::parse(R"({"ppa_attack": {"stepz": 3}})")), InvalidArgument);
}

TEST_CASE("config hash ignores the output directory and the timestamp") {
  ExperimentConfig a = toy_preset();
  ExperimentConfig b = a;
  b.output_dir = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  b.seed = a.seed + 1;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(config_hash(load_experiment_config(fs::path(LSMIA_FIXTURES) / ".." / ".." / "configs" / "toy_comparison.json")) ==
        config_hash(toy_preset()));

  json first = {{"x", 1}, {"provenance", provenance(a)}};
  json second = first;
  second["provenance"]["timestamp"] = "1970-01-01T00:00:00Z";
  CHECK(stable_dump(first) == stable_dump(second));
  CHECK(first["provenance"]["config_hash"] == config_hash(a));
  CHECK(first["provenance"]["master_seed"] == a.seed);

  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("artifacts carry a payload hash over the stable form") {
  const fs::path dir = scratch("artifact");
  const ExperimentConfig c = toy_preset();
  write_artifact(dir / "a.json", c, {{"value", 3}});
  const json j = read_json(dir / "a.json");
  CHECK(j["payload_sha256"] == sha256_hex(stable_dump(j)));
  CHECK(j["provenance"].contains("timestamp"));
}

TEST_CASE("exit code mapping") {
  auto code = [](auto e) { return exit_code_for(std::make_exception_ptr(e)); };
  CHECK(code(InvalidArgument("x")) == ExitCode::kConfig);
  CHECK(code(ValidationError("x")) == ExitCode::kConfig);
  CHECK(code(IoError("x")) == ExitCode::kIo);
  CHECK(code(NumericError("x")) == ExitCode::kNumeric);
  CHECK(code(TrainingDiverged(3, "x")) == ExitCode::kNumeric);
  CHECK(code(VerificationFailure("x")) == ExitCode::kVerification);
  CHECK(code(std::runtime_error("x")) == ExitCode::kFailure);
}

TEST_CASE("commands fail cleanly without their inputs") {
  ExperimentConfig c = quick(scratch("missing"));
  CHECK_THROWS_AS(cmd_train(c), IoError);
  CHECK_THROWS_AS(cmd_evaluate(c), IoError);
}

TEST_CASE("pipeline output is identical across reruns and worker counts") {
  const fs::path one = scratch("jobs1"), two = scratch("jobs2"), again = scratch("again");
  cmd_run(quick(one), 1);
  cmd_run(quick(two), 2);
  cmd_run(quick(again), 1);
  const auto a = snapshot(one), b = snapshot(two), r = snapshot(again);
  CHECK(a.size() > 10);
  CHECK(a.count("evaluation.json") == 1);
  CHECK(a.count("robustness.json") == 1);
  CHECK(a.count("models/hard.json") == 1);
  for (const auto& [name, content] : a) {
    INFO(name);
    REQUIRE(b.count(name) == 1);
    CHECK(b.at(name) == content);
    CHECK(r.at(name) == content);
  }
  for (const char* m : {"hard.json", "neg.json", "eval.json"})
    CHECK(file_sha256(one / "models" / m) == file_sha256(two / "models" / m));
  const json eval = read_json(one / "evaluation.json");
  CHECK(eval["provenance"]["config_hash"] == config_hash(quick(one)));
  CHECK(eval["models"].size() == 2);
}

TEST_CASE("confidence grid") {
  const ExperimentConfig c = quick(scratch("grid"));
  MlpConfig m;
  const MlpClassifier model(m, 4);
  GridSection g;
  g.resolution = 7;
  const Matrix grid = confidence_grid(model, g);
  REQUIRE(grid.rows() == 49);
  REQUIRE(grid.cols() == 5);
  CHECK(grid(0, 0) == g.x_min);
  CHECK(grid(1, 0) > grid(0, 0));
  CHECK(grid(1, 1) == grid(0, 1));
  CHECK(grid(48, 0) == g.x_max);
  CHECK(grid(48, 1) == g.y_max);
  for (Index i = 0; i < grid.rows(); ++i) CHECK(std::abs(grid.row(i).tail(3).sum() - 1.0) < 1e-12);
  CHECK(c.grid.resolution == 5);
}
