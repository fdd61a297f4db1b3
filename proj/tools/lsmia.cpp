// Command line front end for the label smoothing / model inversion laboratory.

#include "lsmia/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

using lsmia::ExitCode;
using lsmia::ExperimentConfig;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Experiment config (JSON); defaults to the built-in toy comparison")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Master seed, overrides the config");
  cmd->add_option("--out", o.out, "Output directory, overrides the config");
  cmd->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig c = o.config.empty() ? lsmia::toy_preset() : lsmia::load_experiment_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  return c;
}

std::string cell(const nlohmann::json& v, const char* format) {
  if (v.is_null()) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, format, v.get<double>());
  return buf;
}

void print_evaluation(const ExperimentConfig& config) {
  const auto eval = lsmia::read_json(config.output_dir / "evaluation.json");
  std::printf("%-8s %8s %8s %8s %8s %8s %8s %8s %8s\n", "model", "acc@1", "xi_train", "delta", "S_C", "S_C_dir",
              "dist", "steps", "ece");
  for (const auto& m : eval.at("models")) {
    const auto simple = m.value("simple_attack", nlohmann::json::object());
    auto field = [&](const char* key) { return simple.contains(key) ? simple.at(key) : nlohmann::json(); };
    std::printf("%-8s %8s %8s %8s %8s %8s %8s %8s %8s\n", m.at("model").get<std::string>().c_str(),
                cell(m.at("acc_at_1"), "%.3f").c_str(), cell(m.at("xi_train"), "%.3f").c_str(),
                cell(m.at("delta_eval"), "%.3f").c_str(), cell(m.at("mean_gradient_similarity"), "%.3f").c_str(),
                cell(field("mean_gradient_similarity"), "%.3f").c_str(), cell(field("mean_distance"), "%.3f").c_str(),
                cell(field("mean_steps"), "%.1f").c_str(), cell(m.at("ece"), "%.4f").c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label smoothing and model inversion laboratory"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string mode = "ppa";
  std::string checkpoint, model_name, csv_out, attack_name;
  std::vector<double> bounds;
  std::optional<int> resolution;
  std::optional<double> epsilon, step_size;
  std::optional<int> steps;

  auto* gen = app.add_subcommand("gen-data", "Generate the train/test/aux datasets");
  auto* train = app.add_subcommand("train", "Train every target model and the evaluation model");
  auto* attack = app.add_subcommand("attack", "Run the inversion attack against every target model");
  attack->add_option("--mode", mode, "simple | ppa")->check(CLI::IsMember({"simple", "ppa"}));
  auto* evaluate = app.add_subcommand("evaluate", "Compute the metric suite for every attacked model");
  auto* verify = app.add_subcommand("verify-gradients", "Analytic vs finite-difference gradient checks");
  auto* grid = app.add_subcommand("confidence-grid", "Per-class confidences over a 2D grid");
  grid->add_option("--checkpoint", checkpoint, "Checkpoint path")->check(CLI::ExistingFile);
  grid->add_option("--model", model_name, "Target model name inside the output directory");
  grid->add_option("--resolution", resolution, "Points per axis")->check(CLI::Range(2, 100000));
  grid->add_option("--bounds", bounds, "x_min x_max y_min y_max")->expected(4);
  grid->add_option("--csv", csv_out, "Output CSV path");
  auto* robust = app.add_subcommand("robustness", "FGSM / PGD / BIM success rates on the test split");
  robust->add_option("--attack", attack_name, "fgsm | pgd | bim")->check(CLI::IsMember({"fgsm", "pgd", "bim"}));
  robust->add_option("--epsilon", epsilon, "l_inf budget");
  robust->add_option("--step-size", step_size, "Per-iteration step");
  robust->add_option("--steps", steps, "Iterations");
  auto* run = app.add_subcommand("run", "Whole pipeline: gen-data, train, attack, evaluate, robustness, grids");
  for (auto* cmd : {gen, train, attack, evaluate, verify, grid, robust, run}) add_common(cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*verify) {
      const auto report = lsmia::cmd_verify_gradients(common.seed.value_or(20240601),
                                                      common.out.empty() ? std::nullopt
                                                                         : std::optional<std::filesystem::path>(common.out));
      for (const auto& c : report.at("checks"))
        std::printf("%-34s max_dev %.3e  tol %.1e  %s\n", c.at("name").get<std::string>().c_str(),
                    c.at("max_deviation").get<double>(), c.at("tolerance").get<double>(),
                    c.at("passed").get<bool>() ? "ok" : "FAIL");
      return 0;
    }
    ExperimentConfig config = resolve(common);
    if (*gen) {
      lsmia::cmd_gen_data(config);
    } else if (*train) {
      lsmia::cmd_train(config, common.jobs);
    } else if (*attack) {
      lsmia::cmd_attack(config, mode, common.jobs);
    } else if (*evaluate) {
      lsmia::cmd_evaluate(config, common.jobs);
      print_evaluation(config);
    } else if (*grid) {
      if (resolution) config.grid.resolution = *resolution;
      if (!bounds.empty()) config.grid = {bounds[0], bounds[1], bounds[2], bounds[3], config.grid.resolution};
      if (checkpoint.empty()) {
        lsmia::require(!model_name.empty(), "confidence-grid needs --checkpoint or --model");
        checkpoint = (config.output_dir / "models" / (model_name + ".json")).string();
      }
      if (csv_out.empty()) {
        const std::string stem = model_name.empty() ? std::filesystem::path(checkpoint).stem().string() : model_name;
        csv_out = (config.output_dir / "grids" / (stem + ".csv")).string();
      }
      lsmia::cmd_confidence_grid(config, checkpoint, csv_out);
    } else if (*robust) {
      if (epsilon) config.robustness.params.epsilon = *epsilon;
      if (step_size) config.robustness.params.step_size = *step_size;
      if (steps) config.robustness.params.steps = *steps;
      config.validate();
      std::optional<lsmia::AdversarialAttack> which;
      if (!attack_name.empty()) which = lsmia::parse_adversarial_attack(attack_name);
      lsmia::cmd_robustness(config, which, common.jobs);
    } else if (*run) {
      lsmia::cmd_run(config, common.jobs);
      print_evaluation(config);
    }
    std::printf("wrote %s\n", config.output_dir.string().c_str());
    return 0;
  } catch (const std::exception& e) {
    const ExitCode code = lsmia::exit_code_for(std::current_exception());
    std::fprintf(stderr, "lsmia: %s\n", e.what());
    return static_cast<int>(code);
  }
}
