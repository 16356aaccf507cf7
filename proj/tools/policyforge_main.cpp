// Command-line surface for the policy generation pipeline. Stages run in
// order: gen-data -> train-ae -> train-embed -> train-diff -> generate ->
// eval -> report; each checks its upstream artifacts through the run ledger.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "policyforge/pipeline/pipeline.hpp"

using namespace policyforge;

int main(int argc, char** argv) {
  CLI::App app{"behavior-conditioned policy parameter generation"};
  app.require_subcommand(1);

  std::string out_dir;
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<int> conditions_override;
  std::optional<float> noise_sigma_override;
  std::optional<std::string> condition_mode_override;
  std::optional<int> epochs_override;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--out-dir", out_dir, "working directory for artifacts")
        ->required();
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed_override, "global seed override");
  };

  CLI::App* gen_data = app.add_subcommand("gen-data", "train base policies and build the dataset");
  add_common(gen_data);
  CLI::App* train_ae = app.add_subcommand("train-ae", "train the parameter autoencoder");
  add_common(train_ae);
  train_ae->add_option("--epochs", epochs_override, "autoencoder epochs override");
  CLI::App* train_embed = app.add_subcommand("train-embed", "train the behavior embedder");
  add_common(train_embed);
  train_embed->add_option("--epochs", epochs_override, "embedder epochs override");
  CLI::App* train_diff = app.add_subcommand("train-diff", "train the latent diffusion model");
  add_common(train_diff);
  train_diff->add_option("--epochs", epochs_override, "diffusion epochs override");
  CLI::App* generate = app.add_subcommand("generate", "generate policies from condition trajectories");
  add_common(generate);
  generate->add_option("--conditions", conditions_override, "conditions per task");
  generate->add_option("--noise-sigma", noise_sigma_override, "action noise for the noisy suite");
  generate->add_option("--condition-mode", condition_mode_override, "both | h-only | v-only");
  CLI::App* eval = app.add_subcommand("eval", "evaluate generated policies");
  add_common(eval);
  CLI::App* report = app.add_subcommand("report", "aggregate evaluation reports");
  add_common(report);
  CLI::App* run_all_cmd = app.add_subcommand("run-all", "run every stage in order");
  add_common(run_all_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig cfg = load_config(
        config_path ? std::optional<std::filesystem::path>(*config_path)
                    : std::nullopt);
    if (seed_override) cfg.seed = *seed_override;
    if (conditions_override) cfg.generate.conditions = *conditions_override;
    if (noise_sigma_override) cfg.eval.condition_noise_sigma = *noise_sigma_override;
    if (condition_mode_override) cfg.generate.condition_mode = *condition_mode_override;
    if (epochs_override) {
      if (train_ae->parsed()) cfg.codec.epochs = *epochs_override;
      if (train_embed->parsed()) cfg.behavior.epochs = *epochs_override;
      if (train_diff->parsed()) cfg.denoiser.epochs = *epochs_override;
    }

    const auto errors = validate_config(cfg);
    if (!errors.empty()) {
      std::fprintf(stderr, "config validation failed:\n");
      for (const auto& e : errors) std::fprintf(stderr, "  - %s\n", e.c_str());
      return 2;
    }

    const std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out);

    if (gen_data->parsed()) run_gen_data(cfg, out);
    if (train_ae->parsed()) run_train_ae(cfg, out);
    if (train_embed->parsed()) run_train_embed(cfg, out);
    if (train_diff->parsed()) run_train_diff(cfg, out);
    if (generate->parsed()) run_generate(cfg, out);
    if (eval->parsed()) run_eval(cfg, out);
    if (report->parsed()) run_report(cfg, out);
    if (run_all_cmd->parsed()) run_all(cfg, out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
