#ifndef POLICYFORGE_PIPELINE_PIPELINE_HPP_
#define POLICYFORGE_PIPELINE_PIPELINE_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "policyforge/basetrainer/basetrainer.hpp"
#include "policyforge/behavior/behavior.hpp"
#include "policyforge/diffusion/diffusion.hpp"
#include "policyforge/evaluator/evaluator.hpp"
#include "policyforge/io/blob.hpp"
#include "policyforge/paramcodec/paramcodec.hpp"

namespace policyforge {

struct EvalConfig {
  int init_seeds = 5;
  std::uint64_t seed_base = 9000;
  std::vector<int> topk = {5, 10};
  float condition_noise_sigma = 0.1f;
  int diversity_seeds = 10;
};

struct GenerateConfig {
  int conditions = 50;                 // per task
  int seeds_per_condition = 1;
  std::string condition_mode = "both"; // both | h-only | v-only
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  PolicyArch arch{8, {32, 32}, 2};
  TrainerConfig trainer;
  int seeds_per_task = 4;
  int checkpoints_per_task = 300;
  int conditions_per_task = 100;
  float holdout_fraction = 0.1f;
  CodecConfig codec;
  BehaviorConfig behavior;
  DenoiserConfig denoiser;
  SamplerConfig sampler;
  GenerateConfig generate;
  EvalConfig eval;

  std::vector<std::uint64_t> eval_seed_list() const {
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < eval.init_seeds; ++i) {
      seeds.push_back(eval.seed_base + static_cast<std::uint64_t>(i));
    }
    return seeds;
  }
};

PipelineConfig default_config();
PipelineConfig config_from_json(const Json& j);
Json config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::optional<std::filesystem::path>& path);

// Itemized dimensional/consistency errors; empty means valid.
std::vector<std::string> validate_config(const PipelineConfig& cfg);

// Content-hash ledger. A stage runs only when every upstream artifact exists
// on disk and hashes to what the producing stage recorded.
class RunLedger {
 public:
  explicit RunLedger(std::filesystem::path out_dir);

  void require(const std::string& stage,
               const std::vector<std::string>& artifacts) const;
  void record_stage(const std::string& stage,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, double seconds);
  bool has_stage(const std::string& stage) const;
  double stage_seconds(const std::string& stage) const;

 private:
  void save() const;
  std::filesystem::path dir_;
  Json data_;
};

// Deterministic train/holdout split over manifest checkpoints, persisted by
// train-ae and reused by the later stages.
struct CorpusSplit {
  std::vector<int> train_indices;
  std::vector<int> holdout_indices;
};
CorpusSplit make_split(int count, float holdout_fraction, std::uint64_t seed);

// stage entry points; each records itself in the ledger
void run_gen_data(const PipelineConfig& cfg, const std::filesystem::path& out);
void run_train_ae(const PipelineConfig& cfg, const std::filesystem::path& out);
void run_train_embed(const PipelineConfig& cfg, const std::filesystem::path& out);
void run_train_diff(const PipelineConfig& cfg, const std::filesystem::path& out);
void run_generate(const PipelineConfig& cfg, const std::filesystem::path& out);
void run_eval(const PipelineConfig& cfg, const std::filesystem::path& out);
void run_report(const PipelineConfig& cfg, const std::filesystem::path& out);

// convenience: all stages in order
void run_all(const PipelineConfig& cfg, const std::filesystem::path& out);

}  // namespace policyforge

#endif  // POLICYFORGE_PIPELINE_PIPELINE_HPP_
