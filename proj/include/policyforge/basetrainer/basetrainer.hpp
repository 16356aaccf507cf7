#ifndef POLICYFORGE_BASETRAINER_BASETRAINER_HPP_
#define POLICYFORGE_BASETRAINER_BASETRAINER_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "policyforge/envsuite/envsuite.hpp"
#include "policyforge/policy/policy.hpp"

namespace policyforge {

struct TrainerConfig {
  int population = 96;
  int elites = 12;
  float sigma_init = 0.1f;
  float sigma_floor = 0.02f;
  int max_generations = 900;
  int save_interval = 5;        // generations between checkpoint saves
  float ckpt_sigma = 0.02f;     // fresh elite-mean perturbation scale at save
  int gate_retries = 25;
  int eval_seeds = 12;          // seeded test initializations for the gate
  bool stratify_gate = true;    // balance gate configs across goal quadrants
  std::uint64_t eval_seed_base = 1000;
  std::uint64_t fixed_init_seed = 0;  // the fixed training environment
  int history_per_generation = 2;
  int condition_cutoff = 60;    // conditions come from generations below this
  int restart_interval = 250;   // re-seed the search if the gate is not reached
  std::uint64_t global_seed = 1;  // enters every run's RNG stream
};

// A corpus entry: parameters that pass the randomized-init test gate plus
// their deployment rollout in the fixed training environment.
struct CheckpointRecord {
  std::string task_id;
  std::uint64_t seed = 0;
  int iteration = 0;
  ParamVector params;
  Trajectory deployment;
  float success_rate_at_save = 0.0f;
};

struct ConditionTrajectory {
  std::string task_id;
  std::uint64_t seed = 0;
  int source_iteration = 0;
  Trajectory traj;
};

struct TrainRunResult {
  std::vector<CheckpointRecord> checkpoints;
  std::vector<Trajectory> history;  // fixed-init rollouts tagged by generation
  bool reached_gate = false;
  int gate_generation = -1;
  int generations_run = 0;
};

// Seeded test initializations used for fitness and the save gate. When
// stratification is on, configurations are balanced across the four
// goal-direction quadrants so the gate cannot be passed by a policy that only
// ever moves one way.
std::vector<std::uint64_t> gate_seeds(const TaskSpec& task,
                                      const TrainerConfig& cfg);

// Success rate of a parameter vector over the seeded test initializations.
float gate_success_rate(const ParamVector& params, const TaskSpec& task,
                        const TrainerConfig& cfg);

// Cross-entropy-method search over the flat parameter vector. Fitness mixes
// the fixed-init rollout with the seeded test initializations; checkpoints
// are emitted once the elite mean passes the test gate at rate 1.0.
// num_checkpoints == 0 runs only condition_cutoff generations (history-only
// mode used for unseen tasks).
TrainRunResult train_base_policy(const TaskSpec& task, std::uint64_t seed,
                                 const PolicyArch& arch,
                                 const TrainerConfig& cfg, int num_checkpoints);

// Uniform sample of early-training trajectories (iteration < cutoff).
std::vector<ConditionTrajectory> harvest_conditions(
    const TrainRunResult& run, const std::string& task_id, std::uint64_t seed,
    int cutoff, int count);

struct ManifestCheckpoint {
  std::string task;
  std::uint64_t seed = 0;
  int iteration = 0;
  std::string path;
  std::string hash;
  float success_rate = 0.0f;
  std::string deploy_path;
  std::string deploy_hash;
};

struct ManifestCondition {
  std::string task;
  std::uint64_t seed = 0;
  int source_iteration = 0;
  bool success = false;
  std::string path;
  std::string hash;
};

struct DatasetManifest {
  PolicyArch arch;
  std::vector<std::string> seen_tasks;
  std::vector<std::string> unseen_tasks;
  std::uint64_t fixed_init_seed = 0;
  std::vector<ManifestCheckpoint> checkpoints;
  std::vector<ManifestCondition> conditions;
};

struct BuildDatasetOptions {
  PolicyArch arch;
  TrainerConfig trainer;
  int seeds_per_task = 4;
  int checkpoints_per_task = 300;  // split evenly across seeds
  int conditions_per_task = 100;
  std::uint64_t base_seed = 1;
};

// Runs the trainer over every task, writes checkpoints/ and trajectories/
// and the manifest with content hashes. Unseen tasks contribute conditions
// only. Task runs execute concurrently.
DatasetManifest build_dataset(const std::filesystem::path& out_dir,
                              const BuildDatasetOptions& opts);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

}  // namespace policyforge

#endif  // POLICYFORGE_BASETRAINER_BASETRAINER_HPP_
