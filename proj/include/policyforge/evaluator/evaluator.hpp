#ifndef POLICYFORGE_EVALUATOR_EVALUATOR_HPP_
#define POLICYFORGE_EVALUATOR_EVALUATOR_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "policyforge/envsuite/envsuite.hpp"
#include "policyforge/policy/policy.hpp"

namespace policyforge {

struct EvalReport {
  std::string task;
  std::string split;               // "seen" or "unseen"
  std::string condition_provenance;
  std::vector<float> success_rates;  // per policy, over the init seeds
  std::vector<bool> qualified;       // rate == 1.0
  float qualified_rate = 0.0f;
  std::map<int, float> topk_mean;    // k -> mean success of the top-k policies
};

// Success rate per policy over the given initializations; qualified policies
// hit rate 1.0. Top-k ranking breaks ties by original policy index.
EvalReport evaluate_policies(const std::vector<ParamVector>& policies,
                             const TaskSpec& task,
                             const std::vector<std::uint64_t>& init_seeds,
                             const std::vector<int>& topk = {5, 10});

// i.i.d. Gaussian action noise, re-clipped to [-1,1]; states untouched.
std::vector<Trajectory> noisy_condition_suite(
    const std::vector<Trajectory>& conditions, float sigma, std::uint64_t seed);

float cosine_similarity(const ParamVector& a, const ParamVector& b);

// rows: generated policies; cols: reference policies
Eigen::MatrixXf similarity_matrix(const std::vector<ParamVector>& generated,
                                  const std::vector<ParamVector>& reference);

struct TrajectoryDifference {
  float mean_step_distance = 0.0f;
  float endpoint_distance = 0.0f;
  int rows = 0;
};

// Time-aligned positional distance; the shorter trajectory is padded with its
// terminal state. Optionally dumps plot data (one row per aligned step).
TrajectoryDifference trajectory_difference(
    const Trajectory& condition, const Trajectory& deployed,
    const std::optional<std::filesystem::path>& dump_csv = std::nullopt);

void write_similarity_csv(const std::filesystem::path& path,
                          const Eigen::MatrixXf& m);

}  // namespace policyforge

#endif  // POLICYFORGE_EVALUATOR_EVALUATOR_HPP_
