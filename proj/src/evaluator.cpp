#include "policyforge/evaluator/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "policyforge/numeric/rng.hpp"
#include "policyforge/numeric/threading.hpp"

namespace policyforge {

EvalReport evaluate_policies(const std::vector<ParamVector>& policies,
                             const TaskSpec& task,
                             const std::vector<std::uint64_t>& init_seeds,
                             const std::vector<int>& topk) {
  if (init_seeds.empty()) {
    throw std::invalid_argument("evaluate_policies: need at least one seed");
  }
  EvalReport report;
  report.task = task.id;
  report.split = task.seen ? "seen" : "unseen";
  report.success_rates.resize(policies.size());
  parallel_for(static_cast<int>(policies.size()), [&](int i) {
    int hits = 0;
    for (std::uint64_t s : init_seeds) {
      if (rollout(policies[static_cast<std::size_t>(i)], task, s).succeeded) {
        ++hits;
      }
    }
    report.success_rates[static_cast<std::size_t>(i)] =
        static_cast<float>(hits) / static_cast<float>(init_seeds.size());
  });
  int qualified_count = 0;
  for (float r : report.success_rates) {
    const bool q = r >= 1.0f;
    report.qualified.push_back(q);
    if (q) ++qualified_count;
  }
  report.qualified_rate =
      policies.empty() ? 0.0f
                       : static_cast<float>(qualified_count) /
                             static_cast<float>(policies.size());

  std::vector<std::size_t> order(policies.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return report.success_rates[a] > report.success_rates[b];
  });
  for (int k : topk) {
    const int take = std::min<int>(k, static_cast<int>(order.size()));
    if (take == 0) continue;
    float acc = 0.0f;
    for (int i = 0; i < take; ++i) acc += report.success_rates[order[static_cast<std::size_t>(i)]];
    report.topk_mean[k] = acc / static_cast<float>(take);
  }
  return report;
}

std::vector<Trajectory> noisy_condition_suite(
    const std::vector<Trajectory>& conditions, float sigma,
    std::uint64_t seed) {
  if (sigma < 0.0f) {
    throw std::invalid_argument("noisy_condition_suite: sigma must be >= 0");
  }
  std::vector<Trajectory> out = conditions;
  if (sigma == 0.0f) return out;
  Rng rng(derive_seed(seed, "condition-noise"));
  for (Trajectory& t : out) {
    for (auto& a : t.actions) {
      a.x() = std::clamp(a.x() + sigma * rng.normalf(), -1.0f, 1.0f);
      a.y() = std::clamp(a.y() + sigma * rng.normalf(), -1.0f, 1.0f);
    }
  }
  return out;
}

float cosine_similarity(const ParamVector& a, const ParamVector& b) {
  if (a.values.size() != b.values.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch");
  }
  const float na = a.values.norm();
  const float nb = b.values.norm();
  if (na == 0.0f || nb == 0.0f) {
    throw std::invalid_argument("cosine_similarity: zero-norm input");
  }
  return std::clamp(a.values.dot(b.values) / (na * nb), -1.0f, 1.0f);
}

Eigen::MatrixXf similarity_matrix(const std::vector<ParamVector>& generated,
                                  const std::vector<ParamVector>& reference) {
  Eigen::MatrixXf m(generated.size(), reference.size());
  for (std::size_t i = 0; i < generated.size(); ++i) {
    for (std::size_t j = 0; j < reference.size(); ++j) {
      m(static_cast<long>(i), static_cast<long>(j)) =
          cosine_similarity(generated[i], reference[j]);
    }
  }
  return m;
}

TrajectoryDifference trajectory_difference(
    const Trajectory& condition, const Trajectory& deployed,
    const std::optional<std::filesystem::path>& dump_csv) {
  if (condition.states.empty() || deployed.states.empty()) {
    throw std::invalid_argument("trajectory_difference: empty trajectory");
  }
  const int rows = static_cast<int>(
      std::max(condition.states.size(), deployed.states.size()));
  TrajectoryDifference diff;
  diff.rows = rows;
  std::ofstream csv;
  if (dump_csv) {
    std::filesystem::create_directories(dump_csv->parent_path());
    csv.open(*dump_csv, std::ios::trunc);
    csv << "step,cond_x,cond_y,dep_x,dep_y,distance\n";
  }
  double acc = 0.0;
  for (int t = 0; t < rows; ++t) {
    const auto& c = condition.states[std::min<std::size_t>(
        static_cast<std::size_t>(t), condition.states.size() - 1)];
    const auto& d = deployed.states[std::min<std::size_t>(
        static_cast<std::size_t>(t), deployed.states.size() - 1)];
    const float dist = std::hypot(c[0] - d[0], c[1] - d[1]);
    acc += dist;
    if (csv.is_open()) {
      csv << t << ',' << c[0] << ',' << c[1] << ',' << d[0] << ',' << d[1]
          << ',' << dist << '\n';
    }
  }
  diff.mean_step_distance = static_cast<float>(acc / rows);
  const auto& ce = condition.states.back();
  const auto& de = deployed.states.back();
  diff.endpoint_distance = std::hypot(ce[0] - de[0], ce[1] - de[1]);
  return diff;
}

void write_similarity_csv(const std::filesystem::path& path,
                          const Eigen::MatrixXf& m) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  for (long i = 0; i < m.rows(); ++i) {
    for (long j = 0; j < m.cols(); ++j) {
      out << m(i, j) << (j + 1 < m.cols() ? "," : "");
    }
    out << '\n';
  }
}

}  // namespace policyforge
