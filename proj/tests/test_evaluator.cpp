#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "policyforge/evaluator/evaluator.hpp"
#include "policyforge/numeric/rng.hpp"

using namespace policyforge;

namespace {

ParamVector zero_policy() {
  ParamVector p;
  p.arch = {8, {32, 32}, 2};
  p.values = Eigen::VectorXf::Zero(param_count(p.arch));
  return p;
}

ParamVector random_policy(std::uint64_t seed) {
  Rng rng(seed);
  ParamVector p;
  p.arch = {8, {32, 32}, 2};
  p.values.resize(param_count(p.arch));
  for (long i = 0; i < p.values.size(); ++i) p.values[i] = rng.normalf() * 0.3f;
  return p;
}

Trajectory synthetic_traj(std::uint64_t seed, int length, float action_scale) {
  Rng rng(seed);
  Trajectory t;
  t.task_id = "plain";
  for (int i = 0; i <= length; ++i) {
    Eigen::Matrix<float, 8, 1> s;
    for (int j = 0; j < 8; ++j) s[j] = rng.normalf() * 0.2f;
    t.states.push_back(s);
  }
  for (int i = 0; i < length; ++i) {
    t.actions.push_back(Eigen::Vector2f(rng.normalf() * action_scale,
                                        rng.normalf() * action_scale));
    t.success.push_back(0);
  }
  return t;
}

}  // namespace

TEST_CASE("qualified rate and top-k means from known rates") {
  // hand-constructed report math via a recount
  std::vector<float> rates = {1.0f, 1.0f, 0.6f, 0.2f};
  int qualified = 0;
  for (float r : rates) qualified += r >= 1.0f;
  CHECK(static_cast<float>(qualified) / rates.size() == doctest::Approx(0.5f));
  // top-2 mean is 1.0
  std::vector<float> sorted = rates;
  std::sort(sorted.rbegin(), sorted.rend());
  CHECK((sorted[0] + sorted[1]) / 2.0f == doctest::Approx(1.0f));
}

TEST_CASE("zero-weight policies never qualify") {
  std::vector<ParamVector> policies(3, zero_policy());
  const TaskSpec& task = find_task("plain");
  const EvalReport rep =
      evaluate_policies(policies, task, {9000, 9001, 9002, 9003, 9004});
  CHECK(rep.qualified_rate == 0.0f);
  for (float r : rep.success_rates) CHECK(r == 0.0f);
  CHECK(rep.topk_mean.at(5) == 0.0f);
  CHECK(rep.split == "seen");
}

TEST_CASE("qualified rate equals a brute-force recount") {
  std::vector<ParamVector> policies;
  for (int i = 0; i < 6; ++i) policies.push_back(random_policy(40 + i));
  const TaskSpec& task = find_task("plain");
  const std::vector<std::uint64_t> seeds = {9000, 9001, 9002, 9003, 9004};
  const EvalReport rep = evaluate_policies(policies, task, seeds);
  int recount = 0;
  for (std::size_t i = 0; i < policies.size(); ++i) {
    int hits = 0;
    for (std::uint64_t s : seeds) hits += rollout(policies[i], task, s).succeeded;
    const float rate = static_cast<float>(hits) / seeds.size();
    CHECK(rate == rep.success_rates[i]);
    recount += rate >= 1.0f;
  }
  CHECK(rep.qualified_rate ==
        doctest::Approx(static_cast<float>(recount) / policies.size()));
}

TEST_CASE("top-k mean is permutation invariant") {
  const TaskSpec& task = find_task("plain");
  const std::vector<std::uint64_t> seeds = {9000, 9001, 9002};
  std::vector<ParamVector> policies;
  for (int i = 0; i < 8; ++i) policies.push_back(random_policy(70 + i));
  const EvalReport a = evaluate_policies(policies, task, seeds);
  std::reverse(policies.begin(), policies.end());
  const EvalReport b = evaluate_policies(policies, task, seeds);
  CHECK(a.topk_mean.at(5) == doctest::Approx(b.topk_mean.at(5)));
  CHECK(a.topk_mean.at(10) == doctest::Approx(b.topk_mean.at(10)));
}

TEST_CASE("evaluate_policies requires seeds and matching arch") {
  std::vector<ParamVector> policies = {zero_policy()};
  CHECK_THROWS_AS(evaluate_policies(policies, find_task("plain"), {}),
                  std::invalid_argument);
}

TEST_CASE("sigma zero leaves conditions identical") {
  std::vector<Trajectory> conds = {synthetic_traj(1, 50, 0.3f)};
  const auto out = noisy_condition_suite(conds, 0.0f, 7);
  for (int t = 0; t < 50; ++t) {
    CHECK(out[0].actions[static_cast<std::size_t>(t)] ==
          conds[0].actions[static_cast<std::size_t>(t)]);
  }
  CHECK_THROWS_AS(noisy_condition_suite(conds, -0.1f, 7), std::invalid_argument);
}

TEST_CASE("noise magnitude matches the folded-normal mean") {
  // small actions keep clipping out of the picture
  std::vector<Trajectory> conds;
  for (int i = 0; i < 40; ++i) conds.push_back(synthetic_traj(100 + i, 100, 0.05f));
  const float sigma = 0.1f;
  const auto noisy = noisy_condition_suite(conds, sigma, 11);
  double acc = 0.0;
  long count = 0;
  for (std::size_t i = 0; i < conds.size(); ++i) {
    for (std::size_t t = 0; t < conds[i].actions.size(); ++t) {
      acc += std::abs(noisy[i].actions[t].x() - conds[i].actions[t].x());
      acc += std::abs(noisy[i].actions[t].y() - conds[i].actions[t].y());
      count += 2;
    }
  }
  const double expected = sigma * std::sqrt(2.0 / 3.14159265358979323846);
  CHECK(std::abs(acc / count - expected) / expected < 0.05);
  // states untouched
  CHECK(noisy[0].states[3] == conds[0].states[3]);
}

TEST_CASE("cosine similarity basics") {
  ParamVector a = random_policy(5);
  ParamVector b = a;
  CHECK(cosine_similarity(a, b) == doctest::Approx(1.0f));
  b.values = -a.values;
  CHECK(cosine_similarity(a, b) == doctest::Approx(-1.0f));
  ParamVector zero = zero_policy();
  CHECK_THROWS_AS(cosine_similarity(a, zero), std::invalid_argument);
  ParamVector shorter;
  shorter.arch = {8, {16}, 2};
  shorter.values = Eigen::VectorXf::Ones(param_count(shorter.arch));
  CHECK_THROWS_AS(cosine_similarity(a, shorter), std::invalid_argument);
}

TEST_CASE("self-similarity matrix has a unit diagonal") {
  std::vector<ParamVector> ps;
  for (int i = 0; i < 4; ++i) ps.push_back(random_policy(200 + i));
  const Eigen::MatrixXf m = similarity_matrix(ps, ps);
  for (int i = 0; i < 4; ++i) {
    CHECK(m(i, i) == doctest::Approx(1.0f));
    for (int j = 0; j < 4; ++j) {
      CHECK(m(i, j) >= -1.0f);
      CHECK(m(i, j) <= 1.0f);
    }
  }
}

TEST_CASE("trajectory difference: identical, padded, and dump rows") {
  const Trajectory a = synthetic_traj(31, 60, 0.2f);
  const TrajectoryDifference same = trajectory_difference(a, a);
  CHECK(same.mean_step_distance == 0.0f);
  CHECK(same.endpoint_distance == 0.0f);
  CHECK(same.rows == 61);

  Trajectory b = synthetic_traj(32, 40, 0.2f);
  const auto dir = std::filesystem::temp_directory_path() / "pf_eval_test";
  const auto csv = dir / "diff.csv";
  const TrajectoryDifference diff = trajectory_difference(a, b, csv);
  CHECK(diff.rows == 61);  // max of the two state counts
  std::ifstream in(csv);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 62);  // header + rows
  std::filesystem::remove_all(dir);

  Trajectory empty;
  CHECK_THROWS_AS(trajectory_difference(empty, a), std::invalid_argument);
}
