#ifndef POLICYFORGE_ENVSUITE_ENVSUITE_HPP_
#define POLICYFORGE_ENVSUITE_ENVSUITE_HPP_

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "policyforge/policy/policy.hpp"

namespace policyforge {

enum class Dynamics {
  kPlain,
  kWall,
  kDragZone,
  kMovingGoal,
  kMirroredControl,
  kHoldAtGoal,
  kOffsetWall,
  kHeavyDrag,
  kFarGoal,
};

// Point-mass task family in the arena [-1,1]^2. Deterministic dynamics;
// randomness only enters through seeded resets.
struct TaskSpec {
  std::string id;
  Dynamics variant = Dynamics::kPlain;
  bool seen = true;
  int horizon = 100;
  float goal_radius = 0.05f;
  int k_hold = 1;  // consecutive in-goal steps required for success

  float dt = 0.05f;
  float gain = 10.0f;
  float v_max = 2.0f;
  float friction = 0.02f;
  float zone_friction = 0.3f;   // drag-zone friction at the zone center
  float zone_radius = 0.28f;
  float wall_half_len = 0.3f;
  Eigen::Vector2f goal_drift = Eigen::Vector2f::Zero();
};

// State dimension is fixed at 8 across all tasks; variants without an
// obstacle keep those slots zeroed. hold_count is episode bookkeeping for the
// hold-at-goal success rule and is not part of the observation.
struct EnvState {
  Eigen::Vector2f pos = Eigen::Vector2f::Zero();
  Eigen::Vector2f vel = Eigen::Vector2f::Zero();
  Eigen::Vector2f goal = Eigen::Vector2f::Zero();
  Eigen::Vector2f obstacle = Eigen::Vector2f::Zero();
  int hold_count = 0;

  Eigen::Matrix<float, 8, 1> observation() const {
    Eigen::Matrix<float, 8, 1> o;
    o << pos, vel, goal, obstacle;
    return o;
  }
};

struct Transition {
  EnvState state;
  Eigen::Vector2f action;
  EnvState next;
  bool success = false;
};

struct Trajectory {
  std::string task_id;
  std::uint64_t init_seed = 0;
  int source_iteration = -1;
  std::vector<Eigen::Matrix<float, 8, 1>> states;  // horizon+1 entries
  std::vector<Eigen::Vector2f> actions;            // horizon entries
  std::vector<std::uint8_t> success;               // flag of transition t
  int first_success = -1;  // state index of the first flagged state, -1 if none
  bool succeeded = false;

  int length() const { return static_cast<int>(actions.size()); }
};

// All nine task variants: six seen, three unseen.
const std::vector<TaskSpec>& task_registry();
const TaskSpec& find_task(const std::string& id);

// Distance predicate used for per-transition success (before the hold rule).
bool within_goal(const EnvState& s, const TaskSpec& task);

EnvState reset(const TaskSpec& task, std::uint64_t init_seed);

Transition step(const EnvState& state, Eigen::Vector2f action,
                const TaskSpec& task);

using ActionFn =
    std::function<Eigen::Vector2f(const Eigen::Matrix<float, 8, 1>&)>;

Trajectory rollout_fn(const ActionFn& policy, const TaskSpec& task,
                      std::uint64_t init_seed);

Trajectory rollout(const ParamVector& params, const TaskSpec& task,
                   std::uint64_t init_seed);

// Trajectory file: header JSON + little-endian float blob of [s,a,success]
// rows, one row per transition; the final state rides in the header.
void save_trajectory(const std::filesystem::path& path, const Trajectory& traj);
Trajectory load_trajectory(const std::filesystem::path& path);

}  // namespace policyforge

#endif  // POLICYFORGE_ENVSUITE_ENVSUITE_HPP_
