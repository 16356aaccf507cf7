#include "policyforge/envsuite/envsuite.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "policyforge/io/blob.hpp"
#include "policyforge/numeric/rng.hpp"

namespace policyforge {

namespace {

std::vector<TaskSpec> build_registry() {
  std::vector<TaskSpec> tasks;
  TaskSpec base;

  base.id = "plain";
  base.variant = Dynamics::kPlain;
  base.seen = true;
  tasks.push_back(base);

  base.id = "wall";
  base.variant = Dynamics::kWall;
  tasks.push_back(base);

  base.id = "drag-zone";
  base.variant = Dynamics::kDragZone;
  tasks.push_back(base);

  base.id = "moving-goal";
  base.variant = Dynamics::kMovingGoal;
  base.goal_drift = Eigen::Vector2f(0.003f, -0.0015f);
  tasks.push_back(base);
  base.goal_drift.setZero();

  base.id = "mirrored-control";
  base.variant = Dynamics::kMirroredControl;
  tasks.push_back(base);

  base.id = "hold-at-goal";
  base.variant = Dynamics::kHoldAtGoal;
  base.k_hold = 5;
  tasks.push_back(base);
  base.k_hold = 1;

  base.id = "offset-wall";
  base.variant = Dynamics::kOffsetWall;
  base.seen = false;
  base.wall_half_len = 0.35f;
  tasks.push_back(base);
  base.wall_half_len = 0.3f;

  base.id = "heavy-drag";
  base.variant = Dynamics::kHeavyDrag;
  base.friction = 0.2f;
  tasks.push_back(base);
  base.friction = 0.02f;

  base.id = "far-goal";
  base.variant = Dynamics::kFarGoal;
  tasks.push_back(base);

  return tasks;
}

Eigen::Vector2f clamp_box(Eigen::Vector2f v) {
  return v.cwiseMax(-1.0f).cwiseMin(1.0f);
}

}  // namespace

const std::vector<TaskSpec>& task_registry() {
  static const std::vector<TaskSpec> tasks = build_registry();
  return tasks;
}

const TaskSpec& find_task(const std::string& id) {
  for (const TaskSpec& t : task_registry()) {
    if (t.id == id) return t;
  }
  throw std::invalid_argument("unknown task id: " + id);
}

bool within_goal(const EnvState& s, const TaskSpec& task) {
  return (s.pos - s.goal).norm() < task.goal_radius;
}

EnvState reset(const TaskSpec& task, std::uint64_t init_seed) {
  Rng rng(derive_seed(fnv1a64(task.id), "env-reset", init_seed));
  EnvState s;
  s.pos.x() = static_cast<float>(rng.uniform(-0.85, 0.85));
  s.pos.y() = static_cast<float>(rng.uniform(-0.85, 0.85));
  s.vel.setZero();

  const bool far = task.variant == Dynamics::kFarGoal;
  const float lo = far ? 0.7f : 0.35f;
  const float hi = far ? 1.5f : 0.95f;
  const float box = far ? 0.95f : 0.7f;
  do {
    s.goal.x() = static_cast<float>(rng.uniform(-box, box));
    s.goal.y() = static_cast<float>(rng.uniform(-box, box));
  } while ((s.goal - s.pos).norm() < lo || (s.goal - s.pos).norm() > hi);

  switch (task.variant) {
    case Dynamics::kWall:
    case Dynamics::kOffsetWall: {
      const Eigen::Vector2f mid = 0.5f * (s.pos + s.goal);
      const float jx = task.variant == Dynamics::kWall ? 0.08f : 0.22f;
      const float jy = task.variant == Dynamics::kWall ? 0.15f : 0.3f;
      s.obstacle.x() = std::clamp(
          mid.x() + static_cast<float>(rng.uniform(-jx, jx)), -0.9f, 0.9f);
      s.obstacle.y() = std::clamp(
          mid.y() + static_cast<float>(rng.uniform(-jy, jy)), -0.9f, 0.9f);
      break;
    }
    case Dynamics::kDragZone: {
      const Eigen::Vector2f mid = 0.5f * (s.pos + s.goal);
      s.obstacle.x() = std::clamp(
          mid.x() + static_cast<float>(rng.uniform(-0.15, 0.15)), -0.9f, 0.9f);
      s.obstacle.y() = std::clamp(
          mid.y() + static_cast<float>(rng.uniform(-0.15, 0.15)), -0.9f, 0.9f);
      break;
    }
    default:
      s.obstacle.setZero();
  }
  s.hold_count = within_goal(s, task) ? 1 : 0;
  return s;
}

Transition step(const EnvState& state, Eigen::Vector2f action,
                const TaskSpec& task) {
  if (!action.allFinite()) throw std::invalid_argument("step: non-finite action");
  action = action.cwiseMax(-1.0f).cwiseMin(1.0f);

  Eigen::Vector2f applied = action;
  if (task.variant == Dynamics::kMirroredControl) applied.x() = -applied.x();

  float friction = task.friction;
  if (task.variant == Dynamics::kDragZone) {
    // drag multiplier fades linearly from the zone center to its rim
    const float d = (state.pos - state.obstacle).norm();
    if (d < task.zone_radius) {
      const float w = 1.0f - d / task.zone_radius;
      friction += (task.zone_friction - task.friction) * w;
    }
  }

  EnvState next = state;
  next.vel = state.vel * (1.0f - friction) + applied * (task.dt * task.gain);
  const float speed = next.vel.norm();
  if (speed > task.v_max) next.vel *= task.v_max / speed;

  Eigen::Vector2f target = state.pos + next.vel * task.dt;

  if (task.variant == Dynamics::kWall || task.variant == Dynamics::kOffsetWall) {
    // vertical wall segment at x = obstacle.x spanning obstacle.y +- half_len;
    // crossing it stops the normal velocity component
    const float wx = state.obstacle.x();
    const float dx0 = state.pos.x() - wx;
    const float dx1 = target.x() - wx;
    if (dx0 * dx1 < 0.0f || (dx0 != 0.0f && dx1 == 0.0f)) {
      const float t = dx0 / (dx0 - dx1);
      const float y_cross = state.pos.y() + t * (target.y() - state.pos.y());
      if (std::abs(y_cross - state.obstacle.y()) <= task.wall_half_len) {
        const float side = dx0 > 0.0f ? 1.0f : -1.0f;
        target.x() = wx + side * 1e-3f;
        target.y() = y_cross;
        next.vel.x() = 0.0f;
      }
    }
  }

  next.pos = clamp_box(target);

  if (task.variant == Dynamics::kMovingGoal) {
    next.goal = clamp_box(state.goal + task.goal_drift);
  }

  const bool in_goal = within_goal(next, task);
  next.hold_count = in_goal ? state.hold_count + 1 : 0;

  Transition tr;
  tr.state = state;
  tr.action = action;
  tr.next = next;
  tr.success = in_goal && next.hold_count >= task.k_hold;
  return tr;
}

Trajectory rollout_fn(const ActionFn& policy, const TaskSpec& task,
                      std::uint64_t init_seed) {
  Trajectory traj;
  traj.task_id = task.id;
  traj.init_seed = init_seed;
  EnvState s = reset(task, init_seed);
  traj.states.reserve(static_cast<std::size_t>(task.horizon) + 1);
  traj.actions.reserve(static_cast<std::size_t>(task.horizon));
  traj.success.reserve(static_cast<std::size_t>(task.horizon));
  traj.states.push_back(s.observation());
  for (int t = 0; t < task.horizon; ++t) {
    const Eigen::Vector2f a = policy(s.observation());
    Transition tr = step(s, a, task);
    traj.actions.push_back(tr.action);
    traj.states.push_back(tr.next.observation());
    traj.success.push_back(tr.success ? 1 : 0);
    if (tr.success && traj.first_success < 0) {
      traj.first_success = t + 1;  // state index of the flagged state
      traj.succeeded = true;
    }
    s = tr.next;
  }
  return traj;
}

Trajectory rollout(const ParamVector& params, const TaskSpec& task,
                   std::uint64_t init_seed) {
  DeployedPolicy policy(params);
  return rollout_fn(
      [&policy](const Eigen::Matrix<float, 8, 1>& obs) {
        return policy.act(obs);
      },
      task, init_seed);
}

void save_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  const int h = traj.length();
  Json header = {{"task", traj.task_id},
                 {"init_seed", traj.init_seed},
                 {"source_iteration", traj.source_iteration},
                 {"horizon", h},
                 {"state_dim", 8},
                 {"action_dim", 2},
                 {"first_success", traj.first_success},
                 {"success", traj.succeeded}};
  std::vector<float> final_state(traj.states.back().data(),
                                 traj.states.back().data() + 8);
  header["final_state"] = final_state;
  std::vector<float> rows;
  rows.reserve(static_cast<std::size_t>(h) * 11);
  for (int t = 0; t < h; ++t) {
    for (int i = 0; i < 8; ++i) rows.push_back(traj.states[t][i]);
    rows.push_back(traj.actions[t].x());
    rows.push_back(traj.actions[t].y());
    rows.push_back(traj.success[t] ? 1.0f : 0.0f);
  }
  write_json_blob(path, "", header, rows.data(), rows.size());
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  JsonBlob blob = read_json_blob(path, "");
  Trajectory traj;
  traj.task_id = blob.header.at("task").get<std::string>();
  traj.init_seed = blob.header.at("init_seed").get<std::uint64_t>();
  traj.source_iteration = blob.header.at("source_iteration").get<int>();
  traj.first_success = blob.header.at("first_success").get<int>();
  traj.succeeded = blob.header.at("success").get<bool>();
  const int h = blob.header.at("horizon").get<int>();
  if (static_cast<int>(blob.data.size()) != h * 11) {
    throw std::runtime_error("trajectory blob length mismatch: " + path.string());
  }
  for (int t = 0; t < h; ++t) {
    const float* row = blob.data.data() + static_cast<std::ptrdiff_t>(t) * 11;
    Eigen::Matrix<float, 8, 1> s;
    for (int i = 0; i < 8; ++i) s[i] = row[i];
    traj.states.push_back(s);
    traj.actions.push_back(Eigen::Vector2f(row[8], row[9]));
    traj.success.push_back(row[10] > 0.5f ? 1 : 0);
  }
  const auto fs = blob.header.at("final_state").get<std::vector<float>>();
  Eigen::Matrix<float, 8, 1> last;
  for (int i = 0; i < 8; ++i) last[i] = fs.at(static_cast<std::size_t>(i));
  traj.states.push_back(last);
  return traj;
}

}  // namespace policyforge
