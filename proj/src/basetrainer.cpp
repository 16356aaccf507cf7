#include "policyforge/basetrainer/basetrainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "policyforge/io/blob.hpp"
#include "policyforge/numeric/rng.hpp"
#include "policyforge/numeric/threading.hpp"

namespace policyforge {

namespace {

// Shaped score of one rollout: success pays a bonus that favors reaching the
// goal early; failures are ranked by closest approach. Distances come from
// the recorded states (goal slots track moving goals).
float traj_score(const Trajectory& t, float goal_radius) {
  if (t.succeeded) {
    // favor staying on the goal over raw arrival speed; parked policies
    // survive the save gate's perturbations far better than edge-riders
    const float frac = static_cast<float>(t.first_success) /
                       static_cast<float>(t.length());
    int in_goal = 0;
    for (const auto& s : t.states) {
      const float dx = s[0] - s[4];
      const float dy = s[1] - s[5];
      if (std::sqrt(dx * dx + dy * dy) < goal_radius) ++in_goal;
    }
    return 2.0f + 0.2f * (1.0f - frac) +
           static_cast<float>(in_goal) / static_cast<float>(t.states.size());
  }
  // closest approach plus an average-distance term so hovering near the goal
  // outranks fast fly-bys that end pinned at an arena wall
  float min_dist = std::numeric_limits<float>::max();
  float avg_dist = 0.0f;
  for (const auto& s : t.states) {
    const float dx = s[0] - s[4];
    const float dy = s[1] - s[5];
    const float d = std::sqrt(dx * dx + dy * dy);
    min_dist = std::min(min_dist, d);
    avg_dist += d;
  }
  avg_dist /= static_cast<float>(t.states.size());
  return -(min_dist + 0.25f * avg_dist);
}

struct CandidateEval {
  float fitness = 0.0f;
  Trajectory fixed_traj;
};

CandidateEval evaluate_candidate(const ParamVector& params, const TaskSpec& task,
                                 const TrainerConfig& cfg,
                                 const std::vector<std::uint64_t>& seeds) {
  CandidateEval out;
  out.fixed_traj = rollout(params, task, cfg.fixed_init_seed);
  float acc = traj_score(out.fixed_traj, task.goal_radius);
  for (std::uint64_t s : seeds) {
    acc += traj_score(rollout(params, task, s), task.goal_radius);
  }
  out.fitness = acc / static_cast<float>(1 + seeds.size());
  return out;
}

// A gate rollout counts only when the policy both succeeds and is still
// parked inside the goal region at the horizon; parked policies sit in much
// wider parameter basins, which downstream reconstruction relies on.
bool gate_hit(const Trajectory& t, const TaskSpec& task) {
  if (!t.succeeded) return false;
  const auto& last = t.states.back();
  const float dx = last[0] - last[4];
  const float dy = last[1] - last[5];
  return std::sqrt(dx * dx + dy * dy) < task.goal_radius * 2.0f;
}

float gated_rate(const ParamVector& params, const TaskSpec& task,
                 const std::vector<std::uint64_t>& seeds,
                 bool early_exit = false) {
  if (seeds.empty()) return 0.0f;
  int hits = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (gate_hit(rollout(params, task, seeds[i]), task)) {
      ++hits;
    } else if (early_exit) {
      return static_cast<float>(hits) / static_cast<float>(seeds.size());
    }
  }
  return static_cast<float>(hits) / static_cast<float>(seeds.size());
}

}  // namespace

std::vector<std::uint64_t> gate_seeds(const TaskSpec& task,
                                      const TrainerConfig& cfg) {
  std::vector<std::uint64_t> seeds;
  if (cfg.eval_seeds <= 0) return seeds;
  if (!cfg.stratify_gate) {
    for (int i = 0; i < cfg.eval_seeds; ++i) {
      seeds.push_back(cfg.eval_seed_base + static_cast<std::uint64_t>(i));
    }
    return seeds;
  }
  const int per_quadrant = (cfg.eval_seeds + 3) / 4;
  int counts[4] = {0, 0, 0, 0};
  const std::uint64_t scan_limit = 512;
  for (std::uint64_t i = 0;
       i < scan_limit && static_cast<int>(seeds.size()) < cfg.eval_seeds; ++i) {
    const std::uint64_t s = cfg.eval_seed_base + i;
    const EnvState st = reset(task, s);
    const Eigen::Vector2f d = st.goal - st.pos;
    const int q = (d.x() >= 0 ? 0 : 1) + (d.y() >= 0 ? 0 : 2);
    if (counts[q] >= per_quadrant) continue;
    ++counts[q];
    seeds.push_back(s);
  }
  // top up if the scan ran out of some quadrant
  for (std::uint64_t i = 0;
       static_cast<int>(seeds.size()) < cfg.eval_seeds && i < scan_limit; ++i) {
    const std::uint64_t s = cfg.eval_seed_base + i;
    if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) {
      seeds.push_back(s);
    }
  }
  std::sort(seeds.begin(), seeds.end());
  return seeds;
}

float gate_success_rate(const ParamVector& params, const TaskSpec& task,
                        const TrainerConfig& cfg) {
  return gated_rate(params, task, gate_seeds(task, cfg));
}

TrainRunResult train_base_policy(const TaskSpec& task, std::uint64_t seed,
                                 const PolicyArch& arch,
                                 const TrainerConfig& cfg,
                                 int num_checkpoints) {
  const long dim = param_count(arch);
  Rng rng(derive_seed(fnv1a64(task.id) ^ cfg.global_seed, "cem-run", seed));

  Eigen::VectorXf mean = Eigen::VectorXf::Zero(dim);
  Eigen::VectorXf sigma = Eigen::VectorXf::Constant(dim, cfg.sigma_init);

  TrainRunResult run;
  const std::vector<std::uint64_t> eseeds = gate_seeds(task, cfg);
  const bool history_only = num_checkpoints == 0;
  const int budget = history_only ? cfg.condition_cutoff : cfg.max_generations;
  int last_save = -cfg.save_interval;

  std::vector<ParamVector> pop(static_cast<std::size_t>(cfg.population));
  std::vector<CandidateEval> evals(static_cast<std::size_t>(cfg.population));

  int anneal_start = 0;
  float best_rate = -1.0f;
  int last_improvement = 0;
  for (int gen = 0; gen < budget; ++gen) {
    run.generations_run = gen + 1;
    // escape hatch for runs whose test rate stopped improving in a bad basin
    if (!history_only && !run.reached_gate &&
        gen - last_improvement >= cfg.restart_interval) {
      mean.setZero();
      sigma.setConstant(cfg.sigma_init);
      anneal_start = gen;
      best_rate = -1.0f;
      last_improvement = gen;
    }
    // antithetic pairs: candidate 2k+1 mirrors candidate 2k
    for (int i = 0; i < cfg.population; i += 2) {
      ParamVector& a = pop[static_cast<std::size_t>(i)];
      a.arch = arch;
      a.values.resize(dim);
      for (long j = 0; j < dim; ++j) {
        a.values[j] = sigma[j] * rng.normalf();
      }
      if (i + 1 < cfg.population) {
        ParamVector& b = pop[static_cast<std::size_t>(i + 1)];
        b.arch = arch;
        b.values = mean - a.values;
      }
      a.values += mean;
    }
    parallel_for(cfg.population, [&](int i) {
      evals[static_cast<std::size_t>(i)] =
          evaluate_candidate(pop[static_cast<std::size_t>(i)], task, cfg, eseeds);
    });

    std::vector<int> order(static_cast<std::size_t>(cfg.population));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return evals[static_cast<std::size_t>(a)].fitness >
             evals[static_cast<std::size_t>(b)].fitness;
    });

    // history: the generation best plus random extras from the fixed env
    {
      Trajectory t = evals[static_cast<std::size_t>(order[0])].fixed_traj;
      t.source_iteration = gen;
      run.history.push_back(std::move(t));
      for (int e = 1; e < cfg.history_per_generation; ++e) {
        const int pick = static_cast<int>(
            rng.uniform_int(static_cast<std::uint64_t>(cfg.population)));
        Trajectory extra = evals[static_cast<std::size_t>(pick)].fixed_traj;
        extra.source_iteration = gen;
        run.history.push_back(std::move(extra));
      }
    }

    // elite refit
    const int ne = std::min(cfg.elites, cfg.population);
    Eigen::VectorXf new_mean = Eigen::VectorXf::Zero(dim);
    for (int e = 0; e < ne; ++e) {
      new_mean += pop[static_cast<std::size_t>(order[e])].values;
    }
    new_mean /= static_cast<float>(ne);
    Eigen::VectorXf var = Eigen::VectorXf::Zero(dim);
    for (int e = 0; e < ne; ++e) {
      var += (pop[static_cast<std::size_t>(order[e])].values - new_mean)
                 .array()
                 .square()
                 .matrix();
    }
    var /= static_cast<float>(ne);
    // the floor anneals so late generations can settle into the tight goal
    // radius instead of orbiting it
    const float floor = std::max(
        0.004f,
        cfg.sigma_floor *
            std::pow(0.5f, static_cast<float>(gen - anneal_start) / 150.0f));
    sigma = (0.5f * sigma.array() + 0.5f * var.array().sqrt())
                .max(floor)
                .matrix();
    mean = std::move(new_mean);

    if (history_only) continue;

    ParamVector mean_params;
    mean_params.arch = arch;
    mean_params.values = mean;
    if (!run.reached_gate) {
      const float rate = gated_rate(mean_params, task, eseeds);
      if (rate > best_rate) {
        best_rate = rate;
        last_improvement = gen;
      }
      if (rate >= 1.0f) {
        run.reached_gate = true;
        run.gate_generation = gen;
      }
    }

    if (run.reached_gate && gen - last_save >= cfg.save_interval &&
        static_cast<int>(run.checkpoints.size()) < num_checkpoints) {
      float save_sigma = cfg.ckpt_sigma;
      for (int attempt = 0; attempt < cfg.gate_retries; ++attempt) {
        if (attempt == cfg.gate_retries / 2) save_sigma *= 0.5f;
        ParamVector cand;
        cand.arch = arch;
        cand.values.resize(dim);
        for (long j = 0; j < dim; ++j) {
          cand.values[j] = mean[j] + save_sigma * rng.normalf();
        }
        const float rate = gated_rate(cand, task, eseeds, /*early_exit=*/true);
        if (rate < 1.0f) continue;
        Trajectory deploy = rollout(cand, task, cfg.fixed_init_seed);
        if (!deploy.succeeded) continue;
        deploy.source_iteration = gen;
        CheckpointRecord rec;
        rec.task_id = task.id;
        rec.seed = seed;
        rec.iteration = gen;
        rec.params = std::move(cand);
        rec.deployment = std::move(deploy);
        rec.success_rate_at_save = rate;
        run.checkpoints.push_back(std::move(rec));
        last_save = gen;
        break;
      }
    }
    if (!history_only &&
        static_cast<int>(run.checkpoints.size()) >= num_checkpoints) {
      break;
    }
  }
  return run;
}

std::vector<ConditionTrajectory> harvest_conditions(const TrainRunResult& run,
                                                    const std::string& task_id,
                                                    std::uint64_t seed,
                                                    int cutoff, int count) {
  std::vector<const Trajectory*> pool;
  for (const Trajectory& t : run.history) {
    if (t.source_iteration < cutoff) pool.push_back(&t);
  }
  if (pool.empty()) {
    throw std::runtime_error("harvest_conditions: empty history below cutoff");
  }
  Rng rng(derive_seed(fnv1a64(task_id), "harvest", seed));
  std::vector<std::size_t> picks;
  if (static_cast<int>(pool.size()) >= count) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    picks.assign(idx.begin(), idx.begin() + count);
    std::sort(picks.begin(), picks.end());
  } else {
    for (int i = 0; i < count; ++i) picks.push_back(rng.uniform_int(pool.size()));
  }
  std::vector<ConditionTrajectory> out;
  out.reserve(picks.size());
  for (std::size_t p : picks) {
    ConditionTrajectory c;
    c.task_id = task_id;
    c.seed = seed;
    c.source_iteration = pool[p]->source_iteration;
    c.traj = *pool[p];
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

struct RunSpec {
  const TaskSpec* task;
  std::uint64_t seed;
  int num_checkpoints;
  int num_conditions;
};

}  // namespace

DatasetManifest build_dataset(const std::filesystem::path& out_dir,
                              const BuildDatasetOptions& opts) {
  namespace fs = std::filesystem;
  DatasetManifest manifest;
  manifest.arch = opts.arch;
  manifest.fixed_init_seed = opts.trainer.fixed_init_seed;

  TrainerConfig trainer = opts.trainer;
  trainer.global_seed = opts.base_seed;

  std::vector<RunSpec> specs;
  for (const TaskSpec& task : task_registry()) {
    (task.seen ? manifest.seen_tasks : manifest.unseen_tasks).push_back(task.id);
    for (int k = 0; k < opts.seeds_per_task; ++k) {
      RunSpec spec;
      spec.task = &task;
      spec.seed = static_cast<std::uint64_t>(k);
      const int base_ck = opts.checkpoints_per_task / opts.seeds_per_task;
      const int extra_ck =
          k < opts.checkpoints_per_task % opts.seeds_per_task ? 1 : 0;
      spec.num_checkpoints = task.seen ? base_ck + extra_ck : 0;
      const int base_cd = opts.conditions_per_task / opts.seeds_per_task;
      const int extra_cd =
          k < opts.conditions_per_task % opts.seeds_per_task ? 1 : 0;
      spec.num_conditions = base_cd + extra_cd;
      specs.push_back(spec);
    }
  }

  std::vector<TrainRunResult> results(specs.size());
  parallel_for(static_cast<int>(specs.size()), [&](int i) {
    const RunSpec& s = specs[static_cast<std::size_t>(i)];
    results[static_cast<std::size_t>(i)] = train_base_policy(
        *s.task, s.seed, opts.arch, trainer, s.num_checkpoints);
  });

  // a run that never reaches the gate is skipped; replacement seeds keep the
  // per-task checkpoint quota intact
  for (const TaskSpec& task : task_registry()) {
    if (!task.seen) continue;
    for (int round = 0; round < 4; ++round) {
      int have = 0;
      for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].task->id == task.id) {
          have += static_cast<int>(results[i].checkpoints.size());
        }
      }
      const int missing = opts.checkpoints_per_task - have;
      if (missing <= 0) break;
      RunSpec spec;
      spec.task = &task;
      spec.seed = static_cast<std::uint64_t>(opts.seeds_per_task + round);
      spec.num_checkpoints = missing;
      spec.num_conditions = 0;
      std::fprintf(stderr,
                   "[basetrainer] %s: %d checkpoints missing, retrying with "
                   "seed %llu\n",
                   task.id.c_str(), missing,
                   static_cast<unsigned long long>(spec.seed));
      specs.push_back(spec);
      results.push_back(train_base_policy(task, spec.seed, opts.arch, trainer,
                                          spec.num_checkpoints));
    }
  }

  for (std::size_t i = 0; i < specs.size(); ++i) {
    const RunSpec& spec = specs[i];
    TrainRunResult& run = results[i];
    const std::string& tid = spec.task->id;
    if (spec.num_checkpoints > 0 && !run.reached_gate) {
      std::fprintf(stderr,
                   "[basetrainer] %s seed %llu: gate not reached in %d "
                   "generations, run skipped\n",
                   tid.c_str(), static_cast<unsigned long long>(spec.seed),
                   run.generations_run);
    }
    for (const CheckpointRecord& rec : run.checkpoints) {
      const std::string stem =
          std::to_string(rec.seed) + "_" + std::to_string(rec.iteration);
      const fs::path ck_rel = fs::path("checkpoints") / tid / (stem + ".maa");
      const fs::path tr_rel =
          fs::path("trajectories") / tid / ("dep_" + stem + ".traj");
      save_checkpoint(out_dir / ck_rel, rec.params);
      save_trajectory(out_dir / tr_rel, rec.deployment);
      ManifestCheckpoint mc;
      mc.task = tid;
      mc.seed = rec.seed;
      mc.iteration = rec.iteration;
      mc.path = ck_rel.generic_string();
      mc.hash = file_hash(out_dir / ck_rel);
      mc.success_rate = rec.success_rate_at_save;
      mc.deploy_path = tr_rel.generic_string();
      mc.deploy_hash = file_hash(out_dir / tr_rel);
      manifest.checkpoints.push_back(std::move(mc));
    }
    const auto conditions = harvest_conditions(
        run, tid, spec.seed, trainer.condition_cutoff, spec.num_conditions);
    for (std::size_t c = 0; c < conditions.size(); ++c) {
      const fs::path rel =
          fs::path("trajectories") / tid /
          ("cond_" + std::to_string(spec.seed) + "_" + std::to_string(c) +
           ".traj");
      save_trajectory(out_dir / rel, conditions[c].traj);
      ManifestCondition mc;
      mc.task = tid;
      mc.seed = spec.seed;
      mc.source_iteration = conditions[c].source_iteration;
      mc.success = conditions[c].traj.succeeded;
      mc.path = rel.generic_string();
      mc.hash = file_hash(out_dir / rel);
      manifest.conditions.push_back(std::move(mc));
    }
  }

  save_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

void save_manifest(const std::filesystem::path& path,
                   const DatasetManifest& m) {
  Json j;
  j["arch"] = {{"input_dim", m.arch.input_dim},
               {"hidden", m.arch.hidden},
               {"action_dim", m.arch.action_dim}};
  j["seen_tasks"] = m.seen_tasks;
  j["unseen_tasks"] = m.unseen_tasks;
  j["fixed_init_seed"] = m.fixed_init_seed;
  Json cks = Json::array();
  for (const auto& c : m.checkpoints) {
    cks.push_back({{"task", c.task},
                   {"seed", c.seed},
                   {"iteration", c.iteration},
                   {"path", c.path},
                   {"hash", c.hash},
                   {"success_rate", c.success_rate},
                   {"deploy_path", c.deploy_path},
                   {"deploy_hash", c.deploy_hash}});
  }
  j["checkpoints"] = std::move(cks);
  Json cds = Json::array();
  for (const auto& c : m.conditions) {
    cds.push_back({{"task", c.task},
                   {"seed", c.seed},
                   {"source_iteration", c.source_iteration},
                   {"success", c.success},
                   {"path", c.path},
                   {"hash", c.hash}});
  }
  j["conditions"] = std::move(cds);
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(1) << "\n";
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  Json j = Json::parse(in);
  DatasetManifest m;
  m.arch.input_dim = j.at("arch").at("input_dim").get<int>();
  m.arch.hidden = j.at("arch").at("hidden").get<std::vector<int>>();
  m.arch.action_dim = j.at("arch").at("action_dim").get<int>();
  m.seen_tasks = j.at("seen_tasks").get<std::vector<std::string>>();
  m.unseen_tasks = j.at("unseen_tasks").get<std::vector<std::string>>();
  m.fixed_init_seed = j.at("fixed_init_seed").get<std::uint64_t>();
  for (const auto& c : j.at("checkpoints")) {
    ManifestCheckpoint mc;
    mc.task = c.at("task").get<std::string>();
    mc.seed = c.at("seed").get<std::uint64_t>();
    mc.iteration = c.at("iteration").get<int>();
    mc.path = c.at("path").get<std::string>();
    mc.hash = c.at("hash").get<std::string>();
    mc.success_rate = c.at("success_rate").get<float>();
    mc.deploy_path = c.at("deploy_path").get<std::string>();
    mc.deploy_hash = c.at("deploy_hash").get<std::string>();
    m.checkpoints.push_back(std::move(mc));
  }
  for (const auto& c : j.at("conditions")) {
    ManifestCondition mc;
    mc.task = c.at("task").get<std::string>();
    mc.seed = c.at("seed").get<std::uint64_t>();
    mc.source_iteration = c.at("source_iteration").get<int>();
    mc.success = c.at("success").get<bool>();
    mc.path = c.at("path").get<std::string>();
    mc.hash = c.at("hash").get<std::string>();
    m.conditions.push_back(std::move(mc));
  }
  return m;
}

}  // namespace policyforge
