#include "policyforge/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "policyforge/numeric/threading.hpp"

namespace policyforge {

namespace {

namespace fs = std::filesystem;

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void write_json_file(const fs::path& path, const Json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(1) << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Json::parse(in);
}

}  // namespace

PipelineConfig default_config() { return PipelineConfig{}; }

Json config_to_json(const PipelineConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["arch"] = {{"input_dim", c.arch.input_dim},
               {"hidden", c.arch.hidden},
               {"action_dim", c.arch.action_dim}};
  j["trainer"] = {{"population", c.trainer.population},
                  {"elites", c.trainer.elites},
                  {"sigma_init", c.trainer.sigma_init},
                  {"sigma_floor", c.trainer.sigma_floor},
                  {"max_generations", c.trainer.max_generations},
                  {"save_interval", c.trainer.save_interval},
                  {"ckpt_sigma", c.trainer.ckpt_sigma},
                  {"gate_retries", c.trainer.gate_retries},
                  {"eval_seeds", c.trainer.eval_seeds},
                  {"stratify_gate", c.trainer.stratify_gate},
                  {"eval_seed_base", c.trainer.eval_seed_base},
                  {"fixed_init_seed", c.trainer.fixed_init_seed},
                  {"history_per_generation", c.trainer.history_per_generation},
                  {"condition_cutoff", c.trainer.condition_cutoff},
                  {"restart_interval", c.trainer.restart_interval},
                  {"seeds_per_task", c.seeds_per_task},
                  {"checkpoints_per_task", c.checkpoints_per_task},
                  {"conditions_per_task", c.conditions_per_task}};
  j["codec"] = {{"num_chunks", c.codec.num_chunks},
                {"d_latent", c.codec.d_latent},
                {"hidden", c.codec.hidden},
                {"input_noise_factor", c.codec.input_noise_factor},
                {"latent_noise_factor", c.codec.latent_noise_factor},
                {"batch_size", c.codec.batch_size},
                {"lr", c.codec.lr},
                {"weight_decay", c.codec.weight_decay},
                {"epochs", c.codec.epochs},
                {"lr_restart_period", c.codec.lr_restart_period},
                {"shards", c.codec.shards}};
  j["behavior"] = {{"prefix_steps", c.behavior.prefix_steps},
                   {"post_states", c.behavior.post_states},
                   {"d_embed", c.behavior.d_embed},
                   {"hidden", c.behavior.hidden},
                   {"batch_size", c.behavior.batch_size},
                   {"lr", c.behavior.lr},
                   {"weight_decay", c.behavior.weight_decay},
                   {"epochs", c.behavior.epochs},
                   {"lr_restart_period", c.behavior.lr_restart_period}};
  j["diffusion"] = {{"time_embed_dim", c.denoiser.time_embed_dim},
                    {"channels", c.denoiser.channels},
                    {"groups", c.denoiser.groups},
                    {"train_steps", c.denoiser.train_steps},
                    {"batch_size", c.denoiser.batch_size},
                    {"lr", c.denoiser.lr},
                    {"beta1", c.denoiser.beta1},
                    {"beta2", c.denoiser.beta2},
                    {"eps", c.denoiser.eps},
                    {"weight_decay", c.denoiser.weight_decay},
                    {"epochs", c.denoiser.epochs},
                    {"lr_warmup_steps", c.denoiser.lr_warmup_steps},
                    {"shards", c.denoiser.shards},
                    {"num_inference_steps", c.sampler.num_inference_steps},
                    {"eta", c.sampler.eta}};
  j["generate"] = {{"conditions", c.generate.conditions},
                   {"seeds_per_condition", c.generate.seeds_per_condition},
                   {"condition_mode", c.generate.condition_mode}};
  j["eval"] = {{"init_seeds", c.eval.init_seeds},
               {"seed_base", c.eval.seed_base},
               {"topk", c.eval.topk},
               {"condition_noise_sigma", c.eval.condition_noise_sigma},
               {"diversity_seeds", c.eval.diversity_seeds}};
  j["holdout_fraction"] = c.holdout_fraction;
  return j;
}

PipelineConfig config_from_json(const Json& j) {
  PipelineConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("arch")) {
    const Json& a = j.at("arch");
    c.arch.input_dim = a.value("input_dim", c.arch.input_dim);
    c.arch.hidden = a.value("hidden", c.arch.hidden);
    c.arch.action_dim = a.value("action_dim", c.arch.action_dim);
  }
  if (j.contains("trainer")) {
    const Json& t = j.at("trainer");
    c.trainer.population = t.value("population", c.trainer.population);
    c.trainer.elites = t.value("elites", c.trainer.elites);
    c.trainer.sigma_init = t.value("sigma_init", c.trainer.sigma_init);
    c.trainer.sigma_floor = t.value("sigma_floor", c.trainer.sigma_floor);
    c.trainer.max_generations =
        t.value("max_generations", c.trainer.max_generations);
    c.trainer.save_interval = t.value("save_interval", c.trainer.save_interval);
    c.trainer.ckpt_sigma = t.value("ckpt_sigma", c.trainer.ckpt_sigma);
    c.trainer.gate_retries = t.value("gate_retries", c.trainer.gate_retries);
    c.trainer.eval_seeds = t.value("eval_seeds", c.trainer.eval_seeds);
    c.trainer.stratify_gate = t.value("stratify_gate", c.trainer.stratify_gate);
    c.trainer.eval_seed_base =
        t.value("eval_seed_base", c.trainer.eval_seed_base);
    c.trainer.fixed_init_seed =
        t.value("fixed_init_seed", c.trainer.fixed_init_seed);
    c.trainer.history_per_generation =
        t.value("history_per_generation", c.trainer.history_per_generation);
    c.trainer.condition_cutoff =
        t.value("condition_cutoff", c.trainer.condition_cutoff);
    c.trainer.restart_interval =
        t.value("restart_interval", c.trainer.restart_interval);
    c.seeds_per_task = t.value("seeds_per_task", c.seeds_per_task);
    c.checkpoints_per_task =
        t.value("checkpoints_per_task", c.checkpoints_per_task);
    c.conditions_per_task =
        t.value("conditions_per_task", c.conditions_per_task);
  }
  if (j.contains("codec")) {
    const Json& k = j.at("codec");
    c.codec.num_chunks = k.value("num_chunks", c.codec.num_chunks);
    c.codec.d_latent = k.value("d_latent", c.codec.d_latent);
    c.codec.hidden = k.value("hidden", c.codec.hidden);
    c.codec.input_noise_factor =
        k.value("input_noise_factor", c.codec.input_noise_factor);
    c.codec.latent_noise_factor =
        k.value("latent_noise_factor", c.codec.latent_noise_factor);
    c.codec.batch_size = k.value("batch_size", c.codec.batch_size);
    c.codec.lr = k.value("lr", c.codec.lr);
    c.codec.weight_decay = k.value("weight_decay", c.codec.weight_decay);
    c.codec.epochs = k.value("epochs", c.codec.epochs);
    c.codec.lr_restart_period =
        k.value("lr_restart_period", c.codec.lr_restart_period);
    c.codec.shards = k.value("shards", c.codec.shards);
  }
  if (j.contains("behavior")) {
    const Json& b = j.at("behavior");
    c.behavior.prefix_steps = b.value("prefix_steps", c.behavior.prefix_steps);
    c.behavior.post_states = b.value("post_states", c.behavior.post_states);
    c.behavior.d_embed = b.value("d_embed", c.behavior.d_embed);
    c.behavior.hidden = b.value("hidden", c.behavior.hidden);
    c.behavior.batch_size = b.value("batch_size", c.behavior.batch_size);
    c.behavior.lr = b.value("lr", c.behavior.lr);
    c.behavior.weight_decay = b.value("weight_decay", c.behavior.weight_decay);
    c.behavior.epochs = b.value("epochs", c.behavior.epochs);
    c.behavior.lr_restart_period =
        b.value("lr_restart_period", c.behavior.lr_restart_period);
  }
  if (j.contains("diffusion")) {
    const Json& d = j.at("diffusion");
    c.denoiser.time_embed_dim =
        d.value("time_embed_dim", c.denoiser.time_embed_dim);
    c.denoiser.channels = d.value("channels", c.denoiser.channels);
    c.denoiser.groups = d.value("groups", c.denoiser.groups);
    c.denoiser.train_steps = d.value("train_steps", c.denoiser.train_steps);
    c.denoiser.batch_size = d.value("batch_size", c.denoiser.batch_size);
    c.denoiser.lr = d.value("lr", c.denoiser.lr);
    c.denoiser.beta1 = d.value("beta1", c.denoiser.beta1);
    c.denoiser.beta2 = d.value("beta2", c.denoiser.beta2);
    c.denoiser.eps = d.value("eps", c.denoiser.eps);
    c.denoiser.weight_decay = d.value("weight_decay", c.denoiser.weight_decay);
    c.denoiser.epochs = d.value("epochs", c.denoiser.epochs);
    c.denoiser.lr_warmup_steps =
        d.value("lr_warmup_steps", c.denoiser.lr_warmup_steps);
    c.denoiser.shards = d.value("shards", c.denoiser.shards);
    c.sampler.num_inference_steps =
        d.value("num_inference_steps", c.sampler.num_inference_steps);
    c.sampler.eta = d.value("eta", c.sampler.eta);
  }
  if (j.contains("generate")) {
    const Json& g = j.at("generate");
    c.generate.conditions = g.value("conditions", c.generate.conditions);
    c.generate.seeds_per_condition =
        g.value("seeds_per_condition", c.generate.seeds_per_condition);
    c.generate.condition_mode =
        g.value("condition_mode", c.generate.condition_mode);
  }
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    c.eval.init_seeds = e.value("init_seeds", c.eval.init_seeds);
    c.eval.seed_base = e.value("seed_base", c.eval.seed_base);
    c.eval.topk = e.value("topk", c.eval.topk);
    c.eval.condition_noise_sigma =
        e.value("condition_noise_sigma", c.eval.condition_noise_sigma);
    c.eval.diversity_seeds = e.value("diversity_seeds", c.eval.diversity_seeds);
  }
  c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  // the derived dims below always follow the primary knobs
  c.denoiser.tokens = c.codec.num_chunks;
  c.denoiser.token_width = c.codec.d_latent;
  c.denoiser.cond_dim = 2 * c.behavior.d_embed;
  c.behavior.state_dim = c.arch.input_dim;
  c.behavior.action_dim = c.arch.action_dim;
  return c;
}

PipelineConfig load_config(const std::optional<fs::path>& path) {
  if (!path) return config_from_json(Json::object());
  return config_from_json(read_json_file(*path));
}

std::vector<std::string> validate_config(const PipelineConfig& c) {
  std::vector<std::string> errors;
  const auto err = [&](const std::string& m) { errors.push_back(m); };
  if (c.arch.hidden.empty()) err("arch.hidden must have at least one layer");
  if (c.arch.input_dim != 8) err("arch.input_dim must equal the 8-dim state");
  if (c.arch.action_dim != 2) err("arch.action_dim must be 2");
  if (c.codec.num_chunks < 1 ||
      c.codec.num_chunks > static_cast<int>(c.arch.hidden.size()) + 1) {
    err("codec.num_chunks must be in [1, layer count]");
  }
  if (c.codec.d_latent != c.denoiser.token_width) {
    err("codec.d_latent must equal the denoiser token width");
  }
  if (c.codec.num_chunks != c.denoiser.tokens) {
    err("codec.num_chunks must equal the denoiser token count");
  }
  if (2 * c.behavior.d_embed != c.denoiser.cond_dim) {
    err("denoiser condition dim must be 2 * behavior.d_embed");
  }
  if (c.denoiser.token_width % 4 != 0) {
    err("codec.d_latent must be divisible by 4 for the two U-Net downsamples");
  }
  for (int ch : c.denoiser.channels) {
    if (ch % c.denoiser.groups != 0) {
      err("diffusion.channels must be divisible by diffusion.groups");
    }
  }
  if (c.denoiser.channels.size() != 3) {
    err("diffusion.channels must list exactly three widths");
  }
  if (c.sampler.num_inference_steps < 1 ||
      c.sampler.num_inference_steps > c.denoiser.train_steps) {
    err("diffusion.num_inference_steps must be in [1, train_steps]");
  }
  if (c.trainer.population < c.trainer.elites || c.trainer.elites < 1) {
    err("trainer.population must be >= trainer.elites >= 1");
  }
  if (c.trainer.eval_seeds < 1) err("trainer.eval_seeds must be >= 1");
  if (c.eval.init_seeds < 1) err("eval.init_seeds must be >= 1");
  if (c.holdout_fraction <= 0.0f || c.holdout_fraction >= 1.0f) {
    err("holdout_fraction must be in (0, 1)");
  }
  const TaskSpec& any = task_registry().front();
  if (any.horizon < c.behavior.prefix_steps + c.behavior.post_states + 1) {
    err("task horizon too short for behavior prefix + post window");
  }
  if (c.generate.conditions > c.conditions_per_task) {
    err("generate.conditions exceeds conditions_per_task");
  }
  if (c.generate.condition_mode != "both" &&
      c.generate.condition_mode != "h-only" &&
      c.generate.condition_mode != "v-only") {
    err("generate.condition_mode must be both | h-only | v-only");
  }
  if (c.checkpoints_per_task < 2) err("checkpoints_per_task must be >= 2");
  if (c.seeds_per_task < 1) err("seeds_per_task must be >= 1");
  return errors;
}

RunLedger::RunLedger(fs::path out_dir) : dir_(std::move(out_dir)) {
  const fs::path path = dir_ / "ledger.json";
  if (fs::exists(path)) {
    data_ = read_json_file(path);
  } else {
    data_ = Json{{"stages", Json::object()}};
  }
}

void RunLedger::require(const std::string& stage,
                        const std::vector<std::string>& artifacts) const {
  for (const std::string& a : artifacts) {
    const fs::path path = dir_ / a;
    std::string recorded;
    for (const auto& [name, s] : data_.at("stages").items()) {
      if (s.at("outputs").contains(a)) {
        recorded = s.at("outputs").at(a).get<std::string>();
      }
    }
    if (recorded.empty()) {
      throw std::runtime_error(stage + ": missing upstream artifact '" + a +
                               "' (run its producing stage first)");
    }
    if (!fs::exists(path)) {
      throw std::runtime_error(stage + ": upstream artifact '" + a +
                               "' recorded but absent on disk");
    }
    if (file_hash(path) != recorded) {
      throw std::runtime_error(stage + ": hash mismatch on upstream artifact '" +
                               a + "'");
    }
  }
}

void RunLedger::record_stage(const std::string& stage,
                             const std::vector<std::string>& inputs,
                             const std::vector<std::string>& outputs,
                             double seconds) {
  Json in = Json::object();
  for (const std::string& a : inputs) in[a] = file_hash(dir_ / a);
  Json out = Json::object();
  for (const std::string& a : outputs) out[a] = file_hash(dir_ / a);
  data_["stages"][stage] = {{"inputs", std::move(in)},
                            {"outputs", std::move(out)},
                            {"seconds", seconds}};
  save();
}

bool RunLedger::has_stage(const std::string& stage) const {
  return data_.at("stages").contains(stage);
}

double RunLedger::stage_seconds(const std::string& stage) const {
  return data_.at("stages").at(stage).at("seconds").get<double>();
}

void RunLedger::save() const {
  write_json_file(dir_ / "ledger.json", data_);
}

CorpusSplit make_split(int count, float holdout_fraction, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "corpus-split"));
  rng.shuffle(idx);
  const int nh = std::max(1, static_cast<int>(std::floor(
                                 count * holdout_fraction)));
  CorpusSplit split;
  split.holdout_indices.assign(idx.begin(), idx.begin() + nh);
  split.train_indices.assign(idx.begin() + nh, idx.end());
  std::sort(split.holdout_indices.begin(), split.holdout_indices.end());
  std::sort(split.train_indices.begin(), split.train_indices.end());
  return split;
}

namespace {

void apply_condition_mode(Eigen::VectorXf& cond, const std::string& mode) {
  const long half = cond.size() / 2;
  if (mode == "h-only") {
    cond.tail(half).setZero();
  } else if (mode == "v-only") {
    cond.head(half).setZero();
  }
}

struct LoadedModels {
  ParamCodec codec;
  BehaviorEmbedder embedder;
  Denoiser denoiser;
};

LoadedModels load_models(const fs::path& out) {
  return LoadedModels{ParamCodec::load(out / "codec.pfw"),
                      BehaviorEmbedder::load(out / "embedder.pfw"),
                      Denoiser::load(out / "denoiser.pfw")};
}

}  // namespace

void run_gen_data(const PipelineConfig& cfg, const fs::path& out) {
  RunLedger ledger(out);
  const double t0 = now_seconds();
  BuildDatasetOptions opts;
  opts.arch = cfg.arch;
  opts.trainer = cfg.trainer;
  opts.seeds_per_task = cfg.seeds_per_task;
  opts.checkpoints_per_task = cfg.checkpoints_per_task;
  opts.conditions_per_task = cfg.conditions_per_task;
  opts.base_seed = cfg.seed;
  build_dataset(out, opts);
  ledger.record_stage("gen-data", {}, {"manifest.json"}, now_seconds() - t0);
}

void run_train_ae(const PipelineConfig& cfg, const fs::path& out) {
  RunLedger ledger(out);
  ledger.require("train-ae", {"manifest.json"});
  const double t0 = now_seconds();
  const DatasetManifest manifest = load_manifest(out / "manifest.json");

  std::vector<ParamVector> all(manifest.checkpoints.size());
  parallel_for(static_cast<int>(all.size()), [&](int i) {
    all[static_cast<std::size_t>(i)] =
        load_checkpoint(out / manifest.checkpoints[static_cast<std::size_t>(i)].path);
  });

  const CorpusSplit split =
      make_split(static_cast<int>(all.size()), cfg.holdout_fraction, cfg.seed);
  write_json_file(out / "split.json",
                  Json{{"train", split.train_indices},
                       {"holdout", split.holdout_indices}});

  std::vector<ParamVector> train;
  for (int i : split.train_indices) train.push_back(all[static_cast<std::size_t>(i)]);

  ParamCodec codec(manifest.arch, cfg.codec, derive_seed(cfg.seed, "stage-ae"));
  const CodecTrainResult result =
      train_codec(codec, train, derive_seed(cfg.seed, "stage-ae-train"));
  codec.save(out / "codec.pfw");

  std::vector<std::pair<std::string, ParamVector>> held;
  for (int i : split.holdout_indices) {
    held.emplace_back(manifest.checkpoints[static_cast<std::size_t>(i)].task,
                      all[static_cast<std::size_t>(i)]);
  }
  const FidelityReport fidelity =
      fidelity_report(codec, held, cfg.eval_seed_list());
  Json frep;
  frep["mean_retention"] = fidelity.mean_retention;
  frep["mean_recon_rel_error"] = fidelity.mean_recon_rel_error;
  frep["loss_curve"] = result.loss_curve;
  Json recs = Json::array();
  for (const auto& r : fidelity.records) {
    recs.push_back({{"task", r.task},
                    {"recon_mse", r.recon_mse},
                    {"original_rate", r.original_rate},
                    {"decoded_rate", r.decoded_rate},
                    {"retention", r.retention}});
  }
  frep["records"] = std::move(recs);
  write_json_file(out / "fidelity.json", frep);

  ledger.record_stage("train-ae", {"manifest.json"},
                      {"codec.pfw", "split.json", "fidelity.json"},
                      now_seconds() - t0);
}

void run_train_embed(const PipelineConfig& cfg, const fs::path& out) {
  RunLedger ledger(out);
  ledger.require("train-embed", {"manifest.json", "split.json"});
  const double t0 = now_seconds();
  const DatasetManifest manifest = load_manifest(out / "manifest.json");
  const Json split_json = read_json_file(out / "split.json");
  const auto train_idx = split_json.at("train").get<std::vector<int>>();
  const auto holdout_idx = split_json.at("holdout").get<std::vector<int>>();

  std::vector<Trajectory> deployments(manifest.checkpoints.size());
  parallel_for(static_cast<int>(deployments.size()), [&](int i) {
    deployments[static_cast<std::size_t>(i)] = load_trajectory(
        out / manifest.checkpoints[static_cast<std::size_t>(i)].deploy_path);
  });

  std::vector<Trajectory> train, held;
  for (int i : train_idx) train.push_back(deployments[static_cast<std::size_t>(i)]);
  for (int i : holdout_idx) held.push_back(deployments[static_cast<std::size_t>(i)]);

  BehaviorEmbedder embedder(cfg.behavior, derive_seed(cfg.seed, "stage-embed"));
  const EmbedTrainResult result =
      train_embedder(embedder, train, derive_seed(cfg.seed, "stage-embed-train"));
  embedder.save(out / "embedder.pfw");

  const float accuracy =
      retrieval_accuracy(embedder, held, cfg.behavior.batch_size,
                         /*num_batches=*/12, derive_seed(cfg.seed, "retrieval"));
  write_json_file(out / "retrieval.json",
                  Json{{"top1_accuracy", accuracy},
                       {"batch_size", cfg.behavior.batch_size},
                       {"num_batches", 12},
                       {"final_loss", result.loss_curve.back()},
                       {"loss_curve", result.loss_curve}});

  ledger.record_stage("train-embed", {"manifest.json", "split.json"},
                      {"embedder.pfw", "retrieval.json"}, now_seconds() - t0);
}

void run_train_diff(const PipelineConfig& cfg, const fs::path& out) {
  RunLedger ledger(out);
  ledger.require("train-diff", {"manifest.json", "split.json", "codec.pfw",
                                "embedder.pfw"});
  const double t0 = now_seconds();
  const DatasetManifest manifest = load_manifest(out / "manifest.json");
  const Json split_json = read_json_file(out / "split.json");
  const auto train_idx = split_json.at("train").get<std::vector<int>>();

  const ParamCodec codec = ParamCodec::load(out / "codec.pfw");
  const BehaviorEmbedder embedder = BehaviorEmbedder::load(out / "embedder.pfw");

  std::vector<Tensor> latents(train_idx.size());
  std::vector<Eigen::VectorXf> conds(train_idx.size());
  parallel_for(static_cast<int>(train_idx.size()), [&](int k) {
    const auto& rec = manifest.checkpoints[static_cast<std::size_t>(
        train_idx[static_cast<std::size_t>(k)])];
    const ParamVector params = load_checkpoint(out / rec.path);
    latents[static_cast<std::size_t>(k)] = codec.encode(params);
    Eigen::VectorXf cond =
        embedder.embed_trajectory(load_trajectory(out / rec.deploy_path))
            .condition;
    apply_condition_mode(cond, cfg.generate.condition_mode);
    conds[static_cast<std::size_t>(k)] = std::move(cond);
  });

  Denoiser denoiser(cfg.denoiser, derive_seed(cfg.seed, "stage-diff"));
  const NoiseSchedule schedule(cfg.denoiser.train_steps);
  const DiffusionTrainResult result = train_diffusion(
      denoiser, schedule, latents, conds, derive_seed(cfg.seed, "stage-diff-train"));
  denoiser.save(out / "denoiser.pfw");
  write_json_file(out / "diffusion_loss.json",
                  Json{{"loss_curve", result.loss_curve}});

  ledger.record_stage(
      "train-diff", {"manifest.json", "split.json", "codec.pfw", "embedder.pfw"},
      {"denoiser.pfw", "diffusion_loss.json"}, now_seconds() - t0);
}

void run_generate(const PipelineConfig& cfg, const fs::path& out) {
  RunLedger ledger(out);
  ledger.require("generate", {"manifest.json", "codec.pfw", "embedder.pfw",
                              "denoiser.pfw"});
  const double t0 = now_seconds();
  const DatasetManifest manifest = load_manifest(out / "manifest.json");
  const LoadedModels models = load_models(out);
  const NoiseSchedule schedule(models.denoiser.config().train_steps);
  const fs::path cache_dir = out / "embed-cache";

  Json gen_manifest;
  gen_manifest["condition_mode"] = cfg.generate.condition_mode;
  Json tasks = Json::object();

  std::vector<std::string> all_tasks = manifest.seen_tasks;
  all_tasks.insert(all_tasks.end(), manifest.unseen_tasks.begin(),
                   manifest.unseen_tasks.end());

  for (const std::string& task_id : all_tasks) {
    std::vector<Trajectory> conditions;
    Json sources = Json::array();
    for (const auto& c : manifest.conditions) {
      if (c.task != task_id) continue;
      conditions.push_back(load_trajectory(out / c.path));
      sources.push_back(c.path);
      if (static_cast<int>(conditions.size()) >= cfg.generate.conditions) break;
    }
    if (conditions.empty()) continue;

    const auto embed_all = [&](const std::vector<Trajectory>& trajs) {
      std::vector<Eigen::VectorXf> cs(trajs.size());
      parallel_for(static_cast<int>(trajs.size()), [&](int i) {
        Eigen::VectorXf cond = cached_condition(
            models.embedder, trajs[static_cast<std::size_t>(i)], cache_dir);
        apply_condition_mode(cond, cfg.generate.condition_mode);
        cs[static_cast<std::size_t>(i)] = std::move(cond);
      });
      return cs;
    };

    const auto sample_suite = [&](const std::vector<Eigen::VectorXf>& cs,
                                  const std::string& suite, int seeds_per_cond,
                                  std::uint64_t salt) {
      Json paths = Json::array();
      const int total = static_cast<int>(cs.size()) * seeds_per_cond;
      std::vector<ParamVector> generated(static_cast<std::size_t>(total));
      parallel_for(total, [&](int k) {
        const int ci = k / seeds_per_cond;
        const int si = k % seeds_per_cond;
        const std::uint64_t noise_seed =
            derive_seed(cfg.seed ^ salt, task_id + "/" + suite,
                        static_cast<std::uint64_t>(k));
        const Tensor tokens =
            ddim_sample(cs[static_cast<std::size_t>(ci)], models.denoiser,
                        schedule, cfg.sampler, noise_seed);
        generated[static_cast<std::size_t>(k)] = models.codec.decode(tokens);
        (void)si;
      });
      for (int k = 0; k < total; ++k) {
        const fs::path rel = fs::path("generated") / task_id /
                             (suite + "_" + std::to_string(k) + ".maa");
        save_checkpoint(out / rel, generated[static_cast<std::size_t>(k)]);
        paths.push_back(rel.generic_string());
      }
      return paths;
    };

    Json entry;
    entry["condition_sources"] = std::move(sources);
    const auto clean_conds = embed_all(conditions);
    entry["clean"] = sample_suite(clean_conds, "clean",
                                  cfg.generate.seeds_per_condition, 0x11);
    const auto noisy_trajs = noisy_condition_suite(
        conditions, cfg.eval.condition_noise_sigma,
        derive_seed(cfg.seed, "noisy-suite", fnv1a64(task_id)));
    entry["noisy"] = sample_suite(embed_all(noisy_trajs), "noisy",
                                  cfg.generate.seeds_per_condition, 0x22);
    const std::vector<Eigen::VectorXf> one_cond = {clean_conds.front()};
    entry["diversity"] =
        sample_suite(one_cond, "div", cfg.eval.diversity_seeds, 0x33);
    tasks[task_id] = std::move(entry);
  }
  gen_manifest["tasks"] = std::move(tasks);
  write_json_file(out / "generation.json", gen_manifest);
  ledger.record_stage("generate",
                      {"manifest.json", "codec.pfw", "embedder.pfw",
                       "denoiser.pfw"},
                      {"generation.json"}, now_seconds() - t0);
}

void run_eval(const PipelineConfig& cfg, const fs::path& out) {
  RunLedger ledger(out);
  ledger.require("eval", {"manifest.json", "generation.json"});
  const double t0 = now_seconds();
  const DatasetManifest manifest = load_manifest(out / "manifest.json");
  const Json gen = read_json_file(out / "generation.json");
  const std::vector<std::uint64_t> eval_seeds = cfg.eval_seed_list();

  const auto load_set = [&](const Json& paths) {
    std::vector<ParamVector> ps;
    for (const auto& p : paths) {
      ps.push_back(load_checkpoint(out / p.get<std::string>()));
    }
    return ps;
  };

  const auto report_json = [&](const EvalReport& r) {
    Json j;
    j["success_rates"] = r.success_rates;
    j["qualified_rate"] = r.qualified_rate;
    Json tk = Json::object();
    for (const auto& [k, v] : r.topk_mean) tk[std::to_string(k)] = v;
    j["topk_mean"] = std::move(tk);
    return j;
  };

  Json evaluation;
  Json tasks = Json::object();
  for (const auto& [task_id, entry] : gen.at("tasks").items()) {
    const TaskSpec& task = find_task(task_id);
    Json tj;
    tj["split"] = task.seen ? "seen" : "unseen";

    const std::vector<ParamVector> clean = load_set(entry.at("clean"));
    const EvalReport clean_rep =
        evaluate_policies(clean, task, eval_seeds, cfg.eval.topk);
    tj["clean"] = report_json(clean_rep);

    const std::vector<ParamVector> noisy = load_set(entry.at("noisy"));
    tj["noisy"] = report_json(
        evaluate_policies(noisy, task, eval_seeds, cfg.eval.topk));

    const std::vector<ParamVector> divs = load_set(entry.at("diversity"));
    if (divs.size() >= 2) {
      const Eigen::MatrixXf self_sim = similarity_matrix(divs, divs);
      double acc = 0.0;
      int count = 0;
      for (long i = 0; i < self_sim.rows(); ++i) {
        for (long j = i + 1; j < self_sim.cols(); ++j) {
          acc += self_sim(i, j);
          ++count;
        }
      }
      tj["diversity"] = {{"mean_pairwise_cosine", acc / count},
                         {"num_seeds", static_cast<int>(divs.size())}};
      write_similarity_csv(out / "eval" / (task_id + "_diversity.csv"),
                           self_sim);
    }

    // generated-vs-source similarity against this task's corpus checkpoints
    std::vector<ParamVector> sources;
    for (const auto& c : manifest.checkpoints) {
      if (c.task != task_id) continue;
      sources.push_back(load_checkpoint(out / c.path));
      if (sources.size() >= 50) break;
    }
    if (!sources.empty()) {
      const Eigen::MatrixXf sim = similarity_matrix(clean, sources);
      std::vector<float> flat(sim.data(), sim.data() + sim.size());
      std::nth_element(flat.begin(), flat.begin() + flat.size() / 2, flat.end());
      tj["source_similarity"] = {
          {"median", flat[flat.size() / 2]},
          {"fraction_below_02",
           static_cast<double>(std::count_if(flat.begin(), flat.end(),
                                             [](float v) { return v < 0.2f; })) /
               static_cast<double>(flat.size())}};
      write_similarity_csv(out / "eval" / (task_id + "_source_similarity.csv"),
                           sim);
    }

    // trajectory difference: best clean policy vs its condition, fixed init
    if (!clean.empty()) {
      int best = 0;
      for (std::size_t i = 1; i < clean_rep.success_rates.size(); ++i) {
        if (clean_rep.success_rates[i] > clean_rep.success_rates[best]) {
          best = static_cast<int>(i);
        }
      }
      const int ci = best / cfg.generate.seeds_per_condition;
      const Trajectory cond_traj = load_trajectory(
          out / entry.at("condition_sources")[static_cast<std::size_t>(ci)]
                    .get<std::string>());
      const Trajectory deployed = rollout(
          clean[static_cast<std::size_t>(best)], task, manifest.fixed_init_seed);
      const TrajectoryDifference diff = trajectory_difference(
          cond_traj, deployed, out / "eval" / "dumps" / (task_id + ".csv"));
      tj["trajectory_difference"] = {
          {"mean_step_distance", diff.mean_step_distance},
          {"endpoint_distance", diff.endpoint_distance},
          {"rows", diff.rows}};
    }
    tasks[task_id] = std::move(tj);
  }
  evaluation["tasks"] = std::move(tasks);
  write_json_file(out / "evaluation.json", evaluation);
  ledger.record_stage("eval", {"manifest.json", "generation.json"},
                      {"evaluation.json"}, now_seconds() - t0);
}

void run_report(const PipelineConfig& cfg, const fs::path& out) {
  RunLedger ledger(out);
  ledger.require("report", {"evaluation.json"});
  const double t0 = now_seconds();
  const Json evaluation = read_json_file(out / "evaluation.json");

  Json summary;
  double seen_top5 = 0.0, seen_top5_noisy = 0.0;
  int seen_count = 0, seen_qualified_tasks = 0;
  Json per_task = Json::object();
  for (const auto& [task_id, tj] : evaluation.at("tasks").items()) {
    Json row;
    row["split"] = tj.at("split");
    row["top5_clean"] = tj.at("clean").at("topk_mean").value("5", 0.0f);
    row["top5_noisy"] = tj.at("noisy").at("topk_mean").value("5", 0.0f);
    row["top10_clean"] = tj.at("clean").at("topk_mean").value("10", 0.0f);
    row["qualified_rate"] = tj.at("clean").at("qualified_rate");
    if (tj.contains("diversity")) {
      row["diversity_mean_pairwise"] =
          tj.at("diversity").at("mean_pairwise_cosine");
    }
    if (tj.contains("source_similarity")) {
      row["source_similarity_median"] = tj.at("source_similarity").at("median");
    }
    per_task[task_id] = row;
    if (tj.at("split") == "seen") {
      seen_top5 += row["top5_clean"].get<double>();
      seen_top5_noisy += row["top5_noisy"].get<double>();
      ++seen_count;
      if (tj.at("clean").at("qualified_rate").get<double>() > 0.0) {
        ++seen_qualified_tasks;
      }
    }
  }
  summary["per_task"] = std::move(per_task);
  summary["seen_top5_mean"] = seen_count ? seen_top5 / seen_count : 0.0;
  summary["seen_top5_noisy_mean"] =
      seen_count ? seen_top5_noisy / seen_count : 0.0;
  summary["seen_tasks_with_qualified"] = seen_qualified_tasks;
  summary["seen_task_count"] = seen_count;

  RunLedger const_ledger(out);
  Json stage_seconds = Json::object();
  for (const char* s : {"gen-data", "train-ae", "train-embed", "train-diff",
                        "generate", "eval"}) {
    if (const_ledger.has_stage(s)) stage_seconds[s] = const_ledger.stage_seconds(s);
  }
  summary["stage_seconds"] = std::move(stage_seconds);
  write_json_file(out / "summary.json", summary);

  // flat CSV of the per-task rows
  std::ofstream csv(out / "summary.csv", std::ios::trunc);
  csv << "task,split,top5_clean,top5_noisy,top10_clean,qualified_rate\n";
  for (const auto& [task_id, row] : summary.at("per_task").items()) {
    csv << task_id << ',' << row.at("split").get<std::string>() << ','
        << row.at("top5_clean").get<double>() << ','
        << row.at("top5_noisy").get<double>() << ','
        << row.at("top10_clean").get<double>() << ','
        << row.at("qualified_rate").get<double>() << '\n';
  }
  csv.close();
  ledger.record_stage("report", {"evaluation.json"},
                      {"summary.json", "summary.csv"}, now_seconds() - t0);
  (void)cfg;
}

void run_all(const PipelineConfig& cfg, const fs::path& out) {
  run_gen_data(cfg, out);
  run_train_ae(cfg, out);
  run_train_embed(cfg, out);
  run_train_diff(cfg, out);
  run_generate(cfg, out);
  run_eval(cfg, out);
  run_report(cfg, out);
}

}  // namespace policyforge
