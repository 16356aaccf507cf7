#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "policyforge/pipeline/pipeline.hpp"

using namespace policyforge;

TEST_CASE("default config validates") {
  const PipelineConfig cfg = default_config();
  const auto errors = validate_config(cfg);
  for (const auto& e : errors) MESSAGE(e);
  CHECK(errors.empty());
}

TEST_CASE("dimensional mismatches are itemized before compute starts") {
  PipelineConfig cfg = default_config();
  cfg.codec.d_latent = 128;  // no longer matches denoiser token width
  cfg.behavior.d_embed = 64;
  cfg.sampler.num_inference_steps = 5000;
  const auto errors = validate_config(cfg);
  CHECK(errors.size() >= 3);
}

TEST_CASE("config json roundtrip keeps derived dims consistent") {
  PipelineConfig cfg = default_config();
  cfg.codec.d_latent = 128;
  cfg.behavior.d_embed = 64;
  const PipelineConfig back = config_from_json(config_to_json(cfg));
  CHECK(back.codec.d_latent == 128);
  CHECK(back.denoiser.token_width == 128);
  CHECK(back.denoiser.cond_dim == 128);
  CHECK(validate_config(back).empty());
}

TEST_CASE("config file overrides only the provided keys") {
  const Json patch = {{"seed", 7}, {"codec", {{"epochs", 12}}}};
  const PipelineConfig cfg = config_from_json(patch);
  CHECK(cfg.seed == 7);
  CHECK(cfg.codec.epochs == 12);
  CHECK(cfg.codec.d_latent == default_config().codec.d_latent);
}

TEST_CASE("split is deterministic and partitions the corpus") {
  const CorpusSplit a = make_split(100, 0.1f, 5);
  const CorpusSplit b = make_split(100, 0.1f, 5);
  CHECK(a.train_indices == b.train_indices);
  CHECK(a.holdout_indices == b.holdout_indices);
  CHECK(a.train_indices.size() + a.holdout_indices.size() == 100);
  CHECK(a.holdout_indices.size() == 10);
  std::vector<bool> seen(100, false);
  for (int i : a.train_indices) seen[static_cast<std::size_t>(i)] = true;
  for (int i : a.holdout_indices) {
    CHECK_FALSE(seen[static_cast<std::size_t>(i)]);
    seen[static_cast<std::size_t>(i)] = true;
  }
  const CorpusSplit c = make_split(100, 0.1f, 6);
  CHECK(a.holdout_indices != c.holdout_indices);
}

TEST_CASE("running a stage before its upstream is a ledger error") {
  const auto dir = std::filesystem::temp_directory_path() / "pf_ledger_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const PipelineConfig cfg = default_config();
  CHECK_THROWS_WITH_AS(run_train_ae(cfg, dir),
                       doctest::Contains("missing upstream artifact"),
                       std::runtime_error);
  CHECK_THROWS_AS(run_generate(cfg, dir), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ledger catches tampered upstream artifacts") {
  const auto dir = std::filesystem::temp_directory_path() / "pf_ledger_test2";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "manifest.json");
    f << "{}";
  }
  RunLedger ledger(dir);
  ledger.record_stage("gen-data", {}, {"manifest.json"}, 1.0);
  {
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    f << "{\"tampered\":true}";
  }
  RunLedger fresh(dir);
  CHECK_THROWS_WITH_AS(fresh.require("train-ae", {"manifest.json"}),
                       doctest::Contains("hash mismatch"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("generate_policies cardinality: K conditions x S seeds") {
  // untrained models suffice for the cardinality contract
  const PolicyArch arch{8, {16}, 2};
  CodecConfig ccfg;
  ccfg.num_chunks = 2;
  ccfg.d_latent = 16;
  ccfg.hidden = 32;
  ParamCodec codec(arch, ccfg, 1);
  {  // the output layer is zero-initialized; make decode non-degenerate
    auto& w = codec.weights().values[codec.weights().index_of("dec_w2")];
    Rng wrng(99);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.mut()[i] = wrng.normalf() * 0.05f;
  }
  BehaviorConfig bcfg;
  bcfg.d_embed = 8;
  bcfg.hidden = 16;
  BehaviorEmbedder embedder(bcfg, 2);
  DenoiserConfig dcfg;
  dcfg.tokens = 2;
  dcfg.token_width = 16;
  dcfg.cond_dim = 16;
  dcfg.time_embed_dim = 16;
  dcfg.channels = {8, 8, 8};
  dcfg.groups = 4;
  dcfg.train_steps = 50;
  Denoiser denoiser(dcfg, 3);
  const NoiseSchedule schedule(50);
  SamplerConfig sampler;
  sampler.num_inference_steps = 5;

  std::vector<Trajectory> conditions;
  for (int c = 0; c < 3; ++c) {
    Trajectory t;
    t.task_id = "plain";
    Rng rng(c);
    for (int i = 0; i <= 40; ++i) {
      Eigen::Matrix<float, 8, 1> s;
      for (int j = 0; j < 8; ++j) s[j] = rng.normalf();
      t.states.push_back(s);
    }
    for (int i = 0; i < 40; ++i) {
      t.actions.push_back(Eigen::Vector2f::Zero());
      t.success.push_back(0);
    }
    conditions.push_back(std::move(t));
  }
  const auto policies = generate_policies(conditions, codec, embedder, denoiser,
                                          schedule, sampler, {11, 22});
  CHECK(policies.size() == 6);
  for (const auto& p : policies) {
    CHECK(p.values.size() == param_count(arch));
  }

  // distinct noise seeds give distinct parameter vectors
  CHECK((policies[0].values - policies[1].values).norm() > 0.0f);

  // dimensional inconsistency between models is rejected
  BehaviorConfig bad = bcfg;
  bad.d_embed = 4;
  BehaviorEmbedder wrong(bad, 4);
  CHECK_THROWS_AS(generate_policies(conditions, codec, wrong, denoiser,
                                    schedule, sampler, {1}),
                  std::invalid_argument);
}
