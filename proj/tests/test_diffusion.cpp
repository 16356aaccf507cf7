#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "policyforge/diffusion/diffusion.hpp"
#include "policyforge/numeric/rng.hpp"

using namespace policyforge;

namespace {

Tensor randn(std::vector<int> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::uninit(std::move(shape));
  for (Eigen::Index i = 0; i < t.size(); ++i) t.mut()[i] = rng.normalf();
  return t;
}

DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.tokens = 2;
  cfg.token_width = 32;
  cfg.cond_dim = 16;
  cfg.time_embed_dim = 32;
  cfg.channels = {8, 8, 16};
  cfg.groups = 4;
  cfg.train_steps = 100;
  return cfg;
}

}  // namespace

TEST_CASE("schedule: betas in (0,1), alpha_bar strictly decreasing") {
  const NoiseSchedule s(1000);
  CHECK(s.alpha_bar(0) == 1.0f);
  CHECK(s.alpha_bar(1) == doctest::Approx(1.0f - s.beta(1)));
  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.beta(t) > 0.0f);
    CHECK(s.beta(t) < 1.0f);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
}

TEST_CASE("forward_noise closed forms") {
  const NoiseSchedule s(1000);
  // find a step with alpha_bar near 0.25 and verify z_t = 0.5 z0 at eps = 0
  int t_quarter = 1;
  for (int t = 1; t <= 1000; ++t) {
    if (std::abs(s.alpha_bar(t) - 0.25f) <
        std::abs(s.alpha_bar(t_quarter) - 0.25f)) {
      t_quarter = t;
    }
  }
  const Tensor z0 = randn({2, 16}, 3);
  const Tensor zero = Tensor::zeros({2, 16});
  const Tensor zt = forward_noise(z0, t_quarter, zero, s);
  const float sa = std::sqrt(s.alpha_bar(t_quarter));
  for (Eigen::Index i = 0; i < z0.size(); ++i) {
    CHECK(zt[i] == doctest::Approx(sa * z0[i]));
  }
  // z0 = 0 gives sqrt(1-ab) * eps
  const Tensor eps = randn({2, 16}, 4);
  const Tensor zt2 = forward_noise(zero, 500, eps, s);
  const float sb = std::sqrt(1.0f - s.alpha_bar(500));
  for (Eigen::Index i = 0; i < eps.size(); ++i) {
    CHECK(zt2[i] == doctest::Approx(sb * eps[i]));
  }
  CHECK_THROWS_AS(forward_noise(z0, 0, zero, s), std::invalid_argument);
  CHECK_THROWS_AS(forward_noise(z0, 1001, zero, s), std::invalid_argument);
  CHECK_THROWS_AS(forward_noise(z0, 5, Tensor::zeros({2, 8}), s),
                  std::invalid_argument);
}

TEST_CASE("forward_noise marginals match the closed form over 1e4 draws") {
  const NoiseSchedule s(1000);
  const int t = 400;
  const int dim = 64;
  const Tensor z0 = randn({1, dim}, 9);
  const int draws = 10000;
  Rng rng(derive_seed(123, "mc"));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  double var_acc = 0.0;
  const float sa = std::sqrt(s.alpha_bar(t));
  for (int d = 0; d < draws; ++d) {
    Tensor eps = Tensor::uninit({1, dim});
    for (int i = 0; i < dim; ++i) eps.mut()[i] = rng.normalf();
    const Tensor zt = forward_noise(z0, t, eps, s);
    for (int i = 0; i < dim; ++i) {
      const double dev = zt[i] - sa * z0[i];
      mean[i] += dev;
      var_acc += dev * dev;
    }
  }
  mean /= draws;
  // pooled mean deviation: expectation 0, se = sqrt(v / (draws*dim))
  const double v = 1.0 - s.alpha_bar(t);
  const double pooled_mean = mean.sum() / dim;
  const double se_mean = std::sqrt(v / (static_cast<double>(draws) * dim));
  CHECK(std::abs(pooled_mean) < 3.0 * se_mean);
  // pooled variance vs 1 - alpha_bar, se ~ v * sqrt(2/(N-1))
  const double sample_var = var_acc / (static_cast<double>(draws) * dim);
  const double se_var =
      v * std::sqrt(2.0 / (static_cast<double>(draws) * dim - 1));
  CHECK(std::abs(sample_var - v) < 3.0 * se_var);
}

TEST_CASE("DDIM with a perfect noise oracle recovers z0") {
  const NoiseSchedule s(1000);
  const Tensor z0 = randn({2, 32}, 21);
  const Tensor eps = randn({2, 32}, 22);
  const Tensor z_t = forward_noise(z0, 1000, eps, s);
  SamplerConfig sampler;
  sampler.num_inference_steps = 1000;  // S = T
  const Tensor rec = ddim_sample_with_oracle(
      z_t, s, sampler, [&](const Tensor&, int) { return eps; });
  const float rel = std::sqrt((rec.flat() - z0.flat()).square().sum() /
                              z0.flat().square().sum());
  CHECK(rel < 1e-4f);
}

TEST_CASE("denoiser output matches input shape and is deterministic") {
  Denoiser d(tiny_config(), 7);
  const Tensor z = randn({3, 2, 32}, 17);
  const Tensor cond = randn({3, 16}, 18);
  const std::vector<int> ts = {1, 50, 100};
  const Tensor a = d.predict(z, ts, cond);
  const Tensor b = d.predict(z, ts, cond);
  REQUIRE(a.shape() == z.shape());
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("untrained denoiser predicts zero, so initial loss is about 1") {
  Denoiser d(tiny_config(), 3);
  const Tensor z = randn({2, 2, 32}, 31);
  const Tensor cond = randn({2, 16}, 32);
  const Tensor out = d.predict(z, {10, 90}, cond);
  CHECK(out.flat().abs().maxCoeff() == 0.0f);
  // with eps ~ N(0,1) targets, MSE of the zero predictor is E[eps^2] = 1
}

TEST_CASE("denoiser weights roundtrip through the file format") {
  const auto dir = std::filesystem::temp_directory_path() / "pf_diff_test";
  std::filesystem::create_directories(dir);
  Denoiser d(tiny_config(), 5);
  // give it nonzero output weights so the check is meaningful
  auto& w = d.weights().values[d.weights().index_of("out_w")];
  Rng rng(1);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.mut()[i] = rng.normalf() * 0.1f;
  d.set_latent_stats(0.25f, 1.5f);
  d.save(dir / "denoiser.pfw");
  const Denoiser loaded = Denoiser::load(dir / "denoiser.pfw");
  CHECK(loaded.latent_mean() == 0.25f);
  CHECK(loaded.latent_std() == 1.5f);
  const Tensor z = randn({1, 2, 32}, 51);
  const Tensor cond = randn({1, 16}, 52);
  const Tensor a = d.predict(z, {42}, cond);
  const Tensor b = loaded.predict(z, {42}, cond);
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training reduces loss and sampling is deterministic per seed") {
  DenoiserConfig cfg = tiny_config();
  cfg.epochs = 30;
  cfg.batch_size = 16;
  cfg.lr = 1e-3f;
  cfg.lr_warmup_steps = 10;
  cfg.train_steps = 100;
  Denoiser d(cfg, 11);
  const NoiseSchedule schedule(cfg.train_steps);

  // tight Gaussian blob of latents, a fixed condition
  Rng rng(77);
  std::vector<Tensor> latents;
  std::vector<Eigen::VectorXf> conds;
  Tensor mu = randn({2, 32}, 99);
  for (int i = 0; i < 64; ++i) {
    Tensor z = Tensor::uninit({2, 32});
    z.mut() = mu.flat() + 0.1f * randn({2, 32}, 500 + i).flat();
    latents.push_back(std::move(z));
    Eigen::VectorXf c = Eigen::VectorXf::Zero(16);
    conds.push_back(c);
  }
  const DiffusionTrainResult r = train_diffusion(d, schedule, latents, conds, 13);
  REQUIRE(r.loss_curve.size() == 30);
  CHECK(r.loss_curve.front() == doctest::Approx(1.0).epsilon(0.15));
  CHECK(r.loss_curve.back() < r.loss_curve.front());

  SamplerConfig sampler;
  sampler.num_inference_steps = 10;
  const Eigen::VectorXf c0 = Eigen::VectorXf::Zero(16);
  const Tensor s1 = ddim_sample(c0, d, schedule, sampler, 1234);
  const Tensor s2 = ddim_sample(c0, d, schedule, sampler, 1234);
  for (Eigen::Index i = 0; i < s1.size(); ++i) CHECK(s1[i] == s2[i]);
  const Tensor s3 = ddim_sample(c0, d, schedule, sampler, 999);
  CHECK((s1.flat() - s3.flat()).abs().maxCoeff() > 0.0f);
}

TEST_CASE("t is sampled uniformly over {1..T}") {
  // histogram over many draws from the training-path draw rule
  Rng rng(derive_seed(42, "diff-noise"));
  const int t_max = 100;
  std::vector<int> counts(static_cast<std::size_t>(t_max), 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const int t = 1 + static_cast<int>(rng.uniform_int(t_max));
    counts[static_cast<std::size_t>(t - 1)]++;
  }
  const double expected = static_cast<double>(draws) / t_max;
  for (int t = 0; t < t_max; ++t) {
    CHECK(std::abs(counts[static_cast<std::size_t>(t)] - expected) <
          5.0 * std::sqrt(expected));
  }
}

TEST_CASE("sampler rejects S > T") {
  const NoiseSchedule s(50);
  Denoiser d(tiny_config(), 1);
  SamplerConfig sampler;
  sampler.num_inference_steps = 51;
  CHECK_THROWS_AS(
      ddim_sample(Eigen::VectorXf::Zero(16), d, s, sampler, 1),
      std::invalid_argument);
}
