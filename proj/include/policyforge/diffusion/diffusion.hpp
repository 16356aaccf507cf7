#ifndef POLICYFORGE_DIFFUSION_DIFFUSION_HPP_
#define POLICYFORGE_DIFFUSION_DIFFUSION_HPP_

#include <cstdint>
#include <filesystem>
#include <vector>

#include "policyforge/behavior/behavior.hpp"
#include "policyforge/numeric/graph.hpp"
#include "policyforge/numeric/optim.hpp"
#include "policyforge/numeric/rng.hpp"
#include "policyforge/paramcodec/paramcodec.hpp"

namespace policyforge {

// Squared-cosine noise schedule. Index convention: step t in [1, T];
// alpha_bar(0) == 1 by definition, alpha_bar is strictly decreasing in t.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int num_steps);

  int num_steps() const { return t_; }
  float beta(int t) const { return betas_.at(static_cast<std::size_t>(t - 1)); }
  float alpha_bar(int t) const {
    if (t == 0) return 1.0f;
    return alpha_bars_.at(static_cast<std::size_t>(t - 1));
  }

 private:
  int t_;
  std::vector<float> betas_;
  std::vector<float> alpha_bars_;
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps,
                     const NoiseSchedule& schedule);

struct DenoiserConfig {
  int tokens = 2;        // m_c, input channels
  int token_width = 256; // d_latent, convolution axis
  int cond_dim = 256;    // behavior condition length
  int time_embed_dim = 128;
  std::vector<int> channels = {24, 32, 48};
  int groups = 8;
  int train_steps = 1000;  // T
  // training
  int batch_size = 128;
  float lr = 2e-4f;
  float beta1 = 0.95f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 5e-4f;
  int epochs = 240;
  int lr_warmup_steps = 500;
  int shards = 4;
};

struct SamplerConfig {
  int num_inference_steps = 10;  // S
  float eta = 0.0f;              // 0 keeps DDIM fully deterministic
};

// 1D convolutional U-Net denoiser: input projection, two stride-2 down
// blocks, a middle block and two upsample blocks, all residual with group
// norm + silu. The timestep embedding and the behavior condition merge into a
// per-block feature-wise modulation.
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }
  ParamSet& weights() { return params_; }
  const ParamSet& weights() const { return params_; }

  // predicted noise for a batch: z_t [B, tokens, width], t per sample,
  // cond [B, cond_dim]
  Tensor predict(const Tensor& z_t, const std::vector<int>& t,
                 const Tensor& cond) const;

  // single-sample convenience, z_t [tokens, width]
  Tensor predict_one(const Tensor& z_t, int t, const Eigen::VectorXf& cond) const;

  // latent standardization fitted at training time
  void set_latent_stats(float mean, float std);
  float latent_mean() const { return latent_mean_; }
  float latent_std() const { return latent_std_; }

  void save(const std::filesystem::path& path) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  friend struct DenoiserTrainer;
  DenoiserConfig cfg_;
  ParamSet params_;
  float latent_mean_ = 0.0f;
  float latent_std_ = 1.0f;
};

struct DiffusionTrainResult {
  std::vector<float> loss_curve;
};

// Standardizes the latents, then minimizes ||eps - eps_theta(z_t, cond, t)||^2
// with t uniform over {1..T}. Codec and embedder stay frozen upstream.
DiffusionTrainResult train_diffusion(Denoiser& denoiser,
                                     const NoiseSchedule& schedule,
                                     const std::vector<Tensor>& latents,
                                     const std::vector<Eigen::VectorXf>& conds,
                                     std::uint64_t seed);

// Deterministic DDIM sampling (eta = 0) over an evenly spaced step
// subsequence; returns tokens in the original (de-standardized) latent scale.
Tensor ddim_sample(const Eigen::VectorXf& cond, const Denoiser& denoiser,
                   const NoiseSchedule& schedule, const SamplerConfig& sampler,
                   std::uint64_t noise_seed);

// Oracle-driven DDIM: replaces the network with a fixed noise prediction;
// test hook for the closed-form inversion property.
Tensor ddim_sample_with_oracle(
    const Tensor& z_start, const NoiseSchedule& schedule,
    const SamplerConfig& sampler,
    const std::function<Tensor(const Tensor&, int)>& predict);

// embed -> ddim_sample -> decode (noise off); one policy per (condition, seed)
std::vector<ParamVector> generate_policies(
    const std::vector<Trajectory>& conditions, const ParamCodec& codec,
    const BehaviorEmbedder& embedder, const Denoiser& denoiser,
    const NoiseSchedule& schedule, const SamplerConfig& sampler,
    const std::vector<std::uint64_t>& noise_seeds);

}  // namespace policyforge

#endif  // POLICYFORGE_DIFFUSION_DIFFUSION_HPP_
