#ifndef POLICYFORGE_PARAMCODEC_PARAMCODEC_HPP_
#define POLICYFORGE_PARAMCODEC_PARAMCODEC_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "policyforge/numeric/graph.hpp"
#include "policyforge/numeric/optim.hpp"
#include "policyforge/numeric/rng.hpp"
#include "policyforge/policy/policy.hpp"

namespace policyforge {

// Per-layer chunking of a flat parameter vector. Chunks are contiguous layer
// groups; the output (mean/log-std) layer always folds into the last chunk,
// and every chunk is zero-padded to the widest slice.
struct ChunkLayout {
  int num_chunks = 0;
  int padded_width = 0;
  std::vector<std::pair<long, long>> slices;  // [begin, end) per chunk

  long valid_width(int chunk) const {
    return slices[static_cast<std::size_t>(chunk)].second -
           slices[static_cast<std::size_t>(chunk)].first;
  }
  long total_params() const { return slices.empty() ? 0 : slices.back().second; }
};

ChunkLayout make_layout(const PolicyArch& arch, int num_chunks);

// [num_chunks, padded_width] zero-padded chunk matrix; exact inverse pair.
Tensor chunk_params(const ParamVector& x, const ChunkLayout& layout);
ParamVector reassemble_params(const Tensor& chunks, const ChunkLayout& layout,
                              const PolicyArch& arch);

struct CodecConfig {
  int num_chunks = 2;
  int d_latent = 256;
  int hidden = 512;
  float input_noise_factor = 1e-4f;   // on the parameter chunks
  float latent_noise_factor = 1e-3f;  // on the tokens before decoding
  // training
  int batch_size = 32;
  float lr = 1e-3f;
  float weight_decay = 5e-3f;
  int epochs = 500;
  int lr_restart_period = 100;
  int shards = 4;
};

// Shared-weight per-chunk MLP autoencoder (depth-1 encoder and decoder) with
// learned chunk-index embeddings added to the inputs of both halves.
class ParamCodec {
 public:
  ParamCodec(const PolicyArch& arch, const CodecConfig& cfg, std::uint64_t seed);

  const ChunkLayout& layout() const { return layout_; }
  const CodecConfig& config() const { return cfg_; }
  const PolicyArch& arch() const { return arch_; }
  ParamSet& weights() { return params_; }
  const ParamSet& weights() const { return params_; }

  // tokens [num_chunks, d_latent]; deterministic when noise is off
  Tensor encode(const ParamVector& x, bool noise_on = false,
                Rng* rng = nullptr) const;
  ParamVector decode(const Tensor& tokens, bool noise_on = false,
                     Rng* rng = nullptr) const;

  // batched inference encode used by the diffusion stage
  std::vector<Tensor> encode_batch(const std::vector<ParamVector>& xs) const;

  // validity mask, [num_chunks, padded_width]
  const Tensor& masks() const { return masks_; }

  void save(const std::filesystem::path& path) const;
  static ParamCodec load(const std::filesystem::path& path);

 private:
  PolicyArch arch_;
  CodecConfig cfg_;
  ChunkLayout layout_;
  ParamSet params_;
  Tensor masks_;  // [num_chunks, padded_width] validity mask
};

struct CodecTrainResult {
  std::vector<float> loss_curve;  // one entry per epoch
};

// Minimizes the masked reconstruction MSE with both noise injections active.
CodecTrainResult train_codec(ParamCodec& codec,
                             const std::vector<ParamVector>& corpus,
                             std::uint64_t seed);

struct FidelityRecord {
  std::string task;
  float recon_mse = 0.0f;
  float original_rate = 0.0f;
  float decoded_rate = 0.0f;
  float retention = 0.0f;
};

struct FidelityReport {
  std::vector<FidelityRecord> records;
  float mean_retention = 0.0f;
  float mean_recon_rel_error = 0.0f;
};

// Behavioral retention of decoded policies against their originals over the
// given per-task evaluation seeds.
FidelityReport fidelity_report(
    const ParamCodec& codec,
    const std::vector<std::pair<std::string, ParamVector>>& held_out,
    const std::vector<std::uint64_t>& eval_seeds);

}  // namespace policyforge

#endif  // POLICYFORGE_PARAMCODEC_PARAMCODEC_HPP_
