#ifndef POLICYFORGE_POLICY_POLICY_HPP_
#define POLICYFORGE_POLICY_POLICY_HPP_

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <vector>

namespace policyforge {

// MLP policy shape. The output head emits [mean, log-std], i.e. 2*action_dim
// units; deployment is deterministic through tanh(mean).
struct PolicyArch {
  int input_dim = 8;
  std::vector<int> hidden = {32, 32};
  int action_dim = 2;

  int output_dim() const { return 2 * action_dim; }
  int num_layers() const { return static_cast<int>(hidden.size()) + 1; }
  bool operator==(const PolicyArch& o) const = default;
};

// [in, out] extents of layer i.
std::pair<int, int> layer_extents(const PolicyArch& arch, int layer);

long param_count(const PolicyArch& arch);

// Flat offset of each layer's slice; has num_layers()+1 entries, last is the
// total count. Layer i occupies [offsets[i], offsets[i+1]).
std::vector<long> layer_offsets(const PolicyArch& arch);

struct LayerWeights {
  Eigen::MatrixXf w;  // [out, in]
  Eigen::VectorXf b;  // [out]
};

struct ParamVector {
  PolicyArch arch;
  Eigen::VectorXf values;

  long size() const { return values.size(); }
};

ParamVector flatten(const PolicyArch& arch, const std::vector<LayerWeights>& layers);
std::vector<LayerWeights> unflatten(const ParamVector& params);

// Pre-unflattened policy for the rollout hot path.
class DeployedPolicy {
 public:
  explicit DeployedPolicy(const ParamVector& params);
  Eigen::Vector2f act(const Eigen::Matrix<float, 8, 1>& state) const;
  const PolicyArch& arch() const { return arch_; }

 private:
  PolicyArch arch_;
  std::vector<LayerWeights> layers_;
  mutable Eigen::VectorXf h0_, h1_;
};

// Deterministic deployment rule: tanh on the mean head, log-std ignored.
Eigen::Vector2f act(const ParamVector& params,
                    const Eigen::Matrix<float, 8, 1>& state);

// Checkpoint file: magic "MAA1", arch as JSON, raw little-endian f32 blob.
void save_checkpoint(const std::filesystem::path& path, const ParamVector& params);
ParamVector load_checkpoint(const std::filesystem::path& path);

}  // namespace policyforge

#endif  // POLICYFORGE_POLICY_POLICY_HPP_
