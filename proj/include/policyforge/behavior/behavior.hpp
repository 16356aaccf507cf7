#ifndef POLICYFORGE_BEHAVIOR_BEHAVIOR_HPP_
#define POLICYFORGE_BEHAVIOR_BEHAVIOR_HPP_

#include <cstdint>
#include <filesystem>
#include <vector>

#include "policyforge/envsuite/envsuite.hpp"
#include "policyforge/numeric/graph.hpp"
#include "policyforge/numeric/optim.hpp"
#include "policyforge/numeric/rng.hpp"

namespace policyforge {

// Decoupled view of one trajectory: the first n state-action pairs plus the
// closing state, and the m states from the first success step onward.
struct BehaviorPair {
  Eigen::VectorXf prefix;       // n*(state+action) + state values
  Eigen::VectorXf post_states;  // m*state values
  int first_success = -1;
};

struct BehaviorConfig {
  int prefix_steps = 20;  // n
  int post_states = 3;    // m
  int d_embed = 128;
  int hidden = 256;
  int state_dim = 8;
  int action_dim = 2;
  // training
  int batch_size = 16;
  float lr = 1e-4f;
  float weight_decay = 1e-4f;
  int epochs = 300;
  int lr_restart_period = 100;
  int shards = 4;

  int prefix_dim() const {
    return prefix_steps * (state_dim + action_dim) + state_dim;
  }
  int post_dim() const { return post_states * state_dim; }
};

// Prefix/post split of a successful trajectory. Trajectories without a
// success step must go through segment_embed instead.
BehaviorPair decouple(const Trajectory& traj, const BehaviorConfig& cfg);

// Segmentation fallback: the last m states stand in for the post-success
// window. Used for success-free trajectories.
BehaviorPair decouple_segment(const Trajectory& traj, const BehaviorConfig& cfg,
                              int start, int segment_len);

struct BehaviorEmbedding {
  Eigen::VectorXf h;          // prefix embedding
  Eigen::VectorXf v;          // post-success embedding
  Eigen::VectorXf condition;  // concat(h, v)
};

// Two three-layer MLP towers plus the learnable bilinear metric W. W is only
// used by training and retrieval diagnostics, never to form conditions.
class BehaviorEmbedder {
 public:
  BehaviorEmbedder(const BehaviorConfig& cfg, std::uint64_t seed);

  const BehaviorConfig& config() const { return cfg_; }
  ParamSet& weights() { return params_; }
  const ParamSet& weights() const { return params_; }

  BehaviorEmbedding embed(const BehaviorPair& pair) const;

  // Embeds a trajectory, using decouple when a success step exists and the
  // single-segment fallback otherwise.
  BehaviorEmbedding embed_trajectory(const Trajectory& traj) const;

  // Segments a long trajectory and concatenates the per-segment conditions;
  // num_segments fixes the output size (the trailing partial segment is
  // dropped, missing segments repeat the last full one).
  Eigen::VectorXf segment_embed(const Trajectory& traj, int segment_len,
                                int num_segments) const;

  // score matrix s_ij = h_i^T W v_j
  Eigen::MatrixXf score_matrix(const std::vector<BehaviorEmbedding>& es) const;

  void save(const std::filesystem::path& path) const;
  static BehaviorEmbedder load(const std::filesystem::path& path);

 private:
  BehaviorConfig cfg_;
  ParamSet params_;
};

// InfoNCE over bilinear scores: -(1/N) sum_i log softmax_j(s_ij)[i].
float contrastive_loss(const Eigen::MatrixXf& scores);

struct EmbedTrainResult {
  std::vector<float> loss_curve;
};

EmbedTrainResult train_embedder(BehaviorEmbedder& embedder,
                                const std::vector<Trajectory>& corpus,
                                std::uint64_t seed);

// Top-1 retrieval accuracy over seeded batches of held-out pairs.
float retrieval_accuracy(const BehaviorEmbedder& embedder,
                         const std::vector<Trajectory>& held_out,
                         int batch_size, int num_batches, std::uint64_t seed);

// Embedding cache keyed by trajectory content hash.
std::uint64_t trajectory_content_hash(const Trajectory& traj);
Eigen::VectorXf cached_condition(const BehaviorEmbedder& embedder,
                                 const Trajectory& traj,
                                 const std::filesystem::path& cache_dir);

}  // namespace policyforge

#endif  // POLICYFORGE_BEHAVIOR_BEHAVIOR_HPP_
