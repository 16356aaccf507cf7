#include "policyforge/behavior/behavior.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "policyforge/io/blob.hpp"
#include "policyforge/numeric/threading.hpp"

namespace policyforge {

namespace {

void write_state(Eigen::VectorXf& dst, long at,
                 const Eigen::Matrix<float, 8, 1>& s) {
  dst.segment(at, 8) = s;
}

}  // namespace

BehaviorPair decouple(const Trajectory& traj, const BehaviorConfig& cfg) {
  const int n = cfg.prefix_steps;
  if (traj.length() < n) {
    throw std::invalid_argument("decouple: trajectory shorter than the prefix");
  }
  if (traj.first_success < 0) {
    throw std::invalid_argument(
        "decouple: no success step; segmentation mode required");
  }
  BehaviorPair pair;
  pair.first_success = traj.first_success;
  pair.prefix.resize(cfg.prefix_dim());
  long at = 0;
  for (int t = 0; t < n; ++t) {
    write_state(pair.prefix, at, traj.states[static_cast<std::size_t>(t)]);
    at += cfg.state_dim;
    pair.prefix.segment(at, 2) = traj.actions[static_cast<std::size_t>(t)];
    at += cfg.action_dim;
  }
  write_state(pair.prefix, at, traj.states[static_cast<std::size_t>(n)]);

  pair.post_states.resize(cfg.post_dim());
  const int last = static_cast<int>(traj.states.size()) - 1;
  for (int k = 0; k < cfg.post_states; ++k) {
    const int idx = std::min(traj.first_success + k, last);
    write_state(pair.post_states, static_cast<long>(k) * cfg.state_dim,
                traj.states[static_cast<std::size_t>(idx)]);
  }
  return pair;
}

BehaviorPair decouple_segment(const Trajectory& traj, const BehaviorConfig& cfg,
                              int start, int segment_len) {
  const int n = cfg.prefix_steps;
  const int m = cfg.post_states;
  if (segment_len <= n + m) {
    throw std::invalid_argument("decouple_segment: segment must exceed n + m");
  }
  if (start < 0 || start + segment_len > traj.length()) {
    throw std::invalid_argument("decouple_segment: segment out of range");
  }
  BehaviorPair pair;
  pair.prefix.resize(cfg.prefix_dim());
  long at = 0;
  for (int t = start; t < start + n; ++t) {
    write_state(pair.prefix, at, traj.states[static_cast<std::size_t>(t)]);
    at += cfg.state_dim;
    pair.prefix.segment(at, 2) = traj.actions[static_cast<std::size_t>(t)];
    at += cfg.action_dim;
  }
  write_state(pair.prefix, at,
              traj.states[static_cast<std::size_t>(start + n)]);
  pair.post_states.resize(cfg.post_dim());
  for (int k = 0; k < m; ++k) {
    const int idx = start + segment_len - m + 1 + k;
    write_state(pair.post_states, static_cast<long>(k) * cfg.state_dim,
                traj.states[static_cast<std::size_t>(idx)]);
  }
  return pair;
}

BehaviorEmbedder::BehaviorEmbedder(const BehaviorConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  Rng rng(derive_seed(seed, "embedder-init"));
  const int p = cfg_.prefix_dim();
  const int q = cfg_.post_dim();
  const int h = cfg_.hidden;
  const int e = cfg_.d_embed;
  const auto init = [&](std::vector<int> shape, float fan_in) {
    Tensor t = Tensor::uninit(std::move(shape));
    const float s = 1.0f / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.mut()[i] = rng.normalf() * s;
    return t;
  };
  params_.add("phi_w1", init({p, h}, static_cast<float>(p)));
  params_.add("phi_b1", Tensor::zeros({h}));
  params_.add("phi_w2", init({h, h}, static_cast<float>(h)));
  params_.add("phi_b2", Tensor::zeros({h}));
  params_.add("phi_w3", init({h, e}, static_cast<float>(h)));
  params_.add("phi_b3", Tensor::zeros({e}));
  params_.add("psi_w1", init({q, h}, static_cast<float>(q)));
  params_.add("psi_b1", Tensor::zeros({h}));
  params_.add("psi_w2", init({h, h}, static_cast<float>(h)));
  params_.add("psi_b2", Tensor::zeros({h}));
  params_.add("psi_w3", init({h, e}, static_cast<float>(h)));
  params_.add("psi_b3", Tensor::zeros({e}));
  Tensor w = Tensor::zeros({e, e});
  for (int i = 0; i < e; ++i) w.mut()[static_cast<Eigen::Index>(i) * e + i] = 1.0f;
  params_.add("metric_w", std::move(w));
}

namespace {

struct TowerVars {
  Var w1, b1, w2, b2, w3, b3;
};

struct EmbedVars {
  TowerVars phi, psi;
  Var metric;
};

EmbedVars bind_embedder(Graph& g, const ParamSet& params, bool trainable,
                        std::vector<int>* leaf_ids) {
  EmbedVars v;
  Var* slots[13] = {&v.phi.w1, &v.phi.b1, &v.phi.w2, &v.phi.b2, &v.phi.w3,
                    &v.phi.b3, &v.psi.w1, &v.psi.b1, &v.psi.w2, &v.psi.b2,
                    &v.psi.w3, &v.psi.b3, &v.metric};
  for (int i = 0; i < 13; ++i) {
    const int id = trainable ? g.leaf(params.values[static_cast<std::size_t>(i)])
                             : g.input(params.values[static_cast<std::size_t>(i)]);
    *slots[i] = Var{&g, id};
    if (leaf_ids) leaf_ids->push_back(id);
  }
  return v;
}

Var tower_forward(const TowerVars& t, Var x) {
  Var h1 = silu(add(matmul(x, t.w1), t.b1));
  Var h2 = silu(add(matmul(h1, t.w2), t.b2));
  return add(matmul(h2, t.w3), t.b3);
}

Tensor rows_to_tensor(const std::vector<const Eigen::VectorXf*>& rows) {
  const int n = static_cast<int>(rows.size());
  const int d = static_cast<int>(rows[0]->size());
  Tensor t = Tensor::uninit({n, d});
  for (int i = 0; i < n; ++i) {
    t.mut().segment(static_cast<Eigen::Index>(i) * d, d) = *rows[static_cast<std::size_t>(i)];
  }
  return t;
}

}  // namespace

BehaviorEmbedding BehaviorEmbedder::embed(const BehaviorPair& pair) const {
  if (pair.prefix.size() != cfg_.prefix_dim() ||
      pair.post_states.size() != cfg_.post_dim()) {
    throw std::invalid_argument("embed: pair dimensions do not match config");
  }
  Graph g;
  EmbedVars v = bind_embedder(g, params_, false, nullptr);
  Tensor p = Tensor::uninit({1, cfg_.prefix_dim()});
  p.mut() = pair.prefix;
  Tensor q = Tensor::uninit({1, cfg_.post_dim()});
  q.mut() = pair.post_states;
  Var h = tower_forward(v.phi, Var{&g, g.input(std::move(p))});
  Var vv = tower_forward(v.psi, Var{&g, g.input(std::move(q))});
  BehaviorEmbedding out;
  out.h = Eigen::Map<const Eigen::VectorXf>(h.value().data(), cfg_.d_embed);
  out.v = Eigen::Map<const Eigen::VectorXf>(vv.value().data(), cfg_.d_embed);
  out.condition.resize(2 * cfg_.d_embed);
  out.condition << out.h, out.v;
  return out;
}

BehaviorEmbedding BehaviorEmbedder::embed_trajectory(const Trajectory& traj) const {
  if (traj.first_success >= 0) {
    return embed(decouple(traj, cfg_));
  }
  return embed(decouple_segment(traj, cfg_, 0, traj.length()));
}

Eigen::VectorXf BehaviorEmbedder::segment_embed(const Trajectory& traj,
                                                int segment_len,
                                                int num_segments) const {
  if (segment_len <= cfg_.prefix_steps + cfg_.post_states) {
    throw std::invalid_argument("segment_embed: segment must exceed n + m");
  }
  if (traj.length() < segment_len) {
    throw std::invalid_argument(
        "segment_embed: trajectory shorter than one segment");
  }
  std::vector<Eigen::VectorXf> conditions;
  for (int start = 0; start + segment_len <= traj.length();
       start += segment_len) {
    conditions.push_back(
        embed(decouple_segment(traj, cfg_, start, segment_len)).condition);
    if (static_cast<int>(conditions.size()) == num_segments) break;
  }
  // repeat the last full segment when the trajectory runs short
  while (static_cast<int>(conditions.size()) < num_segments) {
    conditions.push_back(conditions.back());
  }
  Eigen::VectorXf out(static_cast<long>(num_segments) * 2 * cfg_.d_embed);
  for (int k = 0; k < num_segments; ++k) {
    out.segment(static_cast<long>(k) * 2 * cfg_.d_embed, 2 * cfg_.d_embed) =
        conditions[static_cast<std::size_t>(k)];
  }
  return out;
}

Eigen::MatrixXf BehaviorEmbedder::score_matrix(
    const std::vector<BehaviorEmbedding>& es) const {
  const int n = static_cast<int>(es.size());
  const int e = cfg_.d_embed;
  Eigen::MatrixXf h(n, e), v(n, e);
  for (int i = 0; i < n; ++i) {
    h.row(i) = es[static_cast<std::size_t>(i)].h;
    v.row(i) = es[static_cast<std::size_t>(i)].v;
  }
  const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                       Eigen::RowMajor>>
      w(params_.values[params_.index_of("metric_w")].data(), e, e);
  return h * w * v.transpose();
}

float contrastive_loss(const Eigen::MatrixXf& scores) {
  const int n = static_cast<int>(scores.rows());
  if (n < 1 || scores.cols() != n) {
    throw std::invalid_argument("contrastive_loss: scores must be square");
  }
  if (!scores.allFinite()) {
    throw std::invalid_argument("contrastive_loss: non-finite scores");
  }
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const float mx = scores.row(i).maxCoeff();
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      denom += std::exp(static_cast<double>(scores(i, j) - mx));
    }
    loss -= static_cast<double>(scores(i, i) - mx) - std::log(denom);
  }
  return static_cast<float>(loss / n);
}

EmbedTrainResult train_embedder(BehaviorEmbedder& embedder,
                                const std::vector<Trajectory>& corpus,
                                std::uint64_t seed) {
  const BehaviorConfig& cfg = embedder.config();
  if (static_cast<int>(corpus.size()) < cfg.batch_size) {
    throw std::invalid_argument("train_embedder: corpus smaller than one batch");
  }
  std::vector<BehaviorPair> pairs;
  pairs.reserve(corpus.size());
  for (const Trajectory& t : corpus) {
    pairs.push_back(t.first_success >= 0
                        ? decouple(t, cfg)
                        : decouple_segment(t, cfg, 0, t.length()));
  }

  AdamW opt({.lr = cfg.lr, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f,
             .weight_decay = cfg.weight_decay});
  opt.init(embedder.weights().values);
  Rng shuffle_rng(derive_seed(seed, "embed-shuffle"));

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  EmbedTrainResult result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(static_cast<float>(
        cosine_warm_restarts_lr(cfg.lr, epoch, cfg.lr_restart_period)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const int n = static_cast<int>(
          std::min<std::size_t>(cfg.batch_size, order.size() - start));
      if (n < 2) break;
      std::vector<const Eigen::VectorXf*> prows, qrows;
      for (int b = 0; b < n; ++b) {
        const BehaviorPair& pr = pairs[order[start + static_cast<std::size_t>(b)]];
        prows.push_back(&pr.prefix);
        qrows.push_back(&pr.post_states);
      }
      Graph g;
      std::vector<int> leaves;
      EmbedVars v = bind_embedder(g, embedder.weights(), true, &leaves);
      Var h = tower_forward(v.phi, Var{&g, g.input(rows_to_tensor(prows))});
      Var vv = tower_forward(v.psi, Var{&g, g.input(rows_to_tensor(qrows))});
      Var s = matmul(matmul(h, v.metric), transpose(vv));
      Var probs = softmax(s);
      Var logp = log(probs);
      Tensor eye = Tensor::zeros({n, n});
      for (int i = 0; i < n; ++i) {
        eye.mut()[static_cast<Eigen::Index>(i) * n + i] = 1.0f;
      }
      Var diag = mul(logp, Var{&g, g.input(std::move(eye))});
      Var loss = scalar_mul(reduce_sum(diag), -1.0f / static_cast<float>(n));
      g.backward(loss.id);
      if (!std::isfinite(loss.value().value())) {
        throw std::runtime_error("train_embedder: non-finite loss");
      }
      std::vector<Tensor> grads;
      grads.reserve(leaves.size());
      for (int leaf : leaves) grads.push_back(g.grad(leaf));
      opt.step(embedder.weights().values, grads);
      epoch_loss += loss.value().value();
      ++batches;
    }
    result.loss_curve.push_back(static_cast<float>(epoch_loss / batches));
  }
  return result;
}

float retrieval_accuracy(const BehaviorEmbedder& embedder,
                         const std::vector<Trajectory>& held_out,
                         int batch_size, int num_batches, std::uint64_t seed) {
  if (static_cast<int>(held_out.size()) < batch_size) {
    throw std::invalid_argument("retrieval_accuracy: not enough held-out data");
  }
  std::vector<BehaviorEmbedding> all(held_out.size());
  parallel_for(static_cast<int>(held_out.size()), [&](int i) {
    all[static_cast<std::size_t>(i)] =
        embedder.embed_trajectory(held_out[static_cast<std::size_t>(i)]);
  });
  Rng rng(derive_seed(seed, "retrieval"));
  int correct = 0, total = 0;
  std::vector<std::size_t> idx(held_out.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (int b = 0; b < num_batches; ++b) {
    rng.shuffle(idx);
    std::vector<BehaviorEmbedding> batch;
    for (int i = 0; i < batch_size; ++i) {
      batch.push_back(all[idx[static_cast<std::size_t>(i)]]);
    }
    const Eigen::MatrixXf s = embedder.score_matrix(batch);
    for (int i = 0; i < batch_size; ++i) {
      int argmax = 0;
      s.row(i).maxCoeff(&argmax);
      if (argmax == i) ++correct;
      ++total;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(total);
}

void BehaviorEmbedder::save(const std::filesystem::path& path) const {
  Json extra = {{"kind", "behavior-embedder"},
                {"prefix_steps", cfg_.prefix_steps},
                {"post_states", cfg_.post_states},
                {"d_embed", cfg_.d_embed},
                {"hidden", cfg_.hidden},
                {"state_dim", cfg_.state_dim},
                {"action_dim", cfg_.action_dim}};
  save_param_set(path, params_, std::move(extra));
}

BehaviorEmbedder BehaviorEmbedder::load(const std::filesystem::path& path) {
  ParamSet loaded;
  Json header = load_param_set(path, &loaded);
  BehaviorConfig cfg;
  cfg.prefix_steps = header.at("prefix_steps").get<int>();
  cfg.post_states = header.at("post_states").get<int>();
  cfg.d_embed = header.at("d_embed").get<int>();
  cfg.hidden = header.at("hidden").get<int>();
  cfg.state_dim = header.at("state_dim").get<int>();
  cfg.action_dim = header.at("action_dim").get<int>();
  BehaviorEmbedder embedder(cfg, 0);
  embedder.params_ = std::move(loaded);
  return embedder;
}

std::uint64_t trajectory_content_hash(const Trajectory& traj) {
  std::uint64_t h = fnv1a64(traj.task_id);
  for (const auto& s : traj.states) {
    h = fnv1a64(s.data(), 8 * sizeof(float), h);
  }
  for (const auto& a : traj.actions) {
    h = fnv1a64(a.data(), 2 * sizeof(float), h);
  }
  h = fnv1a64(traj.success.data(), traj.success.size(), h);
  return h;
}

Eigen::VectorXf cached_condition(const BehaviorEmbedder& embedder,
                                 const Trajectory& traj,
                                 const std::filesystem::path& cache_dir) {
  const std::string name = hash_hex(trajectory_content_hash(traj)) + ".emb";
  const std::filesystem::path path = cache_dir / name;
  const int dim = 2 * embedder.config().d_embed;
  if (std::filesystem::exists(path)) {
    JsonBlob blob = read_json_blob(path, "");
    if (static_cast<int>(blob.data.size()) == dim) {
      return Eigen::Map<const Eigen::VectorXf>(blob.data.data(), dim);
    }
  }
  const Eigen::VectorXf cond = embedder.embed_trajectory(traj).condition;
  Json header = {{"kind", "behavior-condition"}, {"dim", dim}};
  write_json_blob(path, "", header, cond.data(), static_cast<std::size_t>(dim));
  return cond;
}

}  // namespace policyforge
