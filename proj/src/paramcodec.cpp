#include "policyforge/paramcodec/paramcodec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "policyforge/envsuite/envsuite.hpp"
#include "policyforge/io/blob.hpp"
#include "policyforge/numeric/threading.hpp"

namespace policyforge {

ChunkLayout make_layout(const PolicyArch& arch, int num_chunks) {
  const int layers = arch.num_layers();
  if (num_chunks < 1 || num_chunks > layers) {
    throw std::invalid_argument("make_layout: chunk count must be in [1, layers]");
  }
  const auto offsets = layer_offsets(arch);
  ChunkLayout layout;
  layout.num_chunks = num_chunks;
  const int base = layers / num_chunks;
  const int extra = layers % num_chunks;
  int layer = 0;
  for (int c = 0; c < num_chunks; ++c) {
    // remainder layers go to the trailing chunks, so the output layer always
    // merges into the last chunk
    const int take = base + (c >= num_chunks - extra ? 1 : 0);
    const long begin = offsets[static_cast<std::size_t>(layer)];
    const long end = offsets[static_cast<std::size_t>(layer + take)];
    layout.slices.emplace_back(begin, end);
    layout.padded_width =
        std::max(layout.padded_width, static_cast<int>(end - begin));
    layer += take;
  }
  return layout;
}

Tensor chunk_params(const ParamVector& x, const ChunkLayout& layout) {
  if (x.values.size() != layout.total_params()) {
    throw std::invalid_argument("chunk_params: length does not match layout");
  }
  Tensor out = Tensor::zeros({layout.num_chunks, layout.padded_width});
  for (int c = 0; c < layout.num_chunks; ++c) {
    const auto [begin, end] = layout.slices[static_cast<std::size_t>(c)];
    for (long i = begin; i < end; ++i) {
      out.mut()[static_cast<Eigen::Index>(c) * layout.padded_width +
                (i - begin)] = x.values[i];
    }
  }
  return out;
}

ParamVector reassemble_params(const Tensor& chunks, const ChunkLayout& layout,
                              const PolicyArch& arch) {
  if (chunks.rank() != 2 || chunks.dim(0) != layout.num_chunks ||
      chunks.dim(1) != layout.padded_width) {
    throw std::invalid_argument("reassemble_params: chunk shape mismatch");
  }
  ParamVector x;
  x.arch = arch;
  x.values.resize(layout.total_params());
  for (int c = 0; c < layout.num_chunks; ++c) {
    const auto [begin, end] = layout.slices[static_cast<std::size_t>(c)];
    for (long i = begin; i < end; ++i) {
      x.values[i] = chunks[static_cast<Eigen::Index>(c) * layout.padded_width +
                           (i - begin)];
    }
  }
  return x;
}

namespace {

Tensor random_init(std::vector<int> shape, float scale, Rng& rng) {
  Tensor t = Tensor::uninit(std::move(shape));
  for (Eigen::Index i = 0; i < t.size(); ++i) t.mut()[i] = rng.normalf() * scale;
  return t;
}

}  // namespace

ParamCodec::ParamCodec(const PolicyArch& arch, const CodecConfig& cfg,
                       std::uint64_t seed)
    : arch_(arch), cfg_(cfg), layout_(make_layout(arch, cfg.num_chunks)) {
  Rng rng(derive_seed(seed, "codec-init"));
  const int w = layout_.padded_width;
  const int h = cfg_.hidden;
  const int d = cfg_.d_latent;
  const int m = layout_.num_chunks;
  params_.add("enc_embed", Tensor::zeros({m, w}));
  params_.add("enc_w1", random_init({w, h}, 1.0f / std::sqrt(static_cast<float>(w)), rng));
  params_.add("enc_b1", Tensor::zeros({h}));
  params_.add("enc_w2", random_init({h, d}, 1.0f / std::sqrt(static_cast<float>(h)), rng));
  params_.add("enc_b2", Tensor::zeros({d}));
  params_.add("dec_embed", Tensor::zeros({m, d}));
  params_.add("dec_w1", random_init({d, h}, 1.0f / std::sqrt(static_cast<float>(d)), rng));
  params_.add("dec_b1", Tensor::zeros({h}));
  // zero-initialized output layer: an untrained decoder maps any tokens to 0
  params_.add("dec_w2", Tensor::zeros({h, w}));
  params_.add("dec_b2", Tensor::zeros({w}));

  masks_ = Tensor::zeros({m, w});
  for (int c = 0; c < m; ++c) {
    for (long i = 0; i < layout_.valid_width(c); ++i) {
      masks_.mut()[static_cast<Eigen::Index>(c) * w + i] = 1.0f;
    }
  }
}

namespace {

struct CodecVars {
  Var enc_embed, enc_w1, enc_b1, enc_w2, enc_b2;
  Var dec_embed, dec_w1, dec_b1, dec_w2, dec_b2;
};

CodecVars bind_codec(Graph& g, const ParamSet& params, bool trainable,
                     std::vector<int>* leaf_ids) {
  CodecVars v;
  Var* slots[10] = {&v.enc_embed, &v.enc_w1, &v.enc_b1, &v.enc_w2, &v.enc_b2,
                    &v.dec_embed, &v.dec_w1, &v.dec_b1, &v.dec_w2, &v.dec_b2};
  for (int i = 0; i < 10; ++i) {
    const int id = trainable ? g.leaf(params.values[static_cast<std::size_t>(i)])
                             : g.input(params.values[static_cast<std::size_t>(i)]);
    *slots[i] = Var{&g, id};
    if (leaf_ids) leaf_ids->push_back(id);
  }
  return v;
}

Var encode_chunk(const CodecVars& v, Var x, int chunk) {
  Var xe = add(x, slice(v.enc_embed, 0, chunk, 1));
  Var h = silu(add(matmul(xe, v.enc_w1), v.enc_b1));
  return add(matmul(h, v.enc_w2), v.enc_b2);
}

Var decode_chunk(const CodecVars& v, Var z, int chunk) {
  Var ze = add(z, slice(v.dec_embed, 0, chunk, 1));
  Var h = silu(add(matmul(ze, v.dec_w1), v.dec_b1));
  return add(matmul(h, v.dec_w2), v.dec_b2);
}

float sample_std(const Eigen::VectorXf& v) {
  const float mu = v.mean();
  return std::sqrt((v.array() - mu).square().mean());
}

}  // namespace

Tensor ParamCodec::encode(const ParamVector& x, bool noise_on, Rng* rng) const {
  if (!(x.arch == arch_)) {
    throw std::invalid_argument("encode: architecture mismatch");
  }
  Tensor chunks = chunk_params(x, layout_);
  if (noise_on) {
    if (!rng) throw std::invalid_argument("encode: noise requires an rng");
    const float s = cfg_.input_noise_factor * sample_std(x.values);
    for (int c = 0; c < layout_.num_chunks; ++c) {
      for (long i = 0; i < layout_.valid_width(c); ++i) {
        chunks.mut()[static_cast<Eigen::Index>(c) * layout_.padded_width + i] +=
            s * rng->normalf();
      }
    }
  }
  Graph g;
  CodecVars v = bind_codec(g, params_, false, nullptr);
  Tensor tokens = Tensor::uninit({layout_.num_chunks, cfg_.d_latent});
  for (int c = 0; c < layout_.num_chunks; ++c) {
    Tensor row = Tensor::uninit({1, layout_.padded_width});
    row.mut() = chunks.flat().segment(
        static_cast<Eigen::Index>(c) * layout_.padded_width,
        layout_.padded_width);
    Var z = encode_chunk(v, Var{&g, g.input(std::move(row))}, c);
    tokens.mut().segment(static_cast<Eigen::Index>(c) * cfg_.d_latent,
                         cfg_.d_latent) = z.value().flat();
  }
  return tokens;
}

ParamVector ParamCodec::decode(const Tensor& tokens, bool noise_on,
                               Rng* rng) const {
  if (tokens.rank() != 2 || tokens.dim(0) != layout_.num_chunks ||
      tokens.dim(1) != cfg_.d_latent) {
    throw std::invalid_argument("decode: token shape mismatch");
  }
  Tensor z = tokens.clone();
  if (noise_on) {
    if (!rng) throw std::invalid_argument("decode: noise requires an rng");
    Eigen::VectorXf flat(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) flat[i] = z[i];
    const float s = cfg_.latent_noise_factor * sample_std(flat);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.mut()[i] += s * rng->normalf();
  }
  Graph g;
  CodecVars v = bind_codec(g, params_, false, nullptr);
  Tensor chunks = Tensor::zeros({layout_.num_chunks, layout_.padded_width});
  for (int c = 0; c < layout_.num_chunks; ++c) {
    Tensor row = Tensor::uninit({1, cfg_.d_latent});
    row.mut() =
        z.flat().segment(static_cast<Eigen::Index>(c) * cfg_.d_latent,
                         cfg_.d_latent);
    Var y = decode_chunk(v, Var{&g, g.input(std::move(row))}, c);
    chunks.mut().segment(static_cast<Eigen::Index>(c) * layout_.padded_width,
                         layout_.padded_width) = y.value().flat();
  }
  return reassemble_params(chunks, layout_, arch_);
}

std::vector<Tensor> ParamCodec::encode_batch(
    const std::vector<ParamVector>& xs) const {
  std::vector<Tensor> out(xs.size());
  parallel_for(static_cast<int>(xs.size()),
               [&](int i) { out[static_cast<std::size_t>(i)] = encode(xs[static_cast<std::size_t>(i)]); });
  return out;
}

void ParamCodec::save(const std::filesystem::path& path) const {
  Json extra = {{"kind", "param-codec"},
                {"arch",
                 {{"input_dim", arch_.input_dim},
                  {"hidden", arch_.hidden},
                  {"action_dim", arch_.action_dim}}},
                {"num_chunks", cfg_.num_chunks},
                {"d_latent", cfg_.d_latent},
                {"hidden_width", cfg_.hidden},
                {"input_noise_factor", cfg_.input_noise_factor},
                {"latent_noise_factor", cfg_.latent_noise_factor}};
  save_param_set(path, params_, std::move(extra));
}

ParamCodec ParamCodec::load(const std::filesystem::path& path) {
  ParamSet loaded;
  Json header = load_param_set(path, &loaded);
  PolicyArch arch;
  arch.input_dim = header.at("arch").at("input_dim").get<int>();
  arch.hidden = header.at("arch").at("hidden").get<std::vector<int>>();
  arch.action_dim = header.at("arch").at("action_dim").get<int>();
  CodecConfig cfg;
  cfg.num_chunks = header.at("num_chunks").get<int>();
  cfg.d_latent = header.at("d_latent").get<int>();
  cfg.hidden = header.at("hidden_width").get<int>();
  cfg.input_noise_factor = header.at("input_noise_factor").get<float>();
  cfg.latent_noise_factor = header.at("latent_noise_factor").get<float>();
  ParamCodec codec(arch, cfg, /*seed=*/0);
  codec.params_ = std::move(loaded);
  return codec;
}

namespace {

struct ShardGrads {
  float loss = 0.0f;  // already normalized by the global constant
  std::vector<Tensor> grads;
};

}  // namespace

CodecTrainResult train_codec(ParamCodec& codec,
                             const std::vector<ParamVector>& corpus,
                             std::uint64_t seed) {
  if (corpus.size() < 2) {
    throw std::invalid_argument("train_codec: corpus needs at least 2 checkpoints");
  }
  const CodecConfig& cfg = codec.config();
  const ChunkLayout& layout = codec.layout();
  const int w = layout.padded_width;
  const int d = cfg.d_latent;
  const int m = layout.num_chunks;
  const float total_valid = static_cast<float>(layout.total_params());

  // pre-chunk the corpus once
  std::vector<Tensor> chunked(corpus.size());
  std::vector<float> stds(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    chunked[i] = chunk_params(corpus[i], layout);
    const float mu = corpus[i].values.mean();
    stds[i] = std::sqrt((corpus[i].values.array() - mu).square().mean());
  }

  AdamW opt({.lr = cfg.lr, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f,
             .weight_decay = cfg.weight_decay});
  opt.init(codec.weights().values);

  Rng shuffle_rng(derive_seed(seed, "codec-shuffle"));
  Rng input_noise_rng(derive_seed(seed, "codec-input-noise"));
  CodecTrainResult result;
  long global_step = 0;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(static_cast<float>(
        cosine_warm_restarts_lr(cfg.lr, epoch, cfg.lr_restart_period)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz =
          std::min<std::size_t>(cfg.batch_size, order.size() - start);
      // clean and noisy chunk matrices for the whole batch, per chunk index
      std::vector<Tensor> clean(m), noisy(m);
      for (int c = 0; c < m; ++c) {
        clean[c] = Tensor::uninit({static_cast<int>(bsz), w});
        noisy[c] = Tensor::uninit({static_cast<int>(bsz), w});
      }
      for (std::size_t b = 0; b < bsz; ++b) {
        const std::size_t idx = order[start + b];
        const float ns = cfg.input_noise_factor * stds[idx];
        for (int c = 0; c < m; ++c) {
          const auto src = chunked[idx].flat().segment(
              static_cast<Eigen::Index>(c) * w, w);
          clean[c].mut().segment(static_cast<Eigen::Index>(b) * w, w) = src;
          auto dst = noisy[c].mut().segment(static_cast<Eigen::Index>(b) * w, w);
          dst = src;
          for (long i = 0; i < layout.valid_width(c); ++i) {
            dst[i] += ns * input_noise_rng.normalf();
          }
        }
      }

      const int shards = std::max(1, std::min<int>(cfg.shards, static_cast<int>(bsz)));
      std::vector<ShardGrads> shard_out(static_cast<std::size_t>(shards));
      const float norm = static_cast<float>(bsz) * total_valid;
      parallel_for(shards, [&](int s) {
        const std::size_t lo = bsz * static_cast<std::size_t>(s) /
                               static_cast<std::size_t>(shards);
        const std::size_t hi = bsz * static_cast<std::size_t>(s + 1) /
                               static_cast<std::size_t>(shards);
        if (lo == hi) return;
        const int rows = static_cast<int>(hi - lo);
        Graph g;
        std::vector<int> leaves;
        CodecVars v = bind_codec(g, codec.weights(), true, &leaves);
        Rng latent_rng(derive_seed(seed, "codec-latent-noise",
                                   static_cast<std::uint64_t>(global_step) *
                                           16ull +
                                       static_cast<std::uint64_t>(s)));
        std::vector<Var> zs;
        for (int c = 0; c < m; ++c) {
          Tensor xin = Tensor::uninit({rows, w});
          xin.mut() = noisy[c].flat().segment(static_cast<Eigen::Index>(lo) * w,
                                              static_cast<Eigen::Index>(rows) * w);
          zs.push_back(encode_chunk(v, Var{&g, g.input(std::move(xin))}, c));
        }
        // per-sample latent std over all chunks, then the latent noise draw
        Eigen::VectorXf zstd = Eigen::VectorXf::Zero(rows);
        for (int r = 0; r < rows; ++r) {
          Eigen::VectorXf all(m * d);
          for (int c = 0; c < m; ++c) {
            all.segment(c * d, d) =
                zs[static_cast<std::size_t>(c)].value().flat().segment(
                    static_cast<Eigen::Index>(r) * d, d);
          }
          zstd[r] = sample_std(all);
        }
        Var loss{};
        for (int c = 0; c < m; ++c) {
          Tensor eta = Tensor::uninit({rows, d});
          for (int r = 0; r < rows; ++r) {
            const float s2 = cfg.latent_noise_factor * zstd[r];
            for (int j = 0; j < d; ++j) {
              eta.mut()[static_cast<Eigen::Index>(r) * d + j] =
                  s2 * latent_rng.normalf();
            }
          }
          Var zn = add(zs[static_cast<std::size_t>(c)],
                       Var{&g, g.input(std::move(eta))});
          Var y = decode_chunk(v, zn, c);
          Tensor xc = Tensor::uninit({rows, w});
          xc.mut() = clean[c].flat().segment(static_cast<Eigen::Index>(lo) * w,
                                             static_cast<Eigen::Index>(rows) * w);
          Var diff = sub(y, Var{&g, g.input(std::move(xc))});
          Tensor mrow = Tensor::uninit({1, w});
          mrow.mut() = codec.masks().flat().segment(
              static_cast<Eigen::Index>(c) * w, w);
          Var masked = mul(diff, Var{&g, g.input(std::move(mrow))});
          Var sse = reduce_sum(mul(masked, masked));
          loss = loss.valid() ? add(loss, sse) : sse;
        }
        loss = scalar_mul(loss, 1.0f / norm);
        g.backward(loss.id);
        ShardGrads& out = shard_out[static_cast<std::size_t>(s)];
        out.loss = loss.value().value();
        for (int leaf : leaves) out.grads.push_back(g.grad(leaf));
      });

      std::vector<Tensor> grads;
      float loss_val = 0.0f;
      for (const ShardGrads& sg : shard_out) {
        if (sg.grads.empty()) continue;
        loss_val += sg.loss;
        if (grads.empty()) {
          for (const Tensor& t : sg.grads) grads.push_back(t.clone());
        } else {
          for (std::size_t k = 0; k < grads.size(); ++k) {
            grads[k].mut() += sg.grads[k].flat();
          }
        }
      }
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("train_codec: non-finite loss");
      }
      opt.step(codec.weights().values, grads);
      epoch_loss += loss_val;
      ++batches;
      ++global_step;
    }
    result.loss_curve.push_back(static_cast<float>(epoch_loss / batches));
  }
  return result;
}

FidelityReport fidelity_report(
    const ParamCodec& codec,
    const std::vector<std::pair<std::string, ParamVector>>& held_out,
    const std::vector<std::uint64_t>& eval_seeds) {
  FidelityReport report;
  report.records.resize(held_out.size());
  parallel_for(static_cast<int>(held_out.size()), [&](int i) {
    const auto& [task_id, original] = held_out[static_cast<std::size_t>(i)];
    const TaskSpec& task = find_task(task_id);
    const Tensor z = codec.encode(original);
    const ParamVector decoded = codec.decode(z);
    FidelityRecord rec;
    rec.task = task_id;
    rec.recon_mse =
        (original.values - decoded.values).squaredNorm() /
        static_cast<float>(original.values.size());
    int orig_hits = 0, dec_hits = 0;
    for (std::uint64_t s : eval_seeds) {
      if (rollout(original, task, s).succeeded) ++orig_hits;
      if (rollout(decoded, task, s).succeeded) ++dec_hits;
    }
    rec.original_rate =
        static_cast<float>(orig_hits) / static_cast<float>(eval_seeds.size());
    rec.decoded_rate =
        static_cast<float>(dec_hits) / static_cast<float>(eval_seeds.size());
    rec.retention = rec.original_rate > 0.0f
                        ? std::min(1.0f, rec.decoded_rate / rec.original_rate)
                        : 1.0f;
    report.records[static_cast<std::size_t>(i)] = rec;
  });
  double ret = 0.0, rel = 0.0;
  for (std::size_t i = 0; i < report.records.size(); ++i) {
    ret += report.records[i].retention;
    const auto& original = held_out[i].second;
    rel += std::sqrt(report.records[i].recon_mse *
                     static_cast<float>(original.values.size())) /
           original.values.norm();
  }
  if (!report.records.empty()) {
    report.mean_retention = static_cast<float>(ret / report.records.size());
    report.mean_recon_rel_error = static_cast<float>(rel / report.records.size());
  }
  return report;
}

}  // namespace policyforge
