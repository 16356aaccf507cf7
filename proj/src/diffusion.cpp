#include "policyforge/diffusion/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "policyforge/io/blob.hpp"
#include "policyforge/numeric/threading.hpp"

namespace policyforge {

NoiseSchedule::NoiseSchedule(int num_steps) : t_(num_steps) {
  if (num_steps < 1) throw std::invalid_argument("schedule: T must be >= 1");
  // squared-cosine alpha_bar with the usual small offset; betas are capped at
  // 0.2 so alpha_bar(T) lands near the usual linear-schedule terminal value
  // instead of collapsing below float precision, and alpha_bar is rebuilt
  // from the capped betas so the pair stays consistent
  const double s = 0.008;
  const auto f = [&](double t) {
    const double x = (t / num_steps + s) / (1.0 + s) * 1.5707963267948966;
    const double c = std::cos(x);
    return c * c;
  };
  const double f0 = f(0.0);
  betas_.resize(static_cast<std::size_t>(num_steps));
  alpha_bars_.resize(static_cast<std::size_t>(num_steps));
  double prev = 1.0;
  double running = 1.0;
  for (int t = 1; t <= num_steps; ++t) {
    const double ab = f(static_cast<double>(t)) / f0;
    double beta = 1.0 - ab / prev;
    beta = std::clamp(beta, 1e-8, 0.2);
    prev = ab;
    running *= 1.0 - beta;
    betas_[static_cast<std::size_t>(t - 1)] = static_cast<float>(beta);
    alpha_bars_[static_cast<std::size_t>(t - 1)] = static_cast<float>(running);
  }
  for (int t = 1; t <= num_steps; ++t) {
    if (!(beta(t) > 0.0f && beta(t) < 1.0f)) {
      throw std::runtime_error("schedule: beta out of (0,1)");
    }
    if (!(alpha_bar(t) < alpha_bar(t - 1))) {
      throw std::runtime_error("schedule: alpha_bar not strictly decreasing");
    }
  }
}

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps,
                     const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.num_steps()) {
    throw std::invalid_argument("forward_noise: t out of range");
  }
  if (!z0.same_shape(eps)) {
    throw std::invalid_argument("forward_noise: eps shape mismatch");
  }
  const float ab = schedule.alpha_bar(t);
  Tensor out = Tensor::uninit(z0.shape());
  out.mut() = std::sqrt(ab) * z0.flat() + std::sqrt(1.0f - ab) * eps.flat();
  return out;
}

namespace {

struct ResBlockVars {
  Var gn1_g, gn1_b, conv1_w, conv1_b;
  Var film_w, film_b;
  Var gn2_g, gn2_b, conv2_w, conv2_b;
  Var skip_w;  // only bound when cin != cout
  bool has_skip = false;
};

struct DenoiserVars {
  Var tm_w1, tm_b1, tm_w2, tm_b2;
  Var in_w, in_b;
  ResBlockVars rb_d1, rb_d2, rb_mid, rb_u1, rb_u2;
  Var ds1_w, ds1_b, ds2_w, ds2_b;
  Var us1_w, us1_b, us2_w, us2_b;
  Var out_gn_g, out_gn_b, out_w, out_b;
};

void register_resblock(ParamSet& p, const std::string& tag, int cin, int cout,
                       int cond_dim, Rng& rng) {
  const auto init = [&](std::vector<int> shape, float fan_in) {
    Tensor t = Tensor::uninit(std::move(shape));
    const float s = 1.0f / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.mut()[i] = rng.normalf() * s;
    return t;
  };
  p.add(tag + ".gn1_g", Tensor::full({cin, 1}, 1.0f));
  p.add(tag + ".gn1_b", Tensor::zeros({cin, 1}));
  p.add(tag + ".conv1_w", init({cout, cin, 3}, static_cast<float>(cin * 3)));
  p.add(tag + ".conv1_b", Tensor::zeros({cout, 1}));
  p.add(tag + ".film_w", Tensor::zeros({cond_dim, 2 * cout}));
  p.add(tag + ".film_b", Tensor::zeros({2 * cout}));
  p.add(tag + ".gn2_g", Tensor::full({cout, 1}, 1.0f));
  p.add(tag + ".gn2_b", Tensor::zeros({cout, 1}));
  // zero-initialized second conv: every residual block starts as identity
  p.add(tag + ".conv2_w", Tensor::zeros({cout, cout, 3}));
  p.add(tag + ".conv2_b", Tensor::zeros({cout, 1}));
  if (cin != cout) {
    p.add(tag + ".skip_w", init({cout, cin, 1}, static_cast<float>(cin)));
  }
}

ResBlockVars bind_resblock(Graph& g, const ParamSet& p, const std::string& tag,
                           bool trainable, std::vector<int>* leaves,
                           std::size_t* cursor) {
  ResBlockVars v;
  const auto next = [&]() {
    const int id = trainable ? g.leaf(p.values[*cursor]) : g.input(p.values[*cursor]);
    if (leaves) leaves->push_back(id);
    ++*cursor;
    return Var{&g, id};
  };
  v.gn1_g = next();
  v.gn1_b = next();
  v.conv1_w = next();
  v.conv1_b = next();
  v.film_w = next();
  v.film_b = next();
  v.gn2_g = next();
  v.gn2_b = next();
  v.conv2_w = next();
  v.conv2_b = next();
  if (*cursor < p.count() && p.names[*cursor].ends_with(".skip_w")) {
    v.skip_w = next();
    v.has_skip = true;
  }
  return v;
}

Var gn_affine(Var x, Var gamma, Var beta, int groups) {
  return add(mul(group_norm(x, groups), gamma), beta);
}

// cond_vec [B, cond_total]; modulation is (1 + scale) * h + shift per channel
Var resblock_forward(const ResBlockVars& v, Var x, Var cond_vec, int groups) {
  Graph& g = *x.g;
  const int cout = v.conv1_w.value().dim(0);
  Var h = conv1d(silu(gn_affine(x, v.gn1_g, v.gn1_b, groups)), v.conv1_w, 1);
  h = add(h, v.conv1_b);
  Var film = add(matmul(cond_vec, v.film_w), v.film_b);  // [B, 2c]
  const int b = film.value().dim(0);
  Var scale = reshape(slice(film, 1, 0, cout), {b, cout, 1});
  Var shift = reshape(slice(film, 1, cout, cout), {b, cout, 1});
  h = add(mul(h, scalar_add(scale, 1.0f)), shift);
  h = conv1d(silu(gn_affine(h, v.gn2_g, v.gn2_b, groups)), v.conv2_w, 1);
  h = add(h, v.conv2_b);
  Var skip = v.has_skip ? conv1d(x, v.skip_w, 1) : x;
  (void)g;
  return add(skip, h);
}

DenoiserVars bind_denoiser(Graph& g, const ParamSet& p, bool trainable,
                           std::vector<int>* leaves) {
  DenoiserVars v;
  std::size_t cursor = 0;
  const auto next = [&]() {
    const int id = trainable ? g.leaf(p.values[cursor]) : g.input(p.values[cursor]);
    if (leaves) leaves->push_back(id);
    ++cursor;
    return Var{&g, id};
  };
  v.tm_w1 = next();
  v.tm_b1 = next();
  v.tm_w2 = next();
  v.tm_b2 = next();
  v.in_w = next();
  v.in_b = next();
  v.rb_d1 = bind_resblock(g, p, "rb_d1", trainable, leaves, &cursor);
  v.ds1_w = next();
  v.ds1_b = next();
  v.rb_d2 = bind_resblock(g, p, "rb_d2", trainable, leaves, &cursor);
  v.ds2_w = next();
  v.ds2_b = next();
  v.rb_mid = bind_resblock(g, p, "rb_mid", trainable, leaves, &cursor);
  v.us1_w = next();
  v.us1_b = next();
  v.rb_u1 = bind_resblock(g, p, "rb_u1", trainable, leaves, &cursor);
  v.us2_w = next();
  v.us2_b = next();
  v.rb_u2 = bind_resblock(g, p, "rb_u2", trainable, leaves, &cursor);
  v.out_gn_g = next();
  v.out_gn_b = next();
  v.out_w = next();
  v.out_b = next();
  if (cursor != p.count()) {
    throw std::runtime_error("denoiser: parameter registry out of sync");
  }
  return v;
}

Tensor sinusoidal_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  Tensor out = Tensor::uninit({static_cast<int>(t.size()), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) /
                   static_cast<double>(half - 1));
      const double x = static_cast<double>(t[b]) * freq;
      out.mut()[static_cast<Eigen::Index>(b) * dim + i] =
          static_cast<float>(std::sin(x));
      out.mut()[static_cast<Eigen::Index>(b) * dim + half + i] =
          static_cast<float>(std::cos(x));
    }
  }
  return out;
}

// full forward: z_t [B, tokens, width], sinusoid [B, temb], cond [B, cond_dim]
Var denoiser_forward(Graph& g, const DenoiserVars& v, const DenoiserConfig& cfg,
                     Tensor z_t, Tensor sinusoid, Tensor cond) {
  Var x{&g, g.input(std::move(z_t))};
  Var temb = add(matmul(silu(add(matmul(Var{&g, g.input(std::move(sinusoid))},
                                        v.tm_w1),
                                 v.tm_b1)),
                        v.tm_w2),
                 v.tm_b2);
  Var cond_vec = concat(std::vector<Var>{temb, Var{&g, g.input(std::move(cond))}}, 1);

  Var h0 = add(conv1d(x, v.in_w, 1), v.in_b);
  Var d1 = resblock_forward(v.rb_d1, h0, cond_vec, cfg.groups);
  Var p1 = add(conv1d(d1, v.ds1_w, 2), v.ds1_b);
  Var d2 = resblock_forward(v.rb_d2, p1, cond_vec, cfg.groups);
  Var p2 = add(conv1d(d2, v.ds2_w, 2), v.ds2_b);
  Var m = resblock_forward(v.rb_mid, p2, cond_vec, cfg.groups);
  Var u1 = add(conv1d(upsample_nearest2(m), v.us1_w, 1), v.us1_b);
  Var r1 = resblock_forward(v.rb_u1, concat(std::vector<Var>{u1, d2}, 1),
                            cond_vec, cfg.groups);
  Var u2 = add(conv1d(upsample_nearest2(r1), v.us2_w, 1), v.us2_b);
  Var r2 = resblock_forward(v.rb_u2, concat(std::vector<Var>{u2, d1}, 1),
                            cond_vec, cfg.groups);
  Var out = silu(gn_affine(r2, v.out_gn_g, v.out_gn_b, cfg.groups));
  return add(conv1d(out, v.out_w, 1), v.out_b);
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.channels.size() != 3) {
    throw std::invalid_argument("denoiser: expected three channel widths");
  }
  if (cfg_.token_width % 4 != 0) {
    throw std::invalid_argument("denoiser: token width must be divisible by 4");
  }
  for (int c : cfg_.channels) {
    if (c % cfg_.groups != 0 || (2 * c) % cfg_.groups != 0) {
      throw std::invalid_argument("denoiser: channels must divide by groups");
    }
  }
  Rng rng(derive_seed(seed, "denoiser-init"));
  const int c0 = cfg_.channels[0], c1 = cfg_.channels[1], c2 = cfg_.channels[2];
  const int temb = cfg_.time_embed_dim;
  const int cond_total = temb + cfg_.cond_dim;
  const auto init = [&](std::vector<int> shape, float fan_in) {
    Tensor t = Tensor::uninit(std::move(shape));
    const float s = 1.0f / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.mut()[i] = rng.normalf() * s;
    return t;
  };
  params_.add("tm_w1", init({temb, temb}, static_cast<float>(temb)));
  params_.add("tm_b1", Tensor::zeros({temb}));
  params_.add("tm_w2", init({temb, temb}, static_cast<float>(temb)));
  params_.add("tm_b2", Tensor::zeros({temb}));
  params_.add("in_w", init({c0, cfg_.tokens, 3}, static_cast<float>(cfg_.tokens * 3)));
  params_.add("in_b", Tensor::zeros({c0, 1}));
  register_resblock(params_, "rb_d1", c0, c0, cond_total, rng);
  params_.add("ds1_w", init({c1, c0, 3}, static_cast<float>(c0 * 3)));
  params_.add("ds1_b", Tensor::zeros({c1, 1}));
  register_resblock(params_, "rb_d2", c1, c1, cond_total, rng);
  params_.add("ds2_w", init({c2, c1, 3}, static_cast<float>(c1 * 3)));
  params_.add("ds2_b", Tensor::zeros({c2, 1}));
  register_resblock(params_, "rb_mid", c2, c2, cond_total, rng);
  params_.add("us1_w", init({c1, c2, 3}, static_cast<float>(c2 * 3)));
  params_.add("us1_b", Tensor::zeros({c1, 1}));
  register_resblock(params_, "rb_u1", 2 * c1, c1, cond_total, rng);
  params_.add("us2_w", init({c0, c1, 3}, static_cast<float>(c1 * 3)));
  params_.add("us2_b", Tensor::zeros({c0, 1}));
  register_resblock(params_, "rb_u2", 2 * c0, c0, cond_total, rng);
  params_.add("out_gn_g", Tensor::full({c0, 1}, 1.0f));
  params_.add("out_gn_b", Tensor::zeros({c0, 1}));
  // zero-initialized output projection: the untrained model predicts zero
  params_.add("out_w", Tensor::zeros({cfg_.tokens, c0, 3}));
  params_.add("out_b", Tensor::zeros({cfg_.tokens, 1}));
}

Tensor Denoiser::predict(const Tensor& z_t, const std::vector<int>& t,
                         const Tensor& cond) const {
  if (z_t.rank() != 3 || z_t.dim(1) != cfg_.tokens ||
      z_t.dim(2) != cfg_.token_width) {
    throw std::invalid_argument("predict: z_t shape mismatch");
  }
  if (static_cast<int>(t.size()) != z_t.dim(0) || cond.rank() != 2 ||
      cond.dim(0) != z_t.dim(0) || cond.dim(1) != cfg_.cond_dim) {
    throw std::invalid_argument("predict: batch/condition shape mismatch");
  }
  Graph g;
  DenoiserVars v = bind_denoiser(g, params_, false, nullptr);
  Var out = denoiser_forward(g, v, cfg_, z_t.clone(),
                             sinusoidal_embedding(t, cfg_.time_embed_dim),
                             cond.clone());
  return out.value();
}

Tensor Denoiser::predict_one(const Tensor& z_t, int t,
                             const Eigen::VectorXf& cond) const {
  Tensor z = z_t.reshaped({1, cfg_.tokens, cfg_.token_width});
  Tensor c = Tensor::uninit({1, cfg_.cond_dim});
  if (cond.size() != cfg_.cond_dim) {
    throw std::invalid_argument("predict_one: condition dim mismatch");
  }
  c.mut() = cond;
  const Tensor out = predict(z, {t}, c);
  return out.reshaped({cfg_.tokens, cfg_.token_width});
}

void Denoiser::set_latent_stats(float mean, float std) {
  latent_mean_ = mean;
  latent_std_ = std;
}

void Denoiser::save(const std::filesystem::path& path) const {
  Json extra = {{"kind", "denoiser"},
                {"tokens", cfg_.tokens},
                {"token_width", cfg_.token_width},
                {"cond_dim", cfg_.cond_dim},
                {"time_embed_dim", cfg_.time_embed_dim},
                {"channels", cfg_.channels},
                {"groups", cfg_.groups},
                {"train_steps", cfg_.train_steps},
                {"latent_mean", latent_mean_},
                {"latent_std", latent_std_}};
  save_param_set(path, params_, std::move(extra));
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  ParamSet loaded;
  Json header = load_param_set(path, &loaded);
  DenoiserConfig cfg;
  cfg.tokens = header.at("tokens").get<int>();
  cfg.token_width = header.at("token_width").get<int>();
  cfg.cond_dim = header.at("cond_dim").get<int>();
  cfg.time_embed_dim = header.at("time_embed_dim").get<int>();
  cfg.channels = header.at("channels").get<std::vector<int>>();
  cfg.groups = header.at("groups").get<int>();
  cfg.train_steps = header.at("train_steps").get<int>();
  Denoiser d(cfg, 0);
  d.params_ = std::move(loaded);
  d.latent_mean_ = header.at("latent_mean").get<float>();
  d.latent_std_ = header.at("latent_std").get<float>();
  return d;
}

DiffusionTrainResult train_diffusion(Denoiser& denoiser,
                                     const NoiseSchedule& schedule,
                                     const std::vector<Tensor>& latents,
                                     const std::vector<Eigen::VectorXf>& conds,
                                     std::uint64_t seed) {
  if (latents.empty() || latents.size() != conds.size()) {
    throw std::invalid_argument("train_diffusion: empty or mismatched dataset");
  }
  const DenoiserConfig& cfg = denoiser.config();
  const int tokens = cfg.tokens;
  const int width = cfg.token_width;
  const Eigen::Index sample_size = static_cast<Eigen::Index>(tokens) * width;
  for (const Tensor& z : latents) {
    if (z.rank() != 2 || z.dim(0) != tokens || z.dim(1) != width) {
      throw std::invalid_argument("train_diffusion: latent shape mismatch");
    }
  }
  // scalar standardization fitted on the corpus
  double acc = 0.0, acc2 = 0.0;
  for (const Tensor& z : latents) {
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      acc += z[i];
      acc2 += static_cast<double>(z[i]) * z[i];
    }
  }
  const double count = static_cast<double>(latents.size()) * sample_size;
  const float mean = static_cast<float>(acc / count);
  const float std_dev = static_cast<float>(
      std::sqrt(std::max(1e-12, acc2 / count - (acc / count) * (acc / count))));
  denoiser.set_latent_stats(mean, std_dev);

  std::vector<Tensor> zs(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    Tensor z = Tensor::uninit({tokens, width});
    z.mut() = (latents[i].flat() - mean) / std_dev;
    zs[i] = std::move(z);
  }

  AdamW opt({.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2,
             .eps = cfg.eps, .weight_decay = cfg.weight_decay});
  opt.init(denoiser.weights().values);
  Rng shuffle_rng(derive_seed(seed, "diff-shuffle"));
  Rng noise_rng(derive_seed(seed, "diff-noise"));

  std::vector<std::size_t> order(zs.size());
  std::iota(order.begin(), order.end(), 0);
  const long steps_per_epoch =
      static_cast<long>((zs.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.epochs;

  DiffusionTrainResult result;
  long global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const int bsz = static_cast<int>(
          std::min<std::size_t>(cfg.batch_size, order.size() - start));
      opt.set_lr(static_cast<float>(warmup_cosine_lr(
          cfg.lr, global_step, cfg.lr_warmup_steps, total_steps)));

      // per-sample timid draws in fixed order: t uniform in {1..T}, eps N(0,I)
      Tensor zt = Tensor::uninit({bsz, tokens, width});
      Tensor target = Tensor::uninit({bsz, tokens, width});
      Tensor cond = Tensor::uninit({bsz, cfg.cond_dim});
      std::vector<int> ts(static_cast<std::size_t>(bsz));
      for (int b = 0; b < bsz; ++b) {
        const std::size_t idx = order[start + static_cast<std::size_t>(b)];
        const int t = 1 + static_cast<int>(noise_rng.uniform_int(
                              static_cast<std::uint64_t>(schedule.num_steps())));
        ts[static_cast<std::size_t>(b)] = t;
        const float ab = schedule.alpha_bar(t);
        const float sa = std::sqrt(ab);
        const float sb = std::sqrt(1.0f - ab);
        auto ztb = zt.mut().segment(static_cast<Eigen::Index>(b) * sample_size,
                                    sample_size);
        auto tb = target.mut().segment(
            static_cast<Eigen::Index>(b) * sample_size, sample_size);
        const auto z0 = zs[idx].flat();
        for (Eigen::Index i = 0; i < sample_size; ++i) {
          const float e = noise_rng.normalf();
          tb[i] = e;
          ztb[i] = sa * z0[i] + sb * e;
        }
        if (conds[idx].size() != cfg.cond_dim) {
          throw std::invalid_argument("train_diffusion: condition dim mismatch");
        }
        cond.mut().segment(static_cast<Eigen::Index>(b) * cfg.cond_dim,
                           cfg.cond_dim) = conds[idx];
      }

      const int shards = std::max(1, std::min(cfg.shards, bsz));
      struct ShardOut {
        float loss = 0.0f;
        std::vector<Tensor> grads;
      };
      std::vector<ShardOut> outs(static_cast<std::size_t>(shards));
      const float norm = static_cast<float>(bsz) * sample_size;
      parallel_for(shards, [&](int s) {
        const int lo = bsz * s / shards;
        const int hi = bsz * (s + 1) / shards;
        if (lo == hi) return;
        const int rows = hi - lo;
        Tensor zs_shard = Tensor::uninit({rows, tokens, width});
        zs_shard.mut() = zt.flat().segment(
            static_cast<Eigen::Index>(lo) * sample_size,
            static_cast<Eigen::Index>(rows) * sample_size);
        Tensor cond_shard = Tensor::uninit({rows, cfg.cond_dim});
        cond_shard.mut() =
            cond.flat().segment(static_cast<Eigen::Index>(lo) * cfg.cond_dim,
                                static_cast<Eigen::Index>(rows) * cfg.cond_dim);
        std::vector<int> t_shard(ts.begin() + lo, ts.begin() + hi);
        Tensor tgt = Tensor::uninit({rows, tokens, width});
        tgt.mut() = target.flat().segment(
            static_cast<Eigen::Index>(lo) * sample_size,
            static_cast<Eigen::Index>(rows) * sample_size);
        Graph g;
        std::vector<int> leaves;
        DenoiserVars v = bind_denoiser(g, denoiser.weights(), true, &leaves);
        Var pred = denoiser_forward(
            g, v, cfg, std::move(zs_shard),
            sinusoidal_embedding(t_shard, cfg.time_embed_dim),
            std::move(cond_shard));
        Var diff = sub(pred, Var{&g, g.input(std::move(tgt))});
        Var loss = scalar_mul(reduce_sum(mul(diff, diff)), 1.0f / norm);
        g.backward(loss.id);
        ShardOut& out = outs[static_cast<std::size_t>(s)];
        out.loss = loss.value().value();
        for (int leaf : leaves) out.grads.push_back(g.grad(leaf));
      });

      std::vector<Tensor> grads;
      float loss_val = 0.0f;
      for (const ShardOut& so : outs) {
        if (so.grads.empty()) continue;
        loss_val += so.loss;
        if (grads.empty()) {
          for (const Tensor& t : so.grads) grads.push_back(t.clone());
        } else {
          for (std::size_t k = 0; k < grads.size(); ++k) {
            grads[k].mut() += so.grads[k].flat();
          }
        }
      }
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("train_diffusion: non-finite loss");
      }
      opt.step(denoiser.weights().values, grads);
      epoch_loss += loss_val;
      ++batches;
      ++global_step;
    }
    result.loss_curve.push_back(static_cast<float>(epoch_loss / batches));
  }
  return result;
}

namespace {

std::vector<int> inference_steps(int t_max, int s) {
  // evenly spaced ascending subsequence of {1..T}, last element == T
  std::vector<int> ts(static_cast<std::size_t>(s));
  for (int i = 0; i < s; ++i) {
    ts[static_cast<std::size_t>(i)] =
        static_cast<int>(static_cast<long>(t_max) * (i + 1) / s);
  }
  return ts;
}

Tensor ddim_loop(Tensor z_start, const NoiseSchedule& schedule,
                 const SamplerConfig& sampler,
                 const std::function<Tensor(const Tensor&, int)>& predict) {
  if (sampler.num_inference_steps < 1 ||
      sampler.num_inference_steps > schedule.num_steps()) {
    throw std::invalid_argument("ddim: S must be within [1, T]");
  }
  const std::vector<int> ts =
      inference_steps(schedule.num_steps(), sampler.num_inference_steps);
  // double accumulators: the x0 estimate divides by sqrt(alpha_bar), which is
  // tiny at high t, so float rounding would otherwise be amplified
  Eigen::ArrayXd z = z_start.flat().cast<double>();
  Tensor z_f = z_start.clone();
  for (int i = sampler.num_inference_steps - 1; i >= 0; --i) {
    const int t = ts[static_cast<std::size_t>(i)];
    const int t_prev = i > 0 ? ts[static_cast<std::size_t>(i - 1)] : 0;
    z_f.mut() = z.cast<float>();
    const Tensor eps_hat_f = predict(z_f, t);
    const Eigen::ArrayXd eps_hat = eps_hat_f.flat().cast<double>();
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const Eigen::ArrayXd x0 = (z - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
    z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_hat;
  }
  z_f.mut() = z.cast<float>();
  return z_f;
}

}  // namespace

Tensor ddim_sample(const Eigen::VectorXf& cond, const Denoiser& denoiser,
                   const NoiseSchedule& schedule, const SamplerConfig& sampler,
                   std::uint64_t noise_seed) {
  const DenoiserConfig& cfg = denoiser.config();
  Rng rng(derive_seed(noise_seed, "ddim-start"));
  Tensor z = Tensor::uninit({cfg.tokens, cfg.token_width});
  for (Eigen::Index i = 0; i < z.size(); ++i) z.mut()[i] = rng.normalf();
  z = ddim_loop(std::move(z), schedule, sampler,
                [&](const Tensor& zt, int t) {
                  return denoiser.predict_one(zt, t, cond);
                });
  Tensor out = Tensor::uninit(z.shape());
  out.mut() = z.flat() * denoiser.latent_std() + denoiser.latent_mean();
  if (!out.all_finite()) throw std::runtime_error("ddim_sample: non-finite tokens");
  return out;
}

Tensor ddim_sample_with_oracle(
    const Tensor& z_start, const NoiseSchedule& schedule,
    const SamplerConfig& sampler,
    const std::function<Tensor(const Tensor&, int)>& predict) {
  return ddim_loop(z_start.clone(), schedule, sampler, predict);
}

std::vector<ParamVector> generate_policies(
    const std::vector<Trajectory>& conditions, const ParamCodec& codec,
    const BehaviorEmbedder& embedder, const Denoiser& denoiser,
    const NoiseSchedule& schedule, const SamplerConfig& sampler,
    const std::vector<std::uint64_t>& noise_seeds) {
  const DenoiserConfig& cfg = denoiser.config();
  if (2 * embedder.config().d_embed != cfg.cond_dim) {
    throw std::invalid_argument(
        "generate_policies: embedder/denoiser condition dims disagree");
  }
  if (codec.config().num_chunks != cfg.tokens ||
      codec.config().d_latent != cfg.token_width) {
    throw std::invalid_argument(
        "generate_policies: codec/denoiser token dims disagree");
  }
  std::vector<ParamVector> out(conditions.size() * noise_seeds.size());
  std::vector<Eigen::VectorXf> conds(conditions.size());
  parallel_for(static_cast<int>(conditions.size()), [&](int i) {
    conds[static_cast<std::size_t>(i)] =
        embedder.embed_trajectory(conditions[static_cast<std::size_t>(i)])
            .condition;
  });
  const int total = static_cast<int>(out.size());
  parallel_for(total, [&](int k) {
    const std::size_t ci = static_cast<std::size_t>(k) / noise_seeds.size();
    const std::size_t si = static_cast<std::size_t>(k) % noise_seeds.size();
    const Tensor tokens = ddim_sample(conds[ci], denoiser, schedule, sampler,
                                      noise_seeds[si] ^ (0x9e3779b97f4a7c15ull *
                                                         (ci + 1)));
    out[static_cast<std::size_t>(k)] = codec.decode(tokens);
  });
  return out;
}

}  // namespace policyforge
