#ifndef POLICYFORGE_NUMERIC_OPTIM_HPP_
#define POLICYFORGE_NUMERIC_OPTIM_HPP_

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "policyforge/numeric/tensor.hpp"

namespace policyforge {

// Named parameter tensors of one model, in registration order.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> values;

  int add(std::string name, Tensor value) {
    names.push_back(std::move(name));
    values.push_back(std::move(value));
    return static_cast<int>(values.size()) - 1;
  }

  std::size_t count() const { return values.size(); }

  Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<int>(i);
    }
    throw std::invalid_argument("ParamSet: unknown parameter " + name);
  }
};

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

// AdamW with decoupled multiplicative weight decay:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void init(const std::vector<Tensor>& params) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
    }
    step_count_ = 0;
  }

  long step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(float lr) { cfg_.lr = lr; }

  // Replaces each parameter with its updated value; the previous storage is
  // left untouched for any graph that still references it.
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (m_.empty()) init(params);
    if (params.size() != grads.size() || params.size() != m_.size()) {
      throw std::invalid_argument("adamw: parameter/gradient count mismatch");
    }
    ++step_count_;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step_count_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step_count_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].same_shape(grads[i])) {
        throw std::invalid_argument("adamw: shape mismatch at parameter " +
                                    std::to_string(i));
      }
      auto m = m_[i].mut();
      auto v = v_[i].mut();
      const auto g = grads[i].flat();
      m = cfg_.beta1 * m + (1.0f - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0f - cfg_.beta2) * g.square();
      Tensor updated = Tensor::uninit(params[i].shape());
      updated.mut() = params[i].flat() * (1.0f - cfg_.lr * cfg_.weight_decay) -
                      cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
      params[i] = std::move(updated);
    }
  }

 private:
  AdamWConfig cfg_;
  long step_count_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// lr = base * (1 + cos(pi * (epoch mod period) / period)) / 2
inline double cosine_warm_restarts_lr(double base_lr, double epoch,
                                      double period) {
  if (period <= 0) throw std::invalid_argument("lr schedule: period must be > 0");
  const double phase = std::fmod(epoch, period) / period;
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * phase));
}

// Linear warmup followed by a single cosine decay to zero.
inline double warmup_cosine_lr(double base_lr, long step, long warmup_steps,
                               long total_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  }
  const long span = std::max<long>(1, total_steps - warmup_steps);
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) /
                        static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace policyforge

#endif  // POLICYFORGE_NUMERIC_OPTIM_HPP_
