#include "policyforge/policy/policy.hpp"

#include <cmath>
#include <stdexcept>

#include "policyforge/io/blob.hpp"

namespace policyforge {

std::pair<int, int> layer_extents(const PolicyArch& arch, int layer) {
  if (arch.hidden.empty() || arch.input_dim <= 0 || arch.action_dim <= 0) {
    throw std::invalid_argument("policy: invalid architecture");
  }
  const int n = arch.num_layers();
  if (layer < 0 || layer >= n) throw std::invalid_argument("policy: bad layer");
  const int in = layer == 0 ? arch.input_dim : arch.hidden[layer - 1];
  const int out = layer == n - 1 ? arch.output_dim() : arch.hidden[layer];
  return {in, out};
}

long param_count(const PolicyArch& arch) {
  long total = 0;
  for (int i = 0; i < arch.num_layers(); ++i) {
    const auto [in, out] = layer_extents(arch, i);
    total += static_cast<long>(in) * out + out;
  }
  return total;
}

std::vector<long> layer_offsets(const PolicyArch& arch) {
  std::vector<long> offsets(1, 0);
  for (int i = 0; i < arch.num_layers(); ++i) {
    const auto [in, out] = layer_extents(arch, i);
    offsets.push_back(offsets.back() + static_cast<long>(in) * out + out);
  }
  return offsets;
}

ParamVector flatten(const PolicyArch& arch,
                    const std::vector<LayerWeights>& layers) {
  if (static_cast<int>(layers.size()) != arch.num_layers()) {
    throw std::invalid_argument("flatten: layer count mismatch");
  }
  ParamVector p;
  p.arch = arch;
  p.values.resize(param_count(arch));
  long off = 0;
  for (int i = 0; i < arch.num_layers(); ++i) {
    const auto [in, out] = layer_extents(arch, i);
    if (layers[i].w.rows() != out || layers[i].w.cols() != in ||
        layers[i].b.size() != out) {
      throw std::invalid_argument("flatten: layer shape mismatch");
    }
    p.values.segment(off, static_cast<long>(in) * out) =
        Eigen::Map<const Eigen::VectorXf>(layers[i].w.data(),
                                          static_cast<long>(in) * out);
    off += static_cast<long>(in) * out;
    p.values.segment(off, out) = layers[i].b;
    off += out;
  }
  return p;
}

std::vector<LayerWeights> unflatten(const ParamVector& params) {
  if (params.values.size() != param_count(params.arch)) {
    throw std::invalid_argument("unflatten: length does not match architecture");
  }
  std::vector<LayerWeights> layers;
  long off = 0;
  for (int i = 0; i < params.arch.num_layers(); ++i) {
    const auto [in, out] = layer_extents(params.arch, i);
    LayerWeights lw;
    lw.w.resize(out, in);
    Eigen::Map<Eigen::VectorXf>(lw.w.data(), static_cast<long>(in) * out) =
        params.values.segment(off, static_cast<long>(in) * out);
    off += static_cast<long>(in) * out;
    lw.b = params.values.segment(off, out);
    off += out;
    layers.push_back(std::move(lw));
  }
  return layers;
}

DeployedPolicy::DeployedPolicy(const ParamVector& params)
    : arch_(params.arch), layers_(unflatten(params)) {}

Eigen::Vector2f DeployedPolicy::act(const Eigen::Matrix<float, 8, 1>& state) const {
  if (arch_.input_dim != 8) {
    throw std::invalid_argument("act: architecture input dim != state dim");
  }
  if (!state.allFinite()) throw std::invalid_argument("act: non-finite state");
  h0_ = (layers_[0].w * state + layers_[0].b).array().tanh();
  const Eigen::VectorXf* h = &h0_;
  for (std::size_t i = 1; i + 1 < layers_.size(); ++i) {
    h1_ = (layers_[i].w * (*h) + layers_[i].b).array().tanh();
    std::swap(h0_, h1_);
    h = &h0_;
  }
  const auto& out_layer = layers_.back();
  // mean head only; the log-std half is ignored at deployment
  Eigen::Vector2f mean = (out_layer.w.topRows(arch_.action_dim) * (*h) +
                          out_layer.b.head(arch_.action_dim));
  return mean.array().tanh();
}

Eigen::Vector2f act(const ParamVector& params,
                    const Eigen::Matrix<float, 8, 1>& state) {
  return DeployedPolicy(params).act(state);
}

void save_checkpoint(const std::filesystem::path& path,
                     const ParamVector& params) {
  Json header = {{"input_dim", params.arch.input_dim},
                 {"hidden", params.arch.hidden},
                 {"action_dim", params.arch.action_dim}};
  write_json_blob(path, "MAA1", header, params.values.data(),
                  static_cast<std::size_t>(params.values.size()));
}

ParamVector load_checkpoint(const std::filesystem::path& path) {
  JsonBlob blob = read_json_blob(path, "MAA1");
  ParamVector p;
  p.arch.input_dim = blob.header.at("input_dim").get<int>();
  p.arch.hidden = blob.header.at("hidden").get<std::vector<int>>();
  p.arch.action_dim = blob.header.at("action_dim").get<int>();
  const long n = param_count(p.arch);
  if (static_cast<long>(blob.data.size()) != n) {
    throw std::runtime_error("checkpoint blob length mismatch: " + path.string());
  }
  p.values = Eigen::Map<const Eigen::VectorXf>(blob.data.data(), n);
  return p;
}

}  // namespace policyforge
