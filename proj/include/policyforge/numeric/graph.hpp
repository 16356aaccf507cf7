#ifndef POLICYFORGE_NUMERIC_GRAPH_HPP_
#define POLICYFORGE_NUMERIC_GRAPH_HPP_

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "policyforge/numeric/tensor.hpp"

namespace policyforge {

// Reverse-mode tape. Nodes are appended in execution order (so the record is
// topologically sorted by construction); each node keeps its op kind, input
// ids, the produced value and whatever activations its backward needs.
// Leaves are trainable parameters; plain inputs never receive gradients.
template <typename Scalar>
class GraphT {
 public:
  using Tensor = TensorT<Scalar>;
  using BackwardFn = std::function<void(GraphT&, int)>;

  struct Node {
    const char* op;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;           // allocated lazily during backward
    std::vector<Tensor> aux;  // saved intermediates
    bool needs_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  int leaf(Tensor value) {
    const int id = push("leaf", {}, std::move(value), true);
    nodes_[id].is_leaf = true;
    leaves_.push_back(id);
    return id;
  }

  int input(Tensor value) { return push("input", {}, std::move(value), false); }

  const Tensor& value(int id) const { return at(id).value; }
  const char* op_name(int id) const { return at(id).op; }
  const std::vector<int>& inputs_of(int id) const { return at(id).inputs; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  const std::vector<int>& leaves() const { return leaves_; }

  void set_check_finite(bool on) { check_finite_ = on; }

  // Gradient of the given node after backward(); zeros if the loss never
  // touched it.
  Tensor grad(int id) const {
    const Node& n = at(id);
    if (n.grad.defined()) return n.grad;
    return Tensor::zeros(n.value.shape());
  }

  void backward(int loss_id) {
    if (nodes_.empty()) {
      throw std::runtime_error("backward: graph has no forward pass");
    }
    const Node& loss = at(loss_id);
    if (loss.value.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar");
    }
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[loss_id].grad = Tensor::full({1}, Scalar(1));
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.grad.defined() || !n.needs_grad || !n.backward) continue;
      n.backward(*this, id);
    }
    if (check_finite_) {
      for (int id : leaves_) {
        if (nodes_[id].grad.defined() && !nodes_[id].grad.all_finite()) {
          throw std::runtime_error("backward: non-finite gradient");
        }
      }
    }
  }

  // --- used by op implementations ---

  int push(const char* op, std::vector<int> inputs, Tensor value,
           bool needs_grad) {
    if (check_finite_ && !value.all_finite()) {
      throw std::runtime_error(std::string("forward: non-finite output in ") + op);
    }
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& at_mut(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& at(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  bool any_needs_grad(const std::vector<int>& ids) const {
    for (int id : ids) {
      if (at(id).needs_grad) return true;
    }
    return false;
  }

  // Mutable gradient accumulator for a node, zero-initialized on first use.
  typename Tensor::FlatMap grad_buf(int id) {
    Node& n = at_mut(id);
    if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad.mut();
  }

 private:
  std::vector<Node> nodes_;
  std::vector<int> leaves_;
  bool check_finite_ = false;
};

using Graph = GraphT<float>;

// Lightweight handle used by the op free functions.
template <typename Scalar>
struct VarT {
  GraphT<Scalar>* g = nullptr;
  int id = -1;
  const TensorT<Scalar>& value() const { return g->value(id); }
  bool valid() const { return g != nullptr && id >= 0; }
};

using Var = VarT<float>;

namespace detail {

template <typename Scalar>
void check_same_graph(const VarT<Scalar>& a, const VarT<Scalar>& b) {
  if (a.g != b.g) throw std::invalid_argument("ops: vars from different graphs");
}

inline void shape_error(const char* op, const std::string& a,
                        const std::string& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a +
                              " vs " + b);
}

// Broadcast patterns accepted by add/mul. Kept explicit: these are the only
// forms the model code uses.
enum class Bcast {
  kSame,      // identical shapes
  kRow,       // [N,D] op [D] or [1,D]
  kChannel,   // [B,C,L] op [C,1]
  kPerSample  // [B,C,L] op [B,C,1]
};

template <typename Scalar>
Bcast classify_bcast(const char* op, const TensorT<Scalar>& a,
                     const TensorT<Scalar>& b) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() == 2) {
    if (bs.size() == 1 && bs[0] == as[1]) return Bcast::kRow;
    if (bs.size() == 2 && bs[0] == 1 && bs[1] == as[1]) return Bcast::kRow;
  }
  if (as.size() == 3) {
    if (bs.size() == 2 && bs[0] == as[1] && bs[1] == 1) return Bcast::kChannel;
    if (bs.size() == 3 && bs[0] == as[0] && bs[1] == as[1] && bs[2] == 1) {
      return Bcast::kPerSample;
    }
  }
  shape_error(op, a.shape_str(), b.shape_str());
  return Bcast::kSame;  // unreachable
}

}  // namespace detail

// ---- element-wise and broadcast arithmetic ----

template <typename Scalar>
VarT<Scalar> add(VarT<Scalar> a, VarT<Scalar> b) {
  using T = TensorT<Scalar>;
  detail::check_same_graph(a, b);
  GraphT<Scalar>& g = *a.g;
  const T& av = a.value();
  const T& bv = b.value();
  const auto form = detail::classify_bcast("add", av, bv);
  T out = T::uninit(av.shape());
  switch (form) {
    case detail::Bcast::kSame:
      out.mut() = av.flat() + bv.flat();
      break;
    case detail::Bcast::kRow: {
      const int n = av.dim(0), d = av.dim(1);
      out.view_mut(n, d) = av.view(n, d).rowwise() + bv.view(1, d).row(0);
      break;
    }
    case detail::Bcast::kChannel: {
      const int bsz = av.dim(0), c = av.dim(1), l = av.dim(2);
      for (int i = 0; i < bsz; ++i) {
        out.view_mut(bsz * c, l).middleRows(i * c, c) =
            av.view(bsz * c, l).middleRows(i * c, c).colwise() +
            bv.view(c, 1).col(0);
      }
      break;
    }
    case detail::Bcast::kPerSample: {
      const int bsz = av.dim(0), c = av.dim(1), l = av.dim(2);
      for (int i = 0; i < bsz; ++i) {
        out.view_mut(bsz * c, l).middleRows(i * c, c) =
            av.view(bsz * c, l).middleRows(i * c, c).colwise() +
            bv.view(bsz * c, 1).col(0).segment(i * c, c);
      }
      break;
    }
  }
  const bool ng = g.any_needs_grad({a.id, b.id});
  const int id = g.push("add", {a.id, b.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [form](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      const T& d = n.grad;
      const int ia = n.inputs[0], ib = n.inputs[1];
      if (gr.at(ia).needs_grad) gr.grad_buf(ia) += d.flat();
      if (!gr.at(ib).needs_grad) return;
      const T& bv = gr.at(ib).value;
      auto db = gr.grad_buf(ib);
      switch (form) {
        case detail::Bcast::kSame:
          db += d.flat();
          break;
        case detail::Bcast::kRow: {
          const int rows = n.value.dim(0), cols = n.value.dim(1);
          Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(db.data(), cols) +=
              d.view(rows, cols).colwise().sum();
          break;
        }
        case detail::Bcast::kChannel: {
          const int bsz = n.value.dim(0), c = n.value.dim(1), l = n.value.dim(2);
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dbv(db.data(), c);
          for (int i = 0; i < bsz; ++i) {
            dbv += d.view(bsz * c, l).middleRows(i * c, c).rowwise().sum();
          }
          break;
        }
        case detail::Bcast::kPerSample: {
          const int bsz = n.value.dim(0), c = n.value.dim(1), l = n.value.dim(2);
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dbv(db.data(),
                                                                   bsz * c);
          for (int i = 0; i < bsz; ++i) {
            dbv.segment(i * c, c) +=
                d.view(bsz * c, l).middleRows(i * c, c).rowwise().sum();
          }
          break;
        }
      }
      (void)bv;
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> mul(VarT<Scalar> a, VarT<Scalar> b) {
  using T = TensorT<Scalar>;
  detail::check_same_graph(a, b);
  GraphT<Scalar>& g = *a.g;
  const T& av = a.value();
  const T& bv = b.value();
  const auto form = detail::classify_bcast("mul", av, bv);
  T out = T::uninit(av.shape());
  switch (form) {
    case detail::Bcast::kSame:
      out.mut() = av.flat() * bv.flat();
      break;
    case detail::Bcast::kRow: {
      const int n = av.dim(0), d = av.dim(1);
      out.view_mut(n, d) =
          av.view(n, d).array().rowwise() * bv.view(1, d).row(0).array();
      break;
    }
    case detail::Bcast::kChannel: {
      const int bsz = av.dim(0), c = av.dim(1), l = av.dim(2);
      for (int i = 0; i < bsz; ++i) {
        out.view_mut(bsz * c, l).middleRows(i * c, c) =
            (av.view(bsz * c, l).middleRows(i * c, c).array().colwise() *
             bv.view(c, 1).col(0).array())
                .matrix();
      }
      break;
    }
    case detail::Bcast::kPerSample: {
      const int bsz = av.dim(0), c = av.dim(1), l = av.dim(2);
      for (int i = 0; i < bsz; ++i) {
        out.view_mut(bsz * c, l).middleRows(i * c, c) =
            (av.view(bsz * c, l).middleRows(i * c, c).array().colwise() *
             bv.view(bsz * c, 1).col(0).segment(i * c, c).array())
                .matrix();
      }
      break;
    }
  }
  const bool ng = g.any_needs_grad({a.id, b.id});
  const int id = g.push("mul", {a.id, b.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [form](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      const T& d = n.grad;
      const int ia = n.inputs[0], ib = n.inputs[1];
      const T& av = gr.at(ia).value;
      const T& bv = gr.at(ib).value;
      const bool need_a = gr.at(ia).needs_grad;
      const bool need_b = gr.at(ib).needs_grad;
      switch (form) {
        case detail::Bcast::kSame:
          if (need_a) gr.grad_buf(ia) += d.flat() * bv.flat();
          if (need_b) gr.grad_buf(ib) += d.flat() * av.flat();
          break;
        case detail::Bcast::kRow: {
          const int rows = av.dim(0), cols = av.dim(1);
          if (need_a) {
            gr.grad_buf(ia);
            gr.at_mut(ia).grad.view_mut(rows, cols).array() +=
                d.view(rows, cols).array().rowwise() *
                bv.view(1, cols).row(0).array();
          }
          if (need_b) {
            auto db = gr.grad_buf(ib);
            Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> dbv(db.data(),
                                                                     cols);
            dbv += (d.view(rows, cols).array() * av.view(rows, cols).array())
                       .colwise()
                       .sum()
                       .matrix();
          }
          break;
        }
        case detail::Bcast::kChannel:
        case detail::Bcast::kPerSample: {
          const int bsz = av.dim(0), c = av.dim(1), l = av.dim(2);
          const bool per_sample = form == detail::Bcast::kPerSample;
          if (need_a) gr.grad_buf(ia);
          if (need_b) gr.grad_buf(ib);
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> scale(c);
          for (int i = 0; i < bsz; ++i) {
            if (per_sample) {
              scale = bv.view(bsz * c, 1).col(0).segment(i * c, c);
            } else {
              scale = bv.view(c, 1).col(0);
            }
            if (need_a) {
              gr.at_mut(ia).grad.view_mut(bsz * c, l).middleRows(i * c, c) +=
                  (d.view(bsz * c, l).middleRows(i * c, c).array().colwise() *
                   scale.array())
                      .matrix();
            }
            if (need_b) {
              auto db = gr.at_mut(ib).grad.mut();
              Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dbv(
                  db.data(), per_sample ? bsz * c : c);
              const auto contrib =
                  (d.view(bsz * c, l).middleRows(i * c, c).array() *
                   av.view(bsz * c, l).middleRows(i * c, c).array())
                      .rowwise()
                      .sum()
                      .matrix();
              if (per_sample) {
                dbv.segment(i * c, c) += contrib;
              } else {
                dbv += contrib;
              }
            }
          }
          break;
        }
      }
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> scalar_mul(VarT<Scalar> x, Scalar c) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  T out = T::uninit(x.value().shape());
  out.mut() = x.value().flat() * c;
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("scalar_mul", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [c](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]) += n.grad.flat() * c;
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> scalar_add(VarT<Scalar> x, Scalar c) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  T out = T::uninit(x.value().shape());
  out.mut() = x.value().flat() + c;
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("scalar_add", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]) += n.grad.flat();
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> sub(VarT<Scalar> a, VarT<Scalar> b) {
  return add(a, scalar_mul(b, Scalar(-1)));
}

// ---- linear algebra ----

template <typename Scalar>
VarT<Scalar> matmul(VarT<Scalar> a, VarT<Scalar> b) {
  using T = TensorT<Scalar>;
  detail::check_same_graph(a, b);
  GraphT<Scalar>& g = *a.g;
  const T& av = a.value();
  const T& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    detail::shape_error("matmul", av.shape_str(), bv.shape_str());
  }
  T out = T::uninit({av.dim(0), bv.dim(1)});
  out.mat_mut().noalias() = av.mat() * bv.mat();
  const bool ng = g.any_needs_grad({a.id, b.id});
  const int id = g.push("matmul", {a.id, b.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      const int ia = n.inputs[0], ib = n.inputs[1];
      const T& av = gr.at(ia).value;
      const T& bv = gr.at(ib).value;
      const int r = n.value.dim(0), c = n.value.dim(1);
      if (gr.at(ia).needs_grad) {
        gr.grad_buf(ia);
        gr.at_mut(ia).grad.mat_mut().noalias() +=
            n.grad.view(r, c) * bv.mat().transpose();
      }
      if (gr.at(ib).needs_grad) {
        gr.grad_buf(ib);
        gr.at_mut(ib).grad.mat_mut().noalias() +=
            av.mat().transpose() * n.grad.view(r, c);
      }
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> transpose(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  const T& xv = x.value();
  if (xv.rank() != 2) detail::shape_error("transpose", xv.shape_str(), "[r,c]");
  T out = T::uninit({xv.dim(1), xv.dim(0)});
  out.mat_mut() = xv.mat().transpose();
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("transpose", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]);
      gr.at_mut(n.inputs[0]).grad.mat_mut() += n.grad.mat().transpose();
    };
  }
  return {&g, id};
}

// ---- activations ----

template <typename Scalar>
VarT<Scalar> tanh(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  T out = T::uninit(x.value().shape());
  out.mut() = x.value().flat().tanh();
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("tanh", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]) +=
          n.grad.flat() * (Scalar(1) - n.value.flat().square());
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> relu(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  T out = T::uninit(x.value().shape());
  out.mut() = x.value().flat().max(Scalar(0));
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("relu", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      const T& xv = gr.at(n.inputs[0]).value;
      gr.grad_buf(n.inputs[0]) +=
          n.grad.flat() * (xv.flat() > Scalar(0)).template cast<Scalar>();
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> silu(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  const T& xv = x.value();
  T sig = T::uninit(xv.shape());
  sig.mut() = Scalar(1) / (Scalar(1) + (-xv.flat()).exp());
  T out = T::uninit(xv.shape());
  out.mut() = xv.flat() * sig.flat();
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("silu", {x.id}, std::move(out), ng);
  g.at_mut(id).aux.push_back(std::move(sig));
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      const T& xv = gr.at(n.inputs[0]).value;
      const T& s = n.aux[0];
      gr.grad_buf(n.inputs[0]) +=
          n.grad.flat() *
          (s.flat() * (Scalar(1) + xv.flat() * (Scalar(1) - s.flat())));
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> log(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  T out = T::uninit(x.value().shape());
  out.mut() = x.value().flat().log();
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("log", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      const T& xv = gr.at(n.inputs[0]).value;
      gr.grad_buf(n.inputs[0]) += n.grad.flat() / xv.flat();
    };
  }
  return {&g, id};
}

// ---- softmax over the last axis ----

template <typename Scalar>
VarT<Scalar> softmax(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  const T& xv = x.value();
  if (xv.rank() < 1) detail::shape_error("softmax", xv.shape_str(), "rank>=1");
  const int cols = xv.dim(xv.rank() - 1);
  const int rows = static_cast<int>(xv.size()) / cols;
  T out = T::uninit(xv.shape());
  for (int r = 0; r < rows; ++r) {
    auto row_in = xv.view(rows, cols).row(r).array();
    auto row_out = out.view_mut(rows, cols).row(r);
    const Scalar m = row_in.maxCoeff();
    row_out = (row_in - m).exp().matrix();
    row_out /= row_out.sum();
  }
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("softmax", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [rows, cols](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]);
      auto dx = gr.at_mut(n.inputs[0]).grad.view_mut(rows, cols);
      const auto y = n.value.view(rows, cols);
      const auto dy = n.grad.view(rows, cols);
      for (int r = 0; r < rows; ++r) {
        const Scalar dot = (dy.row(r).array() * y.row(r).array()).sum();
        dx.row(r).array() +=
            y.row(r).array() * (dy.row(r).array() - dot);
      }
    };
  }
  return {&g, id};
}

// ---- reductions ----

template <typename Scalar>
VarT<Scalar> reduce_sum(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  T out = T::scalar(x.value().flat().sum());
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("reduce_sum", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]) += n.grad.value();
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> reduce_mean(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.value().size());
  T out = T::scalar(x.value().flat().sum() * inv);
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("reduce_mean", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [inv](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]) += n.grad.value() * inv;
    };
  }
  return {&g, id};
}

// ---- shape ops ----

template <typename Scalar>
VarT<Scalar> reshape(VarT<Scalar> x, std::vector<int> shape) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  T out = x.value().reshaped(std::move(shape));
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("reshape", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      gr.grad_buf(n.inputs[0]) += n.grad.flat();
    };
  }
  return {&g, id};
}

namespace detail {

inline void axis_extents(const std::vector<int>& shape, int axis, int* outer,
                         int* inner) {
  *outer = 1;
  *inner = 1;
  for (int i = 0; i < axis; ++i) *outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    *inner *= shape[i];
  }
}

}  // namespace detail

template <typename Scalar>
VarT<Scalar> slice(VarT<Scalar> x, int axis, int start, int len) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  const T& xv = x.value();
  if (axis < 0 || axis >= xv.rank() || start < 0 || len <= 0 ||
      start + len > xv.dim(axis)) {
    throw std::invalid_argument("slice: range out of bounds for " +
                                xv.shape_str());
  }
  int outer, inner;
  detail::axis_extents(xv.shape(), axis, &outer, &inner);
  std::vector<int> oshape = xv.shape();
  oshape[static_cast<std::size_t>(axis)] = len;
  T out = T::uninit(oshape);
  const int d = xv.dim(axis);
  for (int o = 0; o < outer; ++o) {
    out.mut().segment(static_cast<Eigen::Index>(o) * len * inner, len * inner) =
        xv.flat().segment(
            (static_cast<Eigen::Index>(o) * d + start) * inner, len * inner);
  }
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("slice", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [axis, start, len, outer, inner, d](
                                GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      auto dx = gr.grad_buf(n.inputs[0]);
      for (int o = 0; o < outer; ++o) {
        dx.segment((static_cast<Eigen::Index>(o) * d + start) * inner,
                   len * inner) +=
            n.grad.flat().segment(static_cast<Eigen::Index>(o) * len * inner,
                                  len * inner);
      }
      (void)axis;
    };
  }
  return {&g, id};
}

template <typename Scalar>
VarT<Scalar> concat(const std::vector<VarT<Scalar>>& xs, int axis) {
  using T = TensorT<Scalar>;
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  GraphT<Scalar>& g = *xs[0].g;
  const int rank = xs[0].value().rank();
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: bad axis");
  std::vector<int> oshape = xs[0].value().shape();
  int total = 0;
  for (const auto& x : xs) {
    detail::check_same_graph(xs[0], x);
    const T& v = x.value();
    if (v.rank() != rank) detail::shape_error("concat", v.shape_str(), "rank");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && v.dim(i) != oshape[static_cast<std::size_t>(i)]) {
        detail::shape_error("concat", v.shape_str(),
                            xs[0].value().shape_str());
      }
    }
    total += v.dim(axis);
  }
  oshape[static_cast<std::size_t>(axis)] = total;
  int outer, inner;
  detail::axis_extents(oshape, axis, &outer, &inner);
  T out = T::uninit(oshape);
  std::vector<int> ids;
  std::vector<int> widths;
  ids.reserve(xs.size());
  int off = 0;
  for (const auto& x : xs) {
    const T& v = x.value();
    const int w = v.dim(axis);
    for (int o = 0; o < outer; ++o) {
      out.mut().segment(
          (static_cast<Eigen::Index>(o) * total + off) * inner, w * inner) =
          v.flat().segment(static_cast<Eigen::Index>(o) * w * inner, w * inner);
    }
    ids.push_back(x.id);
    widths.push_back(w);
    off += w;
  }
  const bool ng = g.any_needs_grad(ids);
  const int id = g.push("concat", ids, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [widths, outer, inner, total](GraphT<Scalar>& gr,
                                                          int self) {
      const auto& n = gr.at(self);
      int off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const int w = widths[k];
        if (gr.at(n.inputs[k]).needs_grad) {
          auto dx = gr.grad_buf(n.inputs[k]);
          for (int o = 0; o < outer; ++o) {
            dx.segment(static_cast<Eigen::Index>(o) * w * inner, w * inner) +=
                n.grad.flat().segment(
                    (static_cast<Eigen::Index>(o) * total + off) * inner,
                    w * inner);
          }
        }
        off += w;
      }
    };
  }
  return {&g, id};
}

// ---- 1-d convolution, upsampling, group norm ----

namespace detail {

// im2col for [B,Cin,L] with kernel K, zero padding p, given stride.
// col is [B*Lo, Cin*K] row-major.
template <typename Scalar>
void im2col(const TensorT<Scalar>& x, int k, int stride, int pad, int lo,
            Scalar* col) {
  const int b = x.dim(0), cin = x.dim(1), l = x.dim(2);
  const Scalar* xp = x.data();
  for (int bi = 0; bi < b; ++bi) {
    for (int o = 0; o < lo; ++o) {
      Scalar* row = col + (static_cast<std::ptrdiff_t>(bi) * lo + o) * cin * k;
      const int base = o * stride - pad;
      for (int ci = 0; ci < cin; ++ci) {
        const Scalar* xc = xp + (static_cast<std::ptrdiff_t>(bi) * cin + ci) * l;
        for (int kk = 0; kk < k; ++kk) {
          const int idx = base + kk;
          row[ci * k + kk] = (idx >= 0 && idx < l) ? xc[idx] : Scalar(0);
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, int b, int cin, int l, int k, int stride,
                int pad, int lo, Scalar* dx) {
  for (int bi = 0; bi < b; ++bi) {
    for (int o = 0; o < lo; ++o) {
      const Scalar* row =
          col + (static_cast<std::ptrdiff_t>(bi) * lo + o) * cin * k;
      const int base = o * stride - pad;
      for (int ci = 0; ci < cin; ++ci) {
        Scalar* xc = dx + (static_cast<std::ptrdiff_t>(bi) * cin + ci) * l;
        for (int kk = 0; kk < k; ++kk) {
          const int idx = base + kk;
          if (idx >= 0 && idx < l) xc[idx] += row[ci * k + kk];
        }
      }
    }
  }
}

}  // namespace detail

// x: [B,Cin,L], w: [Cout,Cin,K]. Zero padding (K-1)/2; stride 1 keeps the
// length, stride 2 halves it (even L). Bias is a separate add.
template <typename Scalar>
VarT<Scalar> conv1d(VarT<Scalar> x, VarT<Scalar> w, int stride) {
  using T = TensorT<Scalar>;
  detail::check_same_graph(x, w);
  GraphT<Scalar>& g = *x.g;
  const T& xv = x.value();
  const T& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 3 || xv.dim(1) != wv.dim(1)) {
    detail::shape_error("conv1d", xv.shape_str(), wv.shape_str());
  }
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("conv1d: stride must be 1 or 2");
  }
  const int b = xv.dim(0), cin = xv.dim(1), l = xv.dim(2);
  const int cout = wv.dim(0), k = wv.dim(2);
  const int pad = (k - 1) / 2;
  const int lo = (l + 2 * pad - k) / stride + 1;
  if (lo <= 0) throw std::invalid_argument("conv1d: output length <= 0");

  T col = T::uninit({b * lo, cin * k});
  detail::im2col(xv, k, stride, pad, lo, col.data_mut());
  // y = col * wm^T, then transpose rows into channel-major layout
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> y =
      col.mat() * wv.view(cout, cin * k).transpose();
  T out = T::uninit({b, cout, lo});
  for (int bi = 0; bi < b; ++bi) {
    out.view_mut(b * cout, lo).middleRows(bi * cout, cout) =
        y.middleRows(bi * lo, lo).transpose();
  }
  const bool ng = g.any_needs_grad({x.id, w.id});
  const int id = g.push("conv1d", {x.id, w.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [stride, pad, k, lo](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      const int ix = n.inputs[0], iw = n.inputs[1];
      const T& xv = gr.at(ix).value;
      const T& wv = gr.at(iw).value;
      const int b = xv.dim(0), cin = xv.dim(1), l = xv.dim(2);
      const int cout = wv.dim(0);
      // dy back to [B*Lo, Cout]
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dy(
          b * lo, cout);
      for (int bi = 0; bi < b; ++bi) {
        dy.middleRows(bi * lo, lo) =
            n.grad.view(b * cout, lo).middleRows(bi * cout, cout).transpose();
      }
      T col = T::uninit({b * lo, cin * k});
      detail::im2col(xv, k, stride, pad, lo, col.data_mut());
      if (gr.at(iw).needs_grad) {
        gr.grad_buf(iw);
        gr.at_mut(iw).grad.view_mut(cout, cin * k).noalias() +=
            dy.transpose() * col.mat();
      }
      if (gr.at(ix).needs_grad) {
        Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
            dcol = dy * wv.view(cout, cin * k);
        auto dx = gr.grad_buf(ix);
        detail::col2im_add(dcol.data(), b, cin, l, k, stride, pad, lo,
                           dx.data());
      }
    };
  }
  return {&g, id};
}

// nearest-neighbor x2 upsample along the last axis of [B,C,L]
template <typename Scalar>
VarT<Scalar> upsample_nearest2(VarT<Scalar> x) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  const T& xv = x.value();
  if (xv.rank() != 3) detail::shape_error("upsample", xv.shape_str(), "[B,C,L]");
  const int rows = xv.dim(0) * xv.dim(1), l = xv.dim(2);
  T out = T::uninit({xv.dim(0), xv.dim(1), 2 * l});
  for (int r = 0; r < rows; ++r) {
    const Scalar* src = xv.data() + static_cast<std::ptrdiff_t>(r) * l;
    Scalar* dst = out.data_mut() + static_cast<std::ptrdiff_t>(r) * 2 * l;
    for (int i = 0; i < l; ++i) {
      dst[2 * i] = src[i];
      dst[2 * i + 1] = src[i];
    }
  }
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("upsample_nearest2", {x.id}, std::move(out), ng);
  if (ng) {
    g.at_mut(id).backward = [rows, l](GraphT<Scalar>& gr, int self) {
      const auto& n = gr.at(self);
      auto dx = gr.grad_buf(n.inputs[0]);
      const Scalar* dyp = n.grad.data();
      for (int r = 0; r < rows; ++r) {
        const Scalar* dyr = dyp + static_cast<std::ptrdiff_t>(r) * 2 * l;
        Scalar* dxr = dx.data() + static_cast<std::ptrdiff_t>(r) * l;
        for (int i = 0; i < l; ++i) dxr[i] += dyr[2 * i] + dyr[2 * i + 1];
      }
    };
  }
  return {&g, id};
}

// Group normalization over [B,C,L] without affine terms: each (sample, group)
// slab is whitened to zero mean and unit variance.
template <typename Scalar>
VarT<Scalar> group_norm(VarT<Scalar> x, int groups, Scalar eps = Scalar(1e-5)) {
  using T = TensorT<Scalar>;
  GraphT<Scalar>& g = *x.g;
  const T& xv = x.value();
  if (xv.rank() != 3) detail::shape_error("group_norm", xv.shape_str(), "[B,C,L]");
  const int b = xv.dim(0), c = xv.dim(1), l = xv.dim(2);
  if (groups <= 0 || c % groups != 0) {
    throw std::invalid_argument("group_norm: channels not divisible by groups");
  }
  const int gc = c / groups;
  const Eigen::Index m = static_cast<Eigen::Index>(gc) * l;
  T out = T::uninit(xv.shape());
  T inv_std = T::uninit({b * groups});
  for (int bi = 0; bi < b; ++bi) {
    for (int gi = 0; gi < groups; ++gi) {
      const Eigen::Index off = (static_cast<Eigen::Index>(bi) * c + gi * gc) * l;
      auto seg = xv.flat().segment(off, m);
      const Scalar mu = seg.mean();
      const Scalar var = (seg - mu).square().mean();
      const Scalar is = Scalar(1) / std::sqrt(var + eps);
      out.mut().segment(off, m) = (seg - mu) * is;
      inv_std.mut()[static_cast<Eigen::Index>(bi) * groups + gi] = is;
    }
  }
  const bool ng = g.at(x.id).needs_grad;
  const int id = g.push("group_norm", {x.id}, std::move(out), ng);
  g.at_mut(id).aux.push_back(std::move(inv_std));
  if (ng) {
    g.at_mut(id).backward = [b, c, l, groups, gc, m](GraphT<Scalar>& gr,
                                                     int self) {
      const auto& n = gr.at(self);
      auto dx = gr.grad_buf(n.inputs[0]);
      const T& y = n.value;
      const T& inv_std = n.aux[0];
      for (int bi = 0; bi < b; ++bi) {
        for (int gi = 0; gi < groups; ++gi) {
          const Eigen::Index off =
              (static_cast<Eigen::Index>(bi) * c + gi * gc) * l;
          auto dyseg = n.grad.flat().segment(off, m);
          auto yseg = y.flat().segment(off, m);
          const Scalar is = inv_std[static_cast<Eigen::Index>(bi) * groups + gi];
          const Scalar mean_dy = dyseg.mean();
          const Scalar mean_dyy = (dyseg * yseg).mean();
          dx.segment(off, m) +=
              is * (dyseg - mean_dy - yseg * mean_dyy);
        }
      }
    };
  }
  return {&g, id};
}

// operator sugar
template <typename Scalar>
VarT<Scalar> operator+(VarT<Scalar> a, VarT<Scalar> b) {
  return add(a, b);
}
template <typename Scalar>
VarT<Scalar> operator*(VarT<Scalar> a, VarT<Scalar> b) {
  return mul(a, b);
}
template <typename Scalar>
VarT<Scalar> operator-(VarT<Scalar> a, VarT<Scalar> b) {
  return sub(a, b);
}

}  // namespace policyforge

#endif  // POLICYFORGE_NUMERIC_GRAPH_HPP_
