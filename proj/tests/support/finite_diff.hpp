#ifndef POLICYFORGE_TESTS_SUPPORT_FINITE_DIFF_HPP_
#define POLICYFORGE_TESTS_SUPPORT_FINITE_DIFF_HPP_

// Finite-difference gradient oracle. Runs every op on the double-precision
// instantiation of the graph so the h=1e-3 central difference is far above
// rounding noise, and compares reverse-mode gradients against it. This file
// is test-only and never linked into the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "policyforge/numeric/graph.hpp"
#include "policyforge/numeric/rng.hpp"
#include "policyforge/numeric/tensor.hpp"

namespace policyforge::testing {

using DTensor = TensorT<double>;
using DGraph = GraphT<double>;
using DVar = VarT<double>;

// Builds the op under test from leaf vars. Must be a pure function of them.
using OpBuilder = std::function<DVar(DGraph&, const std::vector<DVar>&)>;

inline DTensor random_tensor(std::vector<int> shape, Rng& rng,
                             double scale = 1.0, double keep_away = 0.0) {
  DTensor t = DTensor::uninit(std::move(shape));
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    double v = rng.normal() * scale;
    // keeps samples away from non-smooth points (relu kink, log pole)
    if (keep_away > 0.0 && std::abs(v) < keep_away) {
      v = v >= 0.0 ? v + keep_away : v - keep_away;
    }
    t.mut()[i] = v;
  }
  return t;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  long checked = 0;
};

// Loss = sum(out * R) for a fixed random projection R, so every output
// element contributes to a scalar loss.
inline GradCheckResult check_gradients(const OpBuilder& op,
                                       std::vector<DTensor> inputs, Rng& rng,
                                       double h = 1e-3) {
  DTensor proj;
  const auto loss_value = [&](const std::vector<DTensor>& xs) {
    DGraph g;
    std::vector<DVar> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back({&g, g.input(x.clone())});
    DVar out = op(g, vars);
    if (!proj.defined()) proj = random_tensor(out.value().shape(), rng);
    double acc = 0.0;
    const auto o = out.value().flat();
    const auto p = proj.flat();
    for (Eigen::Index i = 0; i < o.size(); ++i) acc += o[i] * p[i];
    return acc;
  };

  // analytic gradients
  (void)loss_value(inputs);  // fixes the projection
  DGraph g;
  std::vector<DVar> vars;
  std::vector<int> leaf_ids;
  for (const auto& x : inputs) {
    const int id = g.leaf(x.clone());
    leaf_ids.push_back(id);
    vars.push_back({&g, id});
  }
  DVar out = op(g, vars);
  DVar loss = reduce_sum(mul(out, DVar{&g, g.input(proj)}));
  g.backward(loss.id);

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const DTensor analytic = g.grad(leaf_ids[k]);
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      std::vector<DTensor> xs;
      for (const auto& x : inputs) xs.push_back(x.clone());
      xs[k].mut()[i] += h;
      const double lp = loss_value(xs);
      xs[k].mut()[i] -= 2.0 * h;
      const double lm = loss_value(xs);
      const double fd = (lp - lm) / (2.0 * h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(fd), std::abs(a), 1e-8});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(fd - a) / denom);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace policyforge::testing

#endif  // POLICYFORGE_TESTS_SUPPORT_FINITE_DIFF_HPP_
