#ifndef POLICYFORGE_TESTS_SUPPORT_GRADCHECK_ALL_HPP_
#define POLICYFORGE_TESTS_SUPPORT_GRADCHECK_ALL_HPP_

// Runs the finite-difference oracle over every differentiable op with
// randomized shapes; shared by the unit tests and the acceptance suite.

#include <string>
#include <vector>

#include "finite_diff.hpp"

namespace policyforge::testing {

struct OpCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  long instances = 0;
  long coords = 0;
};

inline DTensor positive_tensor(std::vector<int> shape, Rng& rng) {
  DTensor t = random_tensor(std::move(shape), rng);
  t.mut() = t.flat().abs() + 0.5;
  return t;
}

inline std::vector<OpCheckReport> run_all_gradchecks(std::uint64_t seed,
                                                     int instances = 10) {
  std::vector<OpCheckReport> reports;
  Rng rng(seed);

  const auto run = [&](const std::string& name, const OpBuilder& op,
                       const std::function<std::vector<DTensor>(Rng&)>& gen) {
    OpCheckReport rep;
    rep.op = name;
    rep.instances = instances;
    for (int i = 0; i < instances; ++i) {
      auto res = check_gradients(op, gen(rng), rng);
      rep.max_rel_err = std::max(rep.max_rel_err, res.max_rel_err);
      rep.coords += res.checked;
    }
    reports.push_back(rep);
  };

  const auto dims = [&](Rng& r, int lo, int hi) {
    return lo + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  };

  // element-wise / broadcast arithmetic, all accepted forms
  run("add.same",
      [](DGraph&, const std::vector<DVar>& v) { return add(v[0], v[1]); },
      [&](Rng& r) {
        std::vector<int> s = {dims(r, 2, 4), dims(r, 3, 6)};
        return std::vector<DTensor>{random_tensor(s, r), random_tensor(s, r)};
      });
  run("add.row_bias",
      [](DGraph&, const std::vector<DVar>& v) { return add(v[0], v[1]); },
      [&](Rng& r) {
        const int n = dims(r, 2, 4), d = dims(r, 3, 6);
        return std::vector<DTensor>{random_tensor({n, d}, r),
                                    random_tensor({d}, r)};
      });
  run("add.channel_bias",
      [](DGraph&, const std::vector<DVar>& v) { return add(v[0], v[1]); },
      [&](Rng& r) {
        const int b = dims(r, 2, 3), c = dims(r, 2, 4), l = dims(r, 3, 6);
        return std::vector<DTensor>{random_tensor({b, c, l}, r),
                                    random_tensor({c, 1}, r)};
      });
  run("add.per_sample",
      [](DGraph&, const std::vector<DVar>& v) { return add(v[0], v[1]); },
      [&](Rng& r) {
        const int b = dims(r, 2, 3), c = dims(r, 2, 4), l = dims(r, 3, 6);
        return std::vector<DTensor>{random_tensor({b, c, l}, r),
                                    random_tensor({b, c, 1}, r)};
      });
  run("mul.same",
      [](DGraph&, const std::vector<DVar>& v) { return mul(v[0], v[1]); },
      [&](Rng& r) {
        std::vector<int> s = {dims(r, 2, 4), dims(r, 3, 6)};
        return std::vector<DTensor>{random_tensor(s, r), random_tensor(s, r)};
      });
  run("mul.row",
      [](DGraph&, const std::vector<DVar>& v) { return mul(v[0], v[1]); },
      [&](Rng& r) {
        const int n = dims(r, 2, 4), d = dims(r, 3, 6);
        return std::vector<DTensor>{random_tensor({n, d}, r),
                                    random_tensor({1, d}, r)};
      });
  run("mul.channel",
      [](DGraph&, const std::vector<DVar>& v) { return mul(v[0], v[1]); },
      [&](Rng& r) {
        const int b = dims(r, 2, 3), c = dims(r, 2, 4), l = dims(r, 3, 6);
        return std::vector<DTensor>{random_tensor({b, c, l}, r),
                                    random_tensor({c, 1}, r)};
      });
  run("mul.per_sample",
      [](DGraph&, const std::vector<DVar>& v) { return mul(v[0], v[1]); },
      [&](Rng& r) {
        const int b = dims(r, 2, 3), c = dims(r, 2, 4), l = dims(r, 3, 6);
        return std::vector<DTensor>{random_tensor({b, c, l}, r),
                                    random_tensor({b, c, 1}, r)};
      });
  run("scalar_mul",
      [](DGraph&, const std::vector<DVar>& v) { return scalar_mul(v[0], 1.7); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });
  run("scalar_add",
      [](DGraph&, const std::vector<DVar>& v) { return scalar_add(v[0], -0.3); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });

  run("matmul",
      [](DGraph&, const std::vector<DVar>& v) { return matmul(v[0], v[1]); },
      [&](Rng& r) {
        const int n = dims(r, 2, 4), k = dims(r, 2, 5), m = dims(r, 2, 4);
        return std::vector<DTensor>{random_tensor({n, k}, r),
                                    random_tensor({k, m}, r)};
      });
  run("transpose",
      [](DGraph&, const std::vector<DVar>& v) { return transpose(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });

  run("tanh",
      [](DGraph&, const std::vector<DVar>& v) { return tanh(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });
  run("relu",
      [](DGraph&, const std::vector<DVar>& v) { return relu(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{
            random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r, 1.0, 0.05)};
      });
  run("silu",
      [](DGraph&, const std::vector<DVar>& v) { return silu(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });
  run("log",
      [](DGraph&, const std::vector<DVar>& v) { return log(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{positive_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });
  run("softmax",
      [](DGraph&, const std::vector<DVar>& v) { return softmax(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 4), dims(r, 2, 6)}, r)};
      });

  run("reduce_sum",
      [](DGraph&, const std::vector<DVar>& v) { return reduce_sum(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });
  run("reduce_mean",
      [](DGraph&, const std::vector<DVar>& v) { return reduce_mean(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 5), dims(r, 2, 5)}, r)};
      });
  run("reshape",
      [](DGraph&, const std::vector<DVar>& v) {
        const int n = static_cast<int>(v[0].value().size());
        return reshape(v[0], {n});
      },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 4), dims(r, 2, 4)}, r)};
      });
  run("slice",
      [](DGraph&, const std::vector<DVar>& v) {
        return slice(v[0], 1, 1, v[0].value().dim(1) - 1);
      },
      [&](Rng& r) {
        return std::vector<DTensor>{random_tensor({dims(r, 2, 4), dims(r, 3, 6), dims(r, 2, 3)}, r)};
      });
  run("concat",
      [](DGraph&, const std::vector<DVar>& v) {
        return concat(std::vector<DVar>{v[0], v[1]}, 1);
      },
      [&](Rng& r) {
        const int b = dims(r, 2, 3), l = dims(r, 2, 4);
        return std::vector<DTensor>{random_tensor({b, dims(r, 2, 4), l}, r),
                                    random_tensor({b, dims(r, 2, 4), l}, r)};
      });

  run("conv1d.s1",
      [](DGraph&, const std::vector<DVar>& v) { return conv1d(v[0], v[1], 1); },
      [&](Rng& r) {
        const int b = dims(r, 1, 3), ci = dims(r, 2, 4), l = dims(r, 4, 8);
        const int co = dims(r, 2, 4);
        return std::vector<DTensor>{random_tensor({b, ci, l}, r),
                                    random_tensor({co, ci, 3}, r)};
      });
  run("conv1d.s2",
      [](DGraph&, const std::vector<DVar>& v) { return conv1d(v[0], v[1], 2); },
      [&](Rng& r) {
        const int b = dims(r, 1, 3), ci = dims(r, 2, 4);
        const int l = 2 * dims(r, 2, 4);
        const int co = dims(r, 2, 4);
        return std::vector<DTensor>{random_tensor({b, ci, l}, r),
                                    random_tensor({co, ci, 3}, r)};
      });
  run("upsample_nearest2",
      [](DGraph&, const std::vector<DVar>& v) { return upsample_nearest2(v[0]); },
      [&](Rng& r) {
        return std::vector<DTensor>{
            random_tensor({dims(r, 1, 3), dims(r, 2, 4), dims(r, 3, 6)}, r)};
      });
  run("group_norm",
      [](DGraph&, const std::vector<DVar>& v) {
        return group_norm(v[0], 2, 1e-5);
      },
      [&](Rng& r) {
        const int b = dims(r, 1, 3), c = 2 * dims(r, 1, 3), l = dims(r, 3, 6);
        return std::vector<DTensor>{random_tensor({b, c, l}, r)};
      });

  return reports;
}

}  // namespace policyforge::testing

#endif  // POLICYFORGE_TESTS_SUPPORT_GRADCHECK_ALL_HPP_
