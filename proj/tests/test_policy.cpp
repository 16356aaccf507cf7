#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "policyforge/numeric/rng.hpp"
#include "policyforge/policy/policy.hpp"

using namespace policyforge;

namespace {

ParamVector random_params(const PolicyArch& arch, std::uint64_t seed) {
  Rng rng(seed);
  ParamVector p;
  p.arch = arch;
  p.values.resize(param_count(arch));
  for (long i = 0; i < p.values.size(); ++i) p.values[i] = rng.normalf() * 0.3f;
  return p;
}

}  // namespace

TEST_CASE("param_count matches closed form") {
  CHECK(param_count({39, {128, 128}, 4}) == 22664);
  CHECK(param_count({41, {128, 128}, 8}) == 23952);
  CHECK(param_count({8, {32, 32}, 2}) == 1476);
}

TEST_CASE("layer offsets of the desk architecture") {
  const auto off = layer_offsets({8, {32, 32}, 2});
  REQUIRE(off.size() == 4);
  CHECK(off[0] == 0);
  CHECK(off[1] == 288);
  CHECK(off[2] == 1344);
  CHECK(off[3] == 1476);
}

TEST_CASE("flatten/unflatten is a bitwise bijection") {
  const PolicyArch arch{8, {32, 32}, 2};
  for (int trial = 0; trial < 100; ++trial) {
    const ParamVector p = random_params(arch, 1000 + trial);
    const ParamVector q = flatten(arch, unflatten(p));
    REQUIRE(q.values.size() == p.values.size());
    for (long i = 0; i < p.values.size(); ++i) {
      REQUIRE(std::memcmp(&p.values[i], &q.values[i], sizeof(float)) == 0);
    }
  }
}

TEST_CASE("zero weights flatten to the zero vector") {
  const PolicyArch arch{8, {16}, 2};
  std::vector<LayerWeights> layers;
  layers.push_back({Eigen::MatrixXf::Zero(16, 8), Eigen::VectorXf::Zero(16)});
  layers.push_back({Eigen::MatrixXf::Zero(4, 16), Eigen::VectorXf::Zero(4)});
  const ParamVector p = flatten(arch, layers);
  CHECK(p.values.norm() == 0.0f);
}

TEST_CASE("unflatten rejects length mismatch") {
  ParamVector p;
  p.arch = {8, {32, 32}, 2};
  p.values = Eigen::VectorXf::Zero(10);
  CHECK_THROWS_AS(unflatten(p), std::invalid_argument);
}

TEST_CASE("zero parameters act as the zero action") {
  ParamVector p;
  p.arch = {8, {32, 32}, 2};
  p.values = Eigen::VectorXf::Zero(param_count(p.arch));
  Eigen::Matrix<float, 8, 1> s;
  s << 0.3f, -0.2f, 0.0f, 0.0f, 0.5f, 0.5f, 0.0f, 0.0f;
  const Eigen::Vector2f a = act(p, s);
  CHECK(a.x() == 0.0f);
  CHECK(a.y() == 0.0f);
}

TEST_CASE("actions stay inside (-1,1)") {
  const PolicyArch arch{8, {32, 32}, 2};
  for (int trial = 0; trial < 20; ++trial) {
    const ParamVector p = random_params(arch, 55 + trial);
    DeployedPolicy pol(p);
    Rng rng(trial);
    Eigen::Matrix<float, 8, 1> s;
    for (int i = 0; i < 8; ++i) s[i] = rng.normalf() * 5.0f;
    const Eigen::Vector2f a = pol.act(s);
    CHECK(std::abs(a.x()) < 1.0f);
    CHECK(std::abs(a.y()) < 1.0f);
  }
}

TEST_CASE("act rejects non-finite states") {
  const ParamVector p = random_params({8, {32, 32}, 2}, 9);
  Eigen::Matrix<float, 8, 1> s = Eigen::Matrix<float, 8, 1>::Zero();
  s[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(act(p, s), std::invalid_argument);
}

TEST_CASE("checkpoint roundtrip through the MAA1 format") {
  const auto dir = std::filesystem::temp_directory_path() / "pf_policy_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "ckpt.maa";
  const ParamVector p = random_params({8, {32, 32}, 2}, 77);
  save_checkpoint(path, p);
  const ParamVector q = load_checkpoint(path);
  CHECK(q.arch == p.arch);
  REQUIRE(q.values.size() == p.values.size());
  for (long i = 0; i < p.values.size(); ++i) CHECK(q.values[i] == p.values[i]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("stored reference checkpoint reproduces stored actions") {
  // Golden values frozen once; guards the deployment rule against
  // accidental changes.
  const ParamVector p = load_checkpoint(std::filesystem::path(PF_TEST_DATA_DIR) /
                                        "golden.maa");
  Eigen::Matrix<float, 8, 1> s;
  s << 0.1f, -0.4f, 0.25f, 0.0f, -0.6f, 0.3f, 0.0f, 0.0f;
  const Eigen::Vector2f a = act(p, s);
  CHECK(a.x() == doctest::Approx(-0.464715421f).epsilon(1e-5));
  CHECK(a.y() == doctest::Approx(0.135968283f).epsilon(1e-5));
}
