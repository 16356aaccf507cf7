#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "policyforge/numeric/rng.hpp"
#include "policyforge/paramcodec/paramcodec.hpp"

using namespace policyforge;

namespace {

ParamVector random_params(const PolicyArch& arch, std::uint64_t seed,
                          float scale = 0.3f) {
  Rng rng(seed);
  ParamVector p;
  p.arch = arch;
  p.values.resize(param_count(arch));
  for (long i = 0; i < p.values.size(); ++i) p.values[i] = rng.normalf() * scale;
  return p;
}

}  // namespace

TEST_CASE("layout of the paper-scale architecture") {
  const PolicyArch paper{39, {128, 128}, 4};
  const ChunkLayout layout = make_layout(paper, 2);
  REQUIRE(layout.num_chunks == 2);
  // slices partition the 22,664-entry vector: 5120 then 16512+1032
  CHECK(layout.valid_width(0) == 5120);
  CHECK(layout.valid_width(1) == 17544);
  CHECK(layout.padded_width == 17544);
  CHECK(layout.total_params() == 22664);
}

TEST_CASE("layout of the desk architecture") {
  const ChunkLayout layout = make_layout({8, {32, 32}, 2}, 2);
  CHECK(layout.valid_width(0) == 288);
  CHECK(layout.valid_width(1) == 1188);
  CHECK(layout.padded_width == 1188);
}

TEST_CASE("single-chunk layout covers the whole vector") {
  const PolicyArch arch{8, {32, 32}, 2};
  const ChunkLayout layout = make_layout(arch, 1);
  REQUIRE(layout.num_chunks == 1);
  CHECK(layout.valid_width(0) == param_count(arch));
}

TEST_CASE("chunk count must not exceed layer count") {
  CHECK_THROWS_AS(make_layout({8, {32, 32}, 2}, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_layout({8, {32, 32}, 2}, 0), std::invalid_argument);
}

TEST_CASE("chunk/reassemble is a bitwise inverse, independent of weights") {
  const PolicyArch arch{8, {32, 32}, 2};
  const ChunkLayout layout = make_layout(arch, 2);
  for (int trial = 0; trial < 100; ++trial) {
    const ParamVector x = random_params(arch, 500 + trial, 1.0f);
    const ParamVector y = reassemble_params(chunk_params(x, layout), layout, arch);
    REQUIRE(y.values.size() == x.values.size());
    for (long i = 0; i < x.values.size(); ++i) {
      REQUIRE(std::memcmp(&x.values[i], &y.values[i], sizeof(float)) == 0);
    }
  }
}

TEST_CASE("encode is deterministic with noise off and tokens have spec shape") {
  const PolicyArch arch{8, {32, 32}, 2};
  ParamCodec codec(arch, {}, 42);
  const ParamVector x = random_params(arch, 7);
  const Tensor a = codec.encode(x);
  const Tensor b = codec.encode(x);
  REQUIRE(a.shape() == std::vector<int>({2, 256}));
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("decode(encode(x)) has the original length") {
  const PolicyArch arch{8, {32, 32}, 2};
  ParamCodec codec(arch, {}, 42);
  const ParamVector x = random_params(arch, 9);
  const ParamVector y = codec.decode(codec.encode(x));
  CHECK(y.values.size() == x.values.size());
}

TEST_CASE("zero tokens through an untrained decoder give the zero vector") {
  const PolicyArch arch{8, {32, 32}, 2};
  ParamCodec codec(arch, {}, 1);
  const Tensor z = Tensor::zeros({2, 256});
  const ParamVector y = codec.decode(z);
  CHECK(y.values.norm() == 0.0f);
}

TEST_CASE("decode rejects token shape mismatch") {
  ParamCodec codec({8, {32, 32}, 2}, {}, 1);
  CHECK_THROWS_AS(codec.decode(Tensor::zeros({3, 256})), std::invalid_argument);
  CHECK_THROWS_AS(codec.decode(Tensor::zeros({2, 128})), std::invalid_argument);
}

TEST_CASE("encode rejects architecture mismatch") {
  ParamCodec codec({8, {32, 32}, 2}, {}, 1);
  const ParamVector other = random_params({8, {16}, 2}, 3);
  CHECK_THROWS_AS(codec.encode(other), std::invalid_argument);
}

TEST_CASE("training reduces the reconstruction loss deterministically") {
  const PolicyArch arch{8, {16}, 2};
  CodecConfig cfg;
  cfg.num_chunks = 2;
  cfg.d_latent = 24;
  cfg.hidden = 64;
  cfg.epochs = 40;
  cfg.batch_size = 8;
  cfg.lr_restart_period = 40;

  std::vector<ParamVector> corpus;
  Rng rng(11);
  ParamVector anchor = random_params(arch, 1000, 0.4f);
  for (int i = 0; i < 48; ++i) {
    ParamVector p = anchor;
    for (long j = 0; j < p.values.size(); ++j) {
      p.values[j] += 0.05f * rng.normalf();
    }
    corpus.push_back(std::move(p));
  }

  ParamCodec codec(arch, cfg, 5);
  const CodecTrainResult r1 = train_codec(codec, corpus, 77);
  REQUIRE(r1.loss_curve.size() == 40);
  CHECK(r1.loss_curve.back() < r1.loss_curve.front());

  ParamCodec codec2(arch, cfg, 5);
  const CodecTrainResult r2 = train_codec(codec2, corpus, 77);
  for (std::size_t i = 0; i < codec.weights().count(); ++i) {
    const auto a = codec.weights().values[i].flat();
    const auto b = codec2.weights().values[i].flat();
    REQUIRE((a == b).all());
  }
  CHECK(r1.loss_curve.back() == r2.loss_curve.back());
}

TEST_CASE("train_codec rejects an empty corpus") {
  ParamCodec codec({8, {16}, 2}, {}, 1);
  std::vector<ParamVector> corpus;
  CHECK_THROWS_AS(train_codec(codec, corpus, 1), std::invalid_argument);
}

TEST_CASE("codec weights roundtrip through the file format") {
  const auto dir = std::filesystem::temp_directory_path() / "pf_codec_test";
  std::filesystem::create_directories(dir);
  const PolicyArch arch{8, {32, 32}, 2};
  ParamCodec codec(arch, {}, 42);
  codec.save(dir / "codec.pfw");
  const ParamCodec loaded = ParamCodec::load(dir / "codec.pfw");
  const ParamVector x = random_params(arch, 13);
  const Tensor a = codec.encode(x);
  const Tensor b = loaded.encode(x);
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  std::filesystem::remove_all(dir);
}
