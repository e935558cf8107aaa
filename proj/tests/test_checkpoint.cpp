#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cstring>
#include <filesystem>
#include <random>

#include "cbmlab/checkpoint.hpp"
#include "toy_models.hpp"

using namespace cbm;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c{CbmModel(blob_architecture(), 3, 4), concept_mnist_spec(), {}, 17};
  c.train.paradigm = Paradigm::kHybrid;
  c.train.lr = 0.0123;
  c.train.seed = 99;
  c.model.tags()["paradigm"] = "hybrid";
  c.model.tags()["note"] = "";
  // values that only survive a bit-exact encoding
  auto w = c.model.g_params()[0].mutable_data();
  w[0] = -0.0;
  w[1] = std::numeric_limits<double>::denorm_min();
  w[2] = 0.1 + 0.2;
  return c;
}

std::vector<std::uint64_t> bits(const CbmModel& m) {
  std::vector<std::uint64_t> out;
  for (const auto& p : m.params())
    for (double v : p.data()) out.push_back(std::bit_cast<std::uint64_t>(v));
  return out;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  CHECK(std::memcmp(bytes.data(), "CBMCKPT1", 8) == 0);
  const auto d = decode_checkpoint(bytes);
  CHECK(d.model.arch() == c.model.arch());
  CHECK(bits(d.model) == bits(c.model));
  CHECK(d.model.tags() == c.model.tags());
  CHECK(d.spec.names == c.spec.names);
  CHECK(d.spec.kind == c.spec.kind);
  CHECK(d.spec.relevance_threshold == c.spec.relevance_threshold);
  CHECK(d.train == c.train);
  CHECK(d.seed == 17);
  CHECK(encode_checkpoint(d) == bytes);
  for (const auto& p : d.model.params()) CHECK(p.requires_grad());
}

TEST_CASE("round trip covers linear and regression architectures") {
  Architecture a = testing::linear_arch(5, 3, 1, ConceptKind::kContinuous);
  a.task = TaskKind::kRegression;
  Checkpoint c{CbmModel(a, 1, 2), {{"x", "y", "z"}, ConceptKind::kContinuous, 0.25}, {}, 0};
  const auto d = decode_checkpoint(encode_checkpoint(c));
  CHECK(d.model.arch() == a);
  CHECK(bits(d.model) == bits(c.model));
  CHECK(d.spec.kind == ConceptKind::kContinuous);
}

TEST_CASE("decoded models predict identically") {
  const auto c = sample_checkpoint();
  const auto d = decode_checkpoint(encode_checkpoint(c));
  const auto split = synth_blob_dataset(30, 2);
  const auto x = image_tensor(split.test[0].image, c.model.arch().input);
  CHECK(forward_concepts(c.model, x) == forward_concepts(d.model, x));
}

TEST_CASE("malformed checkpoints are rejected") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("magic"), CheckpointError);

  bad = bytes;
  bad[8] = 2;
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("version 2"), CheckpointError);

  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("trailing"), CheckpointError);

  // Every proper prefix is truncated.
  for (std::size_t n = 0; n < bytes.size(); n += n < 600 ? 1 : 997)
    CHECK_THROWS_AS(decode_checkpoint(std::span(bytes.data(), n)), CheckpointError);
}

TEST_CASE("corrupt bytes never escape as anything but CheckpointError") {
  // Corrupt only the header region where sizes and enums live; flipping a
  // parameter value is a valid checkpoint.
  const auto bytes = encode_checkpoint(sample_checkpoint());
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pos(0, 400);
  std::uniform_int_distribution<int> byte(0, 255);
  std::size_t rejected = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    auto bad = bytes;
    bad[pos(rng)] = static_cast<std::uint8_t>(byte(rng));
    try {
      decode_checkpoint(bad);
    } catch (const CheckpointError&) {
      ++rejected;
    } catch (const std::exception& e) {
      FAIL("unexpected exception: " << e.what());
    }
  }
  CHECK(rejected > 0);
}

TEST_CASE("checkpoint files") {
  const auto path = fs::temp_directory_path() / "cbmlab_test.ckpt";
  const auto c = sample_checkpoint();
  save_checkpoint(path, c);
  CHECK(fs::file_size(path) == encode_checkpoint(c).size());
  CHECK(bits(load_checkpoint(path).model) == bits(c.model));
  fs::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  CHECK_THROWS_AS(save_checkpoint(fs::temp_directory_path() / "no_such_dir" / "x.ckpt", c), CheckpointError);
}
