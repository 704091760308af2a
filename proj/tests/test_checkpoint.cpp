#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "starry/checkpoint.hpp"
#include "starry/rng.hpp"

using namespace starry;

TEST_CASE("checkpoint round trip preserves names, shapes and bits") {
  Rng rng(5);
  std::vector<std::pair<std::string, Tensor>> tensors;
  tensors.emplace_back("encoder.weight", Tensor::randn({4, 7}, rng));
  tensors.emplace_back("encoder.bias", Tensor::randn({7}, rng));
  tensors.emplace_back("scalar.stat", Tensor::scalar(0.125f));

  const std::string dir = "ckpt_test_dir";
  save_checkpoint(dir, tensors);
  auto loaded = load_checkpoint(dir);

  REQUIRE(loaded.size() == tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    CHECK(loaded[i].first == tensors[i].first);
    CHECK(loaded[i].second.shape() == tensors[i].second.shape());
    CHECK(loaded[i].second.values() == tensors[i].second.values());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string dir = "ckpt_corrupt_dir";
  Rng rng(6);
  save_checkpoint(dir, {{"w", Tensor::randn({3, 3}, rng)}});

  SUBCASE("missing weights") {
    std::filesystem::remove(std::filesystem::path(dir) / "weights.bin");
    CHECK_THROWS_AS(load_checkpoint(dir), CheckpointCorruptError);
  }
  SUBCASE("truncated weights") {
    std::ofstream f(std::filesystem::path(dir) / "weights.bin",
                    std::ios::binary | std::ios::trunc);
    f << "xx";
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir), CheckpointCorruptError);
  }
  SUBCASE("mangled manifest") {
    std::ofstream f(std::filesystem::path(dir) / "manifest.json", std::ios::trunc);
    f << "{not json";
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir), CheckpointCorruptError);
  }
  std::filesystem::remove_all(dir);
}
