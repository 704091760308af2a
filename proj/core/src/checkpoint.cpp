#include "starry/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace starry {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
  fs::create_directories(dir);
  json manifest = json::array();
  std::ofstream weights(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!weights) throw Error("cannot open weights.bin for writing in " + dir);

  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    const std::uint64_t length = tensor.size() * sizeof(float);
    json entry;
    entry["name"] = name;
    entry["shape"] = tensor.shape();
    entry["dtype"] = "f32";
    entry["offset"] = offset;
    entry["length"] = length;
    manifest.push_back(entry);
    weights.write(reinterpret_cast<const char*>(tensor.data()),
                  static_cast<std::streamsize>(length));
    offset += length;
  }
  weights.close();

  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw Error("cannot open manifest.json for writing in " + dir);
  mf << manifest.dump(2) << "\n";
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  const fs::path weights_path = fs::path(dir) / "weights.bin";
  if (!fs::exists(manifest_path) || !fs::exists(weights_path)) {
    throw CheckpointCorruptError("missing manifest.json or weights.bin in " + dir);
  }

  json manifest;
  try {
    std::ifstream mf(manifest_path);
    mf >> manifest;
  } catch (const std::exception& e) {
    throw CheckpointCorruptError("unreadable manifest.json: " +
                                 std::string(e.what()));
  }
  if (!manifest.is_array()) {
    throw CheckpointCorruptError("manifest.json must be an array");
  }

  std::ifstream weights(weights_path, std::ios::binary);
  const std::uint64_t file_size = fs::file_size(weights_path);

  std::vector<std::pair<std::string, Tensor>> out;
  for (const json& entry : manifest) {
    try {
      const std::string name = entry.at("name").get<std::string>();
      const Shape shape = entry.at("shape").get<Shape>();
      const std::string dtype = entry.at("dtype").get<std::string>();
      const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t length = entry.at("length").get<std::uint64_t>();
      if (dtype != "f32") {
        throw CheckpointCorruptError("unsupported dtype '" + dtype + "' for " + name);
      }
      if (length != numel(shape) * sizeof(float)) {
        throw CheckpointCorruptError("length/shape mismatch for " + name);
      }
      if (offset + length > file_size) {
        throw CheckpointCorruptError("entry " + name + " exceeds weights.bin");
      }
      std::vector<float> values(numel(shape));
      weights.seekg(static_cast<std::streamoff>(offset));
      weights.read(reinterpret_cast<char*>(values.data()),
                   static_cast<std::streamsize>(length));
      if (!weights) {
        throw CheckpointCorruptError("short read for " + name);
      }
      out.emplace_back(name, Tensor(shape, std::move(values)));
    } catch (const json::exception& e) {
      throw CheckpointCorruptError("malformed manifest entry: " +
                                   std::string(e.what()));
    }
  }
  return out;
}

}  // namespace starry
