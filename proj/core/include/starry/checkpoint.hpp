#pragma once

#include <string>
#include <utility>
#include <vector>

#include "starry/tensor.hpp"

namespace starry {

// Checkpoint directory layout: `manifest.json` lists
// {name, shape, dtype:"f32", offset, length} per entry (offsets and
// lengths in bytes), and `weights.bin` holds the raw little-endian f32
// payloads concatenated in manifest order.
void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& tensors);

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& dir);

}  // namespace starry
