#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ivoct/nn/tensor.hpp"

namespace ivoct::nn {

// Binary checkpoint layout, all integers and reals little-endian:
//   8 bytes   magic "IVOCTNN\0"
//   u32       format version (1)
//   u32 + n   model configuration as compact JSON
//   u32       entry count
//   per entry: u32 name length, name bytes, u32 rank (4), 4 x u64 dims
//   payload:  every entry's values as f64, in entry order
struct Checkpoint {
    nlohmann::json config;
    std::vector<std::pair<std::string, Tensor>> entries;

    const Tensor& at(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

std::string encode_checkpoint(const nlohmann::json& config, const NamedTensors& tensors);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const NamedTensors& tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint entries into `targets` by name; shapes must match exactly.
void restore_tensors(const Checkpoint& ck, const std::vector<std::pair<std::string, Tensor*>>& targets);

}  // namespace ivoct::nn
