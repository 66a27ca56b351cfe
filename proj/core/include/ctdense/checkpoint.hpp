#pragma once

// Model checkpoint container.
//
//   magic "CTDNCKPT" | u32 version | u64 n + n bytes of `key = value` config
//   | u32 tensor count | per tensor: u32 name length, name, u32 rank,
//   u64 dims[rank], u64 byte length, float32 values
//
// All integers and floats are little-endian. Tensors appear in
// DenseNet::state() order, so parameters precede BN running statistics.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ctdense/densenet.hpp"

namespace ctdense {

inline constexpr char kCheckpointMagic[] = "CTDNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Free-form settings stored alongside the model (preprocessing window, ...).
using CheckpointMetadata = std::vector<std::pair<std::string, std::string>>;

struct LoadedCheckpoint {
  DenseNet<float> model;
  CheckpointMetadata metadata;
};

std::string serialize_config(const DenseNetConfig& config);
DenseNetConfig parse_config(std::string_view text);

std::string encode_checkpoint(const DenseNet<float>& model, const CheckpointMetadata& metadata = {});
// Throws CheckpointError on bad magic, unknown version, truncation or any
// name/shape disagreement with the model the stored config describes.
LoadedCheckpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const DenseNet<float>& model,
                     const CheckpointMetadata& metadata = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ctdense
