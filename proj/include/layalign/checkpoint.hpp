// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal binary checkpoint container.
//
// Layout (all integers little-endian):
//   "LAYALIGN" | u32 version | u32 len, stage tag | u64 step |
//   64 bytes config digest | u64 len, metadata JSON |
//   u64 tensor count | per tensor: u32 len, name | u8 dtype (0 = float32) |
//   u32 rank | u64 dims[rank] | u64 byte offset into payload |
//   u64 payload bytes | payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "layalign/nn.hpp"

namespace layalign {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string stage;  // "pretrain", "stage1", "stage2" or "init"
  std::uint64_t step = 0;
  std::string config_digest;  // 64 hex characters
  std::string metadata;       // JSON object text
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

/// Written to a sibling temporary file and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <class T>
std::vector<CheckpointTensor> capture_tensors(const NamedParams<T>& params);

/// Copies tensors into `params` by name. With `exact`, the checkpoint must
/// hold every parameter exactly once and nothing else; otherwise every
/// checkpoint tensor must match some parameter, and parameters without a
/// tensor are left alone. Shape mismatches are always errors.
template <class T>
void apply_tensors(const Checkpoint& ckpt, const NamedParams<T>& params, bool exact = true);

}  // namespace layalign
