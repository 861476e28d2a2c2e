#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "ulcerforge/adam.hpp"
#include "ulcerforge/schedule.hpp"
#include "ulcerforge/unet.hpp"

namespace ulcerforge {

// Binary layout (all integers little-endian):
//   "DFUD" | u32 version | u32 tensor count
//   per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims... | f32 values
//   u32 footer length | UTF-8 JSON footer | u32 CRC-32 of every preceding byte
// Optimizer moments are stored as tensors named "adam.m/<param>" and "adam.v/<param>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ScheduleConfig schedule;
  DenoiserParams params;
  std::optional<AdamState> optimizer;
  std::int64_t step = 0;
  nlohmann::json train = nlohmann::json::object();  // resolved training config, informational
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Writes through a temporary file and rename, so a crash never leaves a torn file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

}  // namespace ulcerforge
