#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cap/tensor.hpp"

namespace cap {

// Single-file model checkpoint:
//
//   bytes 0..7    magic "CAPCKPT1"
//   uint32 LE     format version
//   uint32 LE     header length L
//   L bytes       JSON header {"kind", "meta", "tensors": [{"name", "shape"}...]}
//   float32 LE    all tensors, concatenated in header order
//
// Values are narrowed to float32 on save.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Round every value through float32, matching what a save/load cycle stores.
void round_to_float32(Tensor& t);

}  // namespace cap
