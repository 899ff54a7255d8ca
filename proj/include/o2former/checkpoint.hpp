#pragma once

// Checkpoint archive:
//
//   bytes 0..7    magic "O2FCKPT\0"
//   bytes 8..11   format version (uint32, little endian), currently 1
//   bytes 12..19  header length N (uint64, little endian)
//   next N bytes  UTF-8 JSON header
//   remainder     tensor payload
//
// The header holds {"meta": {...}, "tensors": [{"name", "dtype", "shape",
// "offset", "nbytes"}, ...]}; offsets are relative to the payload start and
// data is contiguous little-endian (dtype "float32", "float64" or "int64").
// Model parameters use their hierarchical module names; optimizer moments
// are stored as "optimizer/<param>/exp_avg" and ".../exp_avg_sq".

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "o2former/core.hpp"

namespace o2former {

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  /// Undefined tensor when absent.
  torch::Tensor find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers of `module`, keyed by hierarchical name.
void add_module_state(Checkpoint& ckpt, const torch::nn::Module& module);
/// Copies stored values into `module`. Throws IoError listing missing,
/// unexpected or shape-mismatched entries.
void load_module_state(torch::nn::Module& module, const Checkpoint& ckpt);

/// AdamW moments and step counts for the named parameters of `module`.
void add_optimizer_state(Checkpoint& ckpt, const torch::nn::Module& module,
                         const torch::optim::AdamW& optimizer);
void load_optimizer_state(torch::optim::AdamW& optimizer, const torch::nn::Module& module,
                          const Checkpoint& ckpt);

}  // namespace o2former
