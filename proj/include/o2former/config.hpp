#pragma once

// Experiment configuration: JSON schema, strict parsing, and the desk/paper
// profiles. Unknown keys and wrongly typed values raise ConfigError with the
// dotted key path.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "o2former/core.hpp"
#include "o2former/metrics.hpp"
#include "o2former/synthdata.hpp"

namespace o2former {

struct AugmentConfig {
  bool enabled = true;
  double flip_prob = 0.5;  // horizontal flip
  double scale_min = 0.8;
  double scale_max = 1.2;
  bool crop = true;  // crop/pad the rescaled image back to the input size
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 4;
  double lr = 1e-4;
  double weight_decay = 0.05;
  std::vector<int> lr_milestones = {30, 40};  // epochs
  double lr_decay = 0.1;
  int64_t max_steps = 0;  // 0: run all epochs
  AugmentConfig augment;
  int64_t checkpoint_every = 0;  // steps; 0 keeps only the final checkpoint
  double grad_clip_norm = 0.0;   // 0 disables clipping
  std::string device = "cpu";
  int threads = 1;

  void validate() const;
  /// Step-decayed learning rate: lr * lr_decay^(number of milestones <= epoch).
  double lr_at_epoch(int epoch) const;
};

struct EvalConfig {
  std::string split = "test";  // manifest split evaluated ("train", "test" or "all")
  SizeBuckets buckets = SizeBuckets::kPaper;
  int max_detections = 100;
  bool oracle = false;  // ground truth as predictions

  void validate() const;
};

struct AblateConfig {
  int image_size = 64;
  int num_images = 8;
  int64_t max_steps = 500;
  int64_t loss_probe_step = 500;  // step whose loss is reported per variant

  void validate() const;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::string profile = "desk";
  std::string data_dir = "data";
  DatasetSpec dataset;  // dataset.scene.seed follows `seed`
  ModelConfig model;    // model.seed follows `seed`
  TrainConfig train;
  EvalConfig eval;
  AblateConfig ablate;

  /// Defaults of a named profile ("desk" or "paper").
  static ExperimentConfig for_profile(const std::string& profile);
  void validate() const;
  /// Fully resolved configuration; parse_config(to_json()) round-trips.
  nlohmann::json to_json() const;
};

/// Profile resolution order: `profile` argument, then the file's "profile"
/// key, then "desk". The seed comes from `seed` or the file's "seed" key;
/// one of them is required.
ExperimentConfig parse_config(const nlohmann::json& j,
                              const std::optional<std::string>& profile = std::nullopt,
                              const std::optional<uint64_t>& seed = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::optional<std::string>& profile = std::nullopt,
                             const std::optional<uint64_t>& seed = std::nullopt);

nlohmann::json model_config_to_json(const ModelConfig& c);
/// Strict: every key must be known. Missing keys keep `base` values.
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& base = {});
nlohmann::json scene_spec_to_json(const SceneSpec& s);

/// 16 hex digits of FNV-1a over the compact JSON dump.
std::string config_hash(const nlohmann::json& j);

}  // namespace o2former
