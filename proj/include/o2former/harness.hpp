#pragma once

// Experiment orchestration behind the CLI: dataset loading and augmentation,
// training with checkpoint/resume, evaluation per scene split, the
// four-variant module ablation, and C2 feature-map visualisation.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "o2former/checkpoint.hpp"
#include "o2former/coco.hpp"
#include "o2former/config.hpp"
#include "o2former/image_io.hpp"
#include "o2former/matching_loss.hpp"
#include "o2former/metrics.hpp"
#include "o2former/pipeline.hpp"
#include "o2former/rng.hpp"

namespace o2former {

/// Raised for failures during training (non-finite loss and the like).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  int64_t image_id = 0;
  std::string scene = "offshore";
  torch::Tensor image;  // [3,H,W] float32 in [0,1]
  InstanceSet gt;
};

struct LoadedDataset {
  std::filesystem::path dir;
  CocoDataset coco;
  nlohmann::json manifest;
  std::vector<Sample> samples;  // in image order

  const Sample& sample(int64_t image_id) const;
  /// Image ids of "train", "test", "all", "inshore" or "offshore".
  std::vector<int64_t> split(const std::string& name) const;
};

/// Loads annotations.json, manifest.json and every image under `dir`.
LoadedDataset load_dataset(const std::filesystem::path& dir);

/// Horizontal flip, then rescale and crop/pad back to the input size at a
/// random offset. Instances left with fewer than 4 pixels are dropped.
Sample augment(const Sample& s, const AugmentConfig& config, Xoshiro256& rng);

struct Batch {
  torch::Tensor images;  // [B,3,H,W]
  std::vector<LossTarget> targets;
  std::vector<int64_t> image_ids;
};
Batch make_batch(const std::vector<Sample>& samples, torch::Dtype dtype = torch::kFloat32);

/// Image ids of each batch of an epoch: a seeded shuffle of `ids`.
std::vector<int64_t> epoch_order(const std::vector<int64_t>& ids, uint64_t seed, int epoch);

struct StepLog {
  int64_t step = 0;  // 1-based optimizer step
  int epoch = 0;
  double lr = 0.0;
  double total = 0.0, cls = 0.0, bce = 0.0, dice = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  /// Training images; the manifest "train" split when empty.
  std::vector<int64_t> image_ids;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<StepLog> log;  // steps run by this call
  std::filesystem::path final_checkpoint;
  int64_t steps = 0;  // total optimizer steps after this call
};

/// Total optimizer steps of a run: epochs x batches per epoch, capped by
/// max_steps when positive.
int64_t planned_steps(const TrainConfig& config, int64_t num_images);

/// Trains from scratch (or from `options.resume`), writing loss.csv,
/// ckpt_step_NNNNNN.ckpt every checkpoint_every steps and final.ckpt.
TrainResult train_model(const ExperimentConfig& config, const LoadedDataset& data,
                        const TrainOptions& options);

/// Checkpoint contents: weights, optimizer moments, resolved config and step.
Checkpoint make_checkpoint(const ExperimentConfig& config, const O2Former& model,
                           const torch::optim::AdamW* optimizer, int64_t step);
/// Builds the model described by the checkpoint and loads its weights.
/// When `expected` is given, differing architecture fields raise ConfigError
/// naming them.
O2Former load_model(const Checkpoint& ckpt, const std::optional<ModelConfig>& expected = std::nullopt);

std::map<int64_t, InstanceSet> run_inference(O2Former& model, const LoadedDataset& data,
                                             const std::vector<int64_t>& ids);
/// Ground truth with unit scores.
std::map<int64_t, InstanceSet> oracle_predictions(const LoadedDataset& data,
                                                  const std::vector<int64_t>& ids);

/// Reports for the "offshore", "inshore" and "all" subsets of `ids`.
std::map<std::string, EvalReport> evaluate_splits(const std::map<int64_t, InstanceSet>& preds,
                                                  const LoadedDataset& data,
                                                  const std::vector<int64_t>& ids,
                                                  const EvalOptions& options);

struct EvalResult {
  std::map<std::string, EvalReport> splits;
  nlohmann::json report;  // as written to report.json
};

/// Inference (or oracle predictions) on config.eval.split, writing
/// predictions.json, report.json and report.txt under `out_dir`.
EvalResult evaluate(const ExperimentConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                    const LoadedDataset& data, const std::filesystem::path& out_dir);

struct AblationVariant {
  std::string name;
  bool use_oqg = false;
  bool use_oaem = false;
};
std::vector<AblationVariant> ablation_variants();

/// Scene spec of the ablation dataset: the configured scene rescaled to
/// ablate.image_size.
SceneSpec ablation_scene(const ExperimentConfig& config);

/// Generates the ablation dataset under out_dir/data, trains and evaluates
/// every variant under out_dir/<variant>, and writes ablation.json,
/// ablation.txt and loss_curves/<variant>.csv.
nlohmann::json run_ablation(const ExperimentConfig& config, const std::filesystem::path& out_dir);

/// Per-pixel channel mean of [C,H,W] -> [H,W] (float64).
torch::Tensor channel_mean_heatmap(const torch::Tensor& chw);
/// Maps values to RGB with the fixed colour scale: `lo` -> first colour stop,
/// `hi` -> last; a degenerate range maps everything to the first stop.
Image8 colorize(const torch::Tensor& heatmap, double lo, double hi);
/// Colour stops (dark purple -> orange -> pale yellow) at 0, 0.25, .., 1.
std::array<std::array<uint8_t, 3>, 5> heatmap_stops();

/// Writes c2_before_oaem.png, c2_after_oaem.png and, with `baseline`,
/// c2_no_oaem.png. All maps share one min-max scale. Returns written paths.
std::vector<std::filesystem::path> visualize(const std::filesystem::path& checkpoint,
                                             const torch::Tensor& image,
                                             const std::filesystem::path& out_dir,
                                             const std::optional<std::filesystem::path>& baseline);

/// [3,H,W] float image from a PNG file.
torch::Tensor load_image(const std::filesystem::path& path);

}  // namespace o2former
