#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace o2former {

/// Thrown when an array does not have the shape an operation requires.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for invalid configuration values or unknown/missing config keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for filesystem and file-format failures; messages carry the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kNumLevels = 4;
inline constexpr std::array<int64_t, kNumLevels> kLevelStrides = {4, 8, 16, 32};
inline constexpr std::array<int64_t, kNumLevels> kReferenceChannels = {256, 512, 1024, 2048};
inline constexpr int64_t kReferenceBackboneWidth = 64;
inline constexpr int64_t kDefaultEmbedDim = 256;
/// Class index of the single foreground category; index 1 is "no object".
inline constexpr int64_t kShipClass = 0;
inline constexpr int64_t kNoObjectClass = 1;

/// Dense feature map in [C, H, W] layout, optionally with a leading batch axis.
struct FeatureMap {
  torch::Tensor data;
  int64_t stride = 1;

  FeatureMap() = default;
  FeatureMap(torch::Tensor d, int64_t s);

  bool batched() const { return data.dim() == 4; }
  int64_t channels() const { return data.size(-3); }
  int64_t height() const { return data.size(-2); }
  int64_t width() const { return data.size(-1); }
};

/// The four backbone levels C2..C5.
struct FeaturePyramid {
  std::vector<FeatureMap> levels;
  int64_t input_height = 0;
  int64_t input_width = 0;
};

/// Native channel widths for a backbone of the given base width:
/// (4, 8, 16, 32) x width, i.e. (256, 512, 1024, 2048) at width 64.
std::array<int64_t, kNumLevels> pyramid_channels(int64_t backbone_width);

/// Checks level count, strides (4, 8, 16, 32), channel widths and spatial
/// sizes against the input size. Throws ShapeError naming the level (C2..C5).
const FeaturePyramid& validate_pyramid(
    const FeaturePyramid& p,
    const std::array<int64_t, kNumLevels>& channels = kReferenceChannels);

/// Row-major flattening [C,H,W] -> [H*W, C] (or [B,C,H,W] -> [B,H*W,C]).
torch::Tensor flatten_pixels(const FeatureMap& f);
torch::Tensor flatten_pixels(const torch::Tensor& chw);
/// Inverse of flatten_pixels.
torch::Tensor unflatten_pixels(const torch::Tensor& rows, int64_t height, int64_t width);

/// Query bank [N_q, D] or [B, N_q, D].
struct QuerySet {
  torch::Tensor queries;

  QuerySet() = default;
  explicit QuerySet(torch::Tensor q, int64_t embed_dim = kDefaultEmbedDim);

  int64_t size() const { return queries.size(-2); }
  int64_t dim() const { return queries.size(-1); }
};

/// Binary mask in row-major [height x width] layout.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  int64_t area() const;
  bool operator==(const BinaryMask&) const = default;

  static BinaryMask from_tensor(const torch::Tensor& t);
  torch::Tensor to_tensor(torch::Dtype dtype = torch::kFloat32) const;
};

/// Ground-truth or predicted instances of one image. Scores are absent for
/// ground truth.
struct InstanceSet {
  std::vector<BinaryMask> masks;
  std::vector<int> labels;
  std::optional<std::vector<double>> scores;

  size_t size() const { return masks.size(); }
  bool empty() const { return masks.empty(); }
  /// Throws ShapeError when masks disagree in shape or scores/labels misalign.
  void validate() const;
  /// Masks stacked to [N, H, W]; `height`/`width` are used when empty.
  torch::Tensor mask_tensor(int height, int width, torch::Dtype dtype = torch::kFloat32) const;
};

struct ModelConfig {
  int64_t num_queries = 20;
  int64_t num_angles = 4;
  int64_t embed_dim = kDefaultEmbedDim;
  int64_t decoder_layers = 3;
  int64_t backbone_width = kReferenceBackboneWidth;
  double eta = 0.1;
  int64_t seed = 0;

  int64_t num_heads = 8;
  int64_t ffn_dim = 1024;
  bool use_oqg = true;
  bool use_oaem = true;
  bool oaem_activation = true;
  double score_threshold = 0.5;
  double mask_threshold = 0.5;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::array<int64_t, kNumLevels> native_channels() const {
    return pyramid_channels(backbone_width);
  }
};

/// Throws ShapeError unless every element of `t` is finite.
void check_finite(const torch::Tensor& t, const std::string& what);

}  // namespace o2former
