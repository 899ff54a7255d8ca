#pragma once

// Orientation-aware embedding: per-angle rotated sampling with dedicated
// branch convolutions, a polar coordinate embedding and a per-pixel gate that
// blends the two.

#include <map>
#include <mutex>
#include <tuple>

#include "o2former/core.hpp"

namespace o2former {

/// theta_i = i * pi / n for i = 0..n-1.
std::vector<double> rotation_angles(int64_t num_angles);

/// Normalised lattice coordinate of index `i` on an axis of `n` samples with
/// corners exactly at -1 and +1 (0 when n == 1).
double lattice_coordinate(int64_t i, int64_t n);

/// Sampling grid [H,W,2] holding (x, y) = R(theta) * (x_lattice, y_lattice),
/// in float64.
torch::Tensor build_rotation_grid(double theta, int64_t height, int64_t width);

/// Precomputed bilinear taps for one grid against one input size. Four taps
/// per output pixel; out-of-bounds taps carry weight 0.
struct SamplingPlan {
  int64_t in_height = 0, in_width = 0, out_height = 0, out_width = 0;
  torch::Tensor indices;  // [4, out_h * out_w] int64 into the flattened input
  torch::Tensor weights;  // [4, out_h * out_w] float64
};

/// Builds the taps for a [H_out,W_out,2] grid in align-corners normalised
/// coordinates. Coordinates within 1e-9 of a lattice point are snapped to it.
SamplingPlan make_sampling_plan(const torch::Tensor& grid, int64_t in_height, int64_t in_width);

/// Applies a plan to [C,H,W] or [B,C,H,W]. Differentiable w.r.t. `f`.
torch::Tensor apply_sampling_plan(const torch::Tensor& f, const SamplingPlan& plan);

/// Bilinear sampling with zero padding in align-corners coordinates.
/// `grid` is [H_out,W_out,2] (shared across the batch) or [B,H_out,W_out,2].
torch::Tensor grid_sample(const torch::Tensor& f, const torch::Tensor& grid);

/// Per-pixel (r_norm, theta_norm) on the same lattice, [2,H,W] float64.
/// r_norm = sqrt(x^2+y^2)/sqrt(2), theta_norm = (atan2(y,x)+pi)/(2pi), with
/// atan2(0,0) taken as 0.
torch::Tensor polar_embedding(int64_t height, int64_t width);

/// Thread-safe memo of rotation plans and polar fields keyed by shape.
/// Each key is populated once; lookups after that return the shared value.
class GeometryCache {
 public:
  const SamplingPlan& rotation_plan(double theta, int64_t height, int64_t width);
  torch::Tensor polar_field(int64_t height, int64_t width, torch::Dtype dtype);

 private:
  std::mutex mutex_;
  std::map<std::tuple<double, int64_t, int64_t>, SamplingPlan> plans_;
  std::map<std::tuple<int64_t, int64_t, int>, torch::Tensor> polar_;
};

/// Angle bank: one 3x3 same-padded convolution (C/N -> C/N, with bias) per
/// angle, applied to the matching channel group after rotated sampling.
class OrientationBranchesImpl : public torch::nn::Module {
 public:
  OrientationBranchesImpl(int64_t channels, int64_t num_angles, bool activation = true,
                          std::shared_ptr<GeometryCache> cache = nullptr);

  /// [B,C,H,W] -> [B,C,H,W]; groups concatenated in angle order.
  torch::Tensor forward(const torch::Tensor& x);

  const std::vector<double>& angles() const { return angles_; }
  torch::nn::Conv2d branch(int64_t i) { return convs_[i]; }
  int64_t num_angles() const { return static_cast<int64_t>(angles_.size()); }
  bool activation() const { return activation_; }
  void set_activation(bool on) { activation_ = on; }

 private:
  int64_t channels_;
  std::vector<double> angles_;
  std::vector<torch::nn::Conv2d> convs_;
  bool activation_;
  std::shared_ptr<GeometryCache> cache_;
};
TORCH_MODULE(OrientationBranches);

/// Trainable 1x1 convolution lifting the 2 polar planes to C channels.
class PolarProjectionImpl : public torch::nn::Module {
 public:
  explicit PolarProjectionImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& polar);

  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(PolarProjection);

struct FusionState {
  torch::Tensor concat;  // [B,2C,H,W]
  torch::Tensor logits;  // [B,2,H,W]
  torch::Tensor gate;    // W_fusion, [B,1,H,W]
  torch::Tensor fused;   // [B,C,H,W]
};

/// Blend of two fields by an exact-complement per-pixel gate: a 1x1 conv
/// maps the concatenation to two logit planes and a softmax across the pair
/// gives (W, 1 - W).
class DynamicFusionImpl : public torch::nn::Module {
 public:
  explicit DynamicFusionImpl(int64_t channels);
  FusionState forward(const torch::Tensor& orient, const torch::Tensor& polar_proj);

  torch::nn::Conv2d gate{nullptr};
};
TORCH_MODULE(DynamicFusion);

/// Gate-weighted blend given precomputed logits [B,2,H,W].
torch::Tensor fuse_with_logits(const torch::Tensor& orient, const torch::Tensor& polar_proj,
                               const torch::Tensor& logits);

struct OrientationState {
  torch::Tensor orient;      // F_orient
  torch::Tensor polar;       // [2,H,W]
  torch::Tensor polar_proj;  // [B,C,H,W]
  FusionState fusion;
};

class OrientationAwareEmbeddingImpl : public torch::nn::Module {
 public:
  OrientationAwareEmbeddingImpl(int64_t channels, int64_t num_angles, bool activation = true,
                                std::shared_ptr<GeometryCache> cache = nullptr);

  torch::Tensor forward(const torch::Tensor& x);
  OrientationState forward_with_state(const torch::Tensor& x);

  OrientationBranches branches{nullptr};
  PolarProjection polar_projection{nullptr};
  DynamicFusion fusion{nullptr};

 private:
  std::shared_ptr<GeometryCache> cache_;
};
TORCH_MODULE(OrientationAwareEmbedding);

}  // namespace o2former
