#pragma once

// Optimized query generation: queries initialised from globally pooled
// multi-scale features, a scale attention and a prototype similarity update.

#include "o2former/core.hpp"

namespace o2former {

inline constexpr double kSimilarityEpsilon = 1e-8;
inline constexpr double kPrototypeInitStd = 0.02;

/// Per-level trainable 1x1 projections mapping the native pyramid widths to
/// the embedding width. Spatial shapes are preserved.
class ChannelProjectionImpl : public torch::nn::Module {
 public:
  ChannelProjectionImpl(const std::array<int64_t, kNumLevels>& in_channels, int64_t embed_dim);

  std::vector<FeatureMap> forward(const FeaturePyramid& pyramid);
  torch::nn::Conv2d level(int i) { return convs_[i]; }

 private:
  std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(ChannelProjection);

/// Spatial mean per channel plus the scale embedding.
/// `f` is [C,H,W] or [B,C,H,W]; `scale_embedding` is [C]. Returns [C] or [B,C].
torch::Tensor pool_and_embed(const torch::Tensor& f, const torch::Tensor& scale_embedding);

/// Stacks the four pooled vectors along a new scale axis, ordered C2..C5:
/// 4 x [C] -> [4,C], or 4 x [B,C] -> [B,4,C].
torch::Tensor stack_scales(const std::vector<torch::Tensor>& pooled);

/// Softmax over the scale axis (last axis) of per-scale logits.
torch::Tensor scale_softmax(const torch::Tensor& logits);

/// Convex combination sum_i w_i * F_i. `weights` is [4] or [B,4]; `stacked`
/// is [4,C] or [B,4,C].
torch::Tensor fuse_scales(const torch::Tensor& weights, const torch::Tensor& stacked);

/// Cosine similarity of the fused vector against every prototype row.
/// `fused` is [C] or [B,C]; `prototypes` is [N,C]. Returns [N] or [B,N].
/// Zero-norm inputs yield 0 (the denominator is clamped at `eps`).
torch::Tensor prototype_similarity(const torch::Tensor& fused, const torch::Tensor& prototypes,
                                   double eps = kSimilarityEpsilon);

/// P + eta * S broadcast over the feature axis: [N,C] with [N] or [B,N].
torch::Tensor shift_prototypes(const torch::Tensor& prototypes, const torch::Tensor& similarity,
                               double eta);

struct OQGState {
  std::vector<torch::Tensor> pooled;  // F~_i, each [B,C]
  torch::Tensor stacked;              // [B,4,C]
  torch::Tensor weights;              // [B,4]
  torch::Tensor fused;                // [B,C]
  torch::Tensor similarity;           // [B,N]
};

struct OQGOutput {
  QuerySet queries;  // [B,N,C]
  OQGState state;
};

class OptimizedQueryGeneratorImpl : public torch::nn::Module {
 public:
  OptimizedQueryGeneratorImpl(int64_t num_queries, int64_t embed_dim, double eta);

  /// `levels` are the four projected maps (embed_dim channels, batched).
  OQGOutput forward(const std::vector<FeatureMap>& levels);

  /// Softmax over scales of a linear score of each stacked row.
  torch::Tensor scale_attention(const torch::Tensor& stacked);
  /// Linear(P + eta * S): prototypes shifted by the scaled similarity.
  QuerySet generate_queries(const torch::Tensor& similarity);

  double eta() const { return eta_; }
  void set_eta(double eta);

  torch::Tensor prototypes;        // P [N,C]
  torch::Tensor scale_embeddings;  // E [4,C]
  torch::nn::Linear score{nullptr};
  torch::nn::Linear output{nullptr};

 private:
  int64_t embed_dim_;
  double eta_;
};
TORCH_MODULE(OptimizedQueryGenerator);

}  // namespace o2former
