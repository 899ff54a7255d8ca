#pragma once

// End-to-end mask prediction: residual backbone, channel projection, query
// generation, orientation-aware enhancement of C2..C4, a convolutional pixel
// decoder and a masked-attention transformer decoder with per-layer heads.

#include "o2former/core.hpp"
#include "o2former/oaem.hpp"
#include "o2former/oqg.hpp"

namespace o2former {

/// GroupNorm group count used throughout: gcd(channels, 8).
int64_t norm_groups(int64_t channels);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr}, shortcut_norm_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Four-stage residual CNN with strides (4, 8, 16, 32) and widths
/// (4, 8, 16, 32) x `width`.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(int64_t width);
  /// `image` is [B,3,H,W] with H, W divisible by 32.
  FeaturePyramid forward(const torch::Tensor& image);

 private:
  int64_t width_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<ResidualBlock> stages_;
};
TORCH_MODULE(Backbone);

struct PixelDecoderOptions {
  bool normalize = true;  // GroupNorm + ReLU after each refinement conv
  torch::nn::functional::InterpolateFuncOptions::mode_t upsample = torch::kBilinear;
};

struct PixelDecoderOutput {
  std::vector<FeatureMap> enhanced;  // strides 8, 16, 32
  FeatureMap a2;                     // stride 4, convolution only
  torch::Tensor per_pixel;           // [B,D,H/4,W/4]
};

/// Top-down refinement 32 -> 16 -> 8 with 3x3 convolutions, a separate 3x3
/// refinement of the stride-4 level, and a 1x1 per-pixel embedding of
/// A2 + upsample(E8).
class PixelDecoderImpl : public torch::nn::Module {
 public:
  PixelDecoderImpl(int64_t embed_dim, PixelDecoderOptions options = {});
  /// `levels` are the four embed_dim-wide maps ordered C2..C5.
  PixelDecoderOutput forward(const std::vector<FeatureMap>& levels);

  torch::nn::Conv2d refine(int level) { return refine_[level]; }
  torch::nn::Conv2d embed{nullptr};

 private:
  torch::Tensor block(int level, const torch::Tensor& x);
  torch::Tensor upsample(const torch::Tensor& x, const torch::Tensor& like) const;

  PixelDecoderOptions options_;
  std::vector<torch::nn::Conv2d> refine_;  // C2, C3, C4, C5
  std::vector<torch::nn::GroupNorm> norms_;
};
TORCH_MODULE(PixelDecoder);

/// DETR-style normalised sine encoding of the pixel grid, [H*W, D].
torch::Tensor sine_position_encoding(int64_t height, int64_t width, int64_t dim,
                                     torch::Dtype dtype = torch::kFloat32);

/// Replaces all-false rows of a foreground mask [B,N,L] with all-true.
torch::Tensor with_empty_row_fallback(const torch::Tensor& foreground);

class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t dim, int64_t heads);
  /// query [B,N,D], key/value [B,L,D]; `blocked` is an optional [B,N,L] bool
  /// mask of disallowed keys. Returns [B,N,D].
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key,
                        const torch::Tensor& value, const torch::Tensor& blocked = {});

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(MultiHeadAttention);

/// Masked cross-attention, query self-attention, then a two-layer
/// feed-forward block; each followed by a residual add and LayerNorm.
class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim);

  /// queries/query_pos [B,N,D]; memory [B,L,D]; memory_pos [L,D] or [B,L,D];
  /// `foreground` is an optional [B,N,L] bool mask (empty rows fall back to
  /// full attention).
  QuerySet forward(const QuerySet& queries, const torch::Tensor& query_pos,
                   const torch::Tensor& memory, const torch::Tensor& memory_pos,
                   const torch::Tensor& foreground = {});

  MultiHeadAttention cross_attn{nullptr}, self_attn{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
  torch::nn::Linear ffn1{nullptr}, ffn2{nullptr};
};
TORCH_MODULE(DecoderLayer);

struct LayerPrediction {
  torch::Tensor class_logits;    // [B,N,2]
  torch::Tensor mask_logits;     // [B,N,H/4,W/4]
  torch::Tensor attention_mask;  // foreground [B,N,L_next] bool
};

/// mask_logits[b,k,y,x] = <embed[b,k,:], per_pixel[b,:,y,x]>.
torch::Tensor mask_logits_from_embeddings(const torch::Tensor& mask_embed,
                                          const torch::Tensor& per_pixel);

/// (sigmoid(mask_logits) resampled to (height, width)) > 0.5, flattened to
/// [B,N,height*width]. Detached from the graph.
torch::Tensor attention_foreground(const torch::Tensor& mask_logits, int64_t height,
                                   int64_t width);

class PredictionHeadsImpl : public torch::nn::Module {
 public:
  PredictionHeadsImpl(int64_t dim, int64_t num_classes = 2);

  /// `next_size` is the resolution of the level the next decoder layer reads.
  LayerPrediction forward(const QuerySet& queries, const torch::Tensor& per_pixel,
                          std::pair<int64_t, int64_t> next_size);

  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear class_embed{nullptr};
  torch::nn::Sequential mask_embed{nullptr};
};
TORCH_MODULE(PredictionHeads);

struct ModelOutput {
  std::vector<LayerPrediction> layers;  // decoder_layers + 1 entries
  torch::Tensor per_pixel;
  torch::Tensor c2_before_oaem;  // projected C2
  torch::Tensor c2_after_oaem;   // C2 fed to the pixel decoder
  std::optional<OQGState> oqg_state;
};

class O2FormerImpl : public torch::nn::Module {
 public:
  explicit O2FormerImpl(const ModelConfig& config);

  /// `images` is [B,3,H,W] in [0,1].
  ModelOutput forward(const torch::Tensor& images);

  /// Final-layer instances per image at the input resolution.
  std::vector<InstanceSet> postprocess(const LayerPrediction& prediction, int64_t height,
                                       int64_t width) const;
  std::vector<InstanceSet> predict(const torch::Tensor& images);

  const ModelConfig& config() const { return config_; }

  Backbone backbone{nullptr};
  ChannelProjection projection{nullptr};
  OptimizedQueryGenerator oqg{nullptr};
  torch::Tensor query_feat;  // learned content queries when OQG is disabled
  torch::Tensor query_pos;   // additive positional query embedding (zero init)
  std::vector<OrientationAwareEmbedding> oaem;  // C2, C3, C4
  PixelDecoder pixel_decoder{nullptr};
  torch::Tensor level_embed;  // [3,D]
  std::vector<DecoderLayer> layers;
  PredictionHeads heads{nullptr};

 private:
  ModelConfig config_;
  std::shared_ptr<GeometryCache> cache_;
};
TORCH_MODULE(O2Former);

}  // namespace o2former
