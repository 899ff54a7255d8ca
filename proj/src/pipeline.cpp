#include "o2former/pipeline.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace o2former {

namespace F = torch::nn::functional;

int64_t norm_groups(int64_t channels) { return std::gcd(channels, int64_t{8}); }

namespace {

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1, bool bias = true) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(bias));
}

torch::nn::GroupNorm group_norm(int64_t channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(channels), channels));
}

void xavier_linear(torch::nn::Linear& l) {
  torch::NoGradGuard g;
  torch::nn::init::xavier_uniform_(l->weight);
  if (l->bias.defined()) l->bias.zero_();
}

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  conv1_ = register_module("conv1", conv(in_channels, out_channels, 3, stride, false));
  norm1_ = register_module("norm1", group_norm(out_channels));
  conv2_ = register_module("conv2", conv(out_channels, out_channels, 3, 1, false));
  norm2_ = register_module("norm2", group_norm(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = register_module("shortcut", conv(in_channels, out_channels, 1, stride, false));
    shortcut_norm_ = register_module("shortcut_norm", group_norm(out_channels));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(norm1_->forward(conv1_->forward(x)));
  y = norm2_->forward(conv2_->forward(y));
  auto skip = shortcut_ ? shortcut_norm_->forward(shortcut_->forward(x)) : x;
  return torch::relu(y + skip);
}

BackboneImpl::BackboneImpl(int64_t width) : width_(width) {
  stem_ = register_module(
      "stem", torch::nn::Sequential(conv(3, width, 3, 2, false), group_norm(width),
                                    torch::nn::ReLU(), conv(width, width, 3, 2, false),
                                    group_norm(width), torch::nn::ReLU()));
  const auto widths = pyramid_channels(width);
  int64_t in = width;
  for (int i = 0; i < kNumLevels; ++i) {
    stages_.push_back(register_module("stage" + std::to_string(i + 1),
                                      ResidualBlock(in, widths[i], i == 0 ? 1 : 2)));
    in = widths[i];
  }
}

FeaturePyramid BackboneImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 3) throw ShapeError("backbone expects [B,3,H,W]");
  if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0) {
    throw ShapeError("input height and width must be divisible by 32, got " +
                     std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)));
  }
  FeaturePyramid p;
  p.input_height = image.size(2);
  p.input_width = image.size(3);
  auto x = stem_->forward(image);
  for (int i = 0; i < kNumLevels; ++i) {
    x = stages_[i]->forward(x);
    p.levels.emplace_back(x, kLevelStrides[i]);
  }
  return p;
}

PixelDecoderImpl::PixelDecoderImpl(int64_t embed_dim, PixelDecoderOptions options)
    : options_(options) {
  for (int i = 0; i < kNumLevels; ++i) {
    refine_.push_back(register_module("refine" + std::to_string(i + 2),
                                      conv(embed_dim, embed_dim, 3, 1, !options.normalize)));
    if (options.normalize) {
      norms_.push_back(register_module("norm" + std::to_string(i + 2), group_norm(embed_dim)));
    }
  }
  embed = register_module("embed", conv(embed_dim, embed_dim, 1));
}

torch::Tensor PixelDecoderImpl::block(int level, const torch::Tensor& x) {
  auto y = refine_[level]->forward(x);
  if (options_.normalize) y = torch::relu(norms_[level]->forward(y));
  return y;
}

torch::Tensor PixelDecoderImpl::upsample(const torch::Tensor& x, const torch::Tensor& like) const {
  auto opts = F::InterpolateFuncOptions()
                  .size(std::vector<int64_t>{like.size(2), like.size(3)})
                  .mode(options_.upsample);
  if (std::holds_alternative<torch::enumtype::kBilinear>(options_.upsample)) {
    opts.align_corners(false);
  }
  return F::interpolate(x, opts);
}

PixelDecoderOutput PixelDecoderImpl::forward(const std::vector<FeatureMap>& levels) {
  if (levels.size() != kNumLevels) throw ShapeError("pixel decoder expects four levels");
  auto e5 = block(3, levels[3].data);
  auto e4 = block(2, levels[2].data + upsample(e5, levels[2].data));
  auto e3 = block(1, levels[1].data + upsample(e4, levels[1].data));
  auto a2 = block(0, levels[0].data);
  PixelDecoderOutput out;
  out.enhanced = {FeatureMap(e3, 8), FeatureMap(e4, 16), FeatureMap(e5, 32)};
  out.a2 = FeatureMap(a2, 4);
  out.per_pixel = embed->forward(a2 + upsample(e3, a2));
  return out;
}

torch::Tensor sine_position_encoding(int64_t height, int64_t width, int64_t dim,
                                     torch::Dtype dtype) {
  if (dim % 4 != 0) throw ShapeError("sine position encoding needs dim divisible by 4");
  const int64_t half = dim / 2;
  constexpr double kScale = 2.0 * std::numbers::pi;
  constexpr double kEps = 1e-6;
  constexpr double kTemperature = 10000.0;
  auto pos = torch::empty({height * width, dim}, torch::kFloat64);
  auto a = pos.accessor<double, 2>();
  for (int64_t i = 0; i < height; ++i) {
    const double y = (static_cast<double>(i) + 1.0) / (static_cast<double>(height) + kEps) * kScale;
    for (int64_t j = 0; j < width; ++j) {
      const double x = (static_cast<double>(j) + 1.0) / (static_cast<double>(width) + kEps) * kScale;
      for (int64_t k = 0; k < half; ++k) {
        const double t = std::pow(kTemperature, 2.0 * static_cast<double>(k / 2) / half);
        const bool even = k % 2 == 0;
        a[i * width + j][k] = even ? std::sin(y / t) : std::cos(y / t);
        a[i * width + j][half + k] = even ? std::sin(x / t) : std::cos(x / t);
      }
    }
  }
  return pos.to(dtype);
}

torch::Tensor with_empty_row_fallback(const torch::Tensor& foreground) {
  auto empty = foreground.logical_not().all(-1, /*keepdim=*/true);
  return foreground.logical_or(empty);
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
  if (dim % heads != 0) throw ConfigError("attention width must be divisible by head count");
  q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
  k_proj = register_module("k_proj", torch::nn::Linear(dim, dim));
  v_proj = register_module("v_proj", torch::nn::Linear(dim, dim));
  out_proj = register_module("out_proj", torch::nn::Linear(dim, dim));
  for (auto* l : {&q_proj, &k_proj, &v_proj, &out_proj}) xavier_linear(*l);
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key,
                                              const torch::Tensor& value,
                                              const torch::Tensor& blocked) {
  const int64_t b = query.size(0);
  const int64_t n = query.size(1);
  const int64_t l = key.size(1);
  const int64_t d = query.size(2);
  const int64_t dh = d / heads_;
  auto split = [&](const torch::Tensor& t, int64_t len) {
    return t.reshape({b, len, heads_, dh}).transpose(1, 2);
  };
  auto q = split(q_proj->forward(query), n);
  auto k = split(k_proj->forward(key), l);
  auto v = split(v_proj->forward(value), l);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  if (blocked.defined()) {
    scores = scores.masked_fill(blocked.unsqueeze(1), -std::numeric_limits<double>::infinity());
  }
  auto attn = torch::softmax(scores, -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, d});
  return out_proj->forward(out);
}

DecoderLayerImpl::DecoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim) {
  cross_attn = register_module("cross_attn", MultiHeadAttention(dim, heads));
  self_attn = register_module("self_attn", MultiHeadAttention(dim, heads));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ffn1 = register_module("ffn1", torch::nn::Linear(dim, ffn_dim));
  ffn2 = register_module("ffn2", torch::nn::Linear(ffn_dim, dim));
  xavier_linear(ffn1);
  xavier_linear(ffn2);
}

QuerySet DecoderLayerImpl::forward(const QuerySet& queries, const torch::Tensor& query_pos,
                                   const torch::Tensor& memory, const torch::Tensor& memory_pos,
                                   const torch::Tensor& foreground) {
  auto tgt = queries.queries;
  if (tgt.dim() != 3 || memory.dim() != 3) throw ShapeError("decoder layer expects batched inputs");
  auto mem_pos = memory_pos.dim() == 2 ? memory_pos.unsqueeze(0) : memory_pos;
  torch::Tensor blocked;
  if (foreground.defined()) {
    if (foreground.size(1) != tgt.size(1) || foreground.size(2) != memory.size(1)) {
      throw ShapeError("attention mask must be [B,N_q,L]");
    }
    blocked = with_empty_row_fallback(foreground).logical_not();
  }
  auto x = cross_attn->forward(tgt + query_pos, memory + mem_pos, memory, blocked);
  tgt = norm1->forward(tgt + x);
  auto qk = tgt + query_pos;
  tgt = norm2->forward(tgt + self_attn->forward(qk, qk, tgt));
  tgt = norm3->forward(tgt + ffn2->forward(torch::relu(ffn1->forward(tgt))));
  return QuerySet(tgt, tgt.size(-1));
}

torch::Tensor mask_logits_from_embeddings(const torch::Tensor& mask_embed,
                                          const torch::Tensor& per_pixel) {
  if (mask_embed.size(-1) != per_pixel.size(1)) throw ShapeError("mask embedding width mismatch");
  return torch::einsum("bqc,bchw->bqhw", {mask_embed, per_pixel});
}

torch::Tensor attention_foreground(const torch::Tensor& mask_logits, int64_t height,
                                   int64_t width) {
  torch::NoGradGuard no_grad;
  auto prob = torch::sigmoid(mask_logits.detach());
  if (prob.size(-2) != height || prob.size(-1) != width) {
    prob = F::interpolate(prob, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{height, width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
  }
  return (prob > 0.5).flatten(2);
}

PredictionHeadsImpl::PredictionHeadsImpl(int64_t dim, int64_t num_classes) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  class_embed = register_module("class_embed", torch::nn::Linear(dim, num_classes));
  mask_embed = register_module(
      "mask_embed",
      torch::nn::Sequential(torch::nn::Linear(dim, dim), torch::nn::ReLU(),
                            torch::nn::Linear(dim, dim), torch::nn::ReLU(),
                            torch::nn::Linear(dim, dim)));
}

LayerPrediction PredictionHeadsImpl::forward(const QuerySet& queries,
                                             const torch::Tensor& per_pixel,
                                             std::pair<int64_t, int64_t> next_size) {
  auto q = norm->forward(queries.queries);
  LayerPrediction p;
  p.class_logits = class_embed->forward(q);
  p.mask_logits = mask_logits_from_embeddings(mask_embed->forward(q), per_pixel);
  p.attention_mask = attention_foreground(p.mask_logits, next_size.first, next_size.second);
  return p;
}

O2FormerImpl::O2FormerImpl(const ModelConfig& config)
    : config_(config), cache_(std::make_shared<GeometryCache>()) {
  config_.validate();
  const int64_t d = config_.embed_dim;
  backbone = register_module("backbone", Backbone(config_.backbone_width));
  projection = register_module("projection", ChannelProjection(config_.native_channels(), d));
  if (config_.use_oqg) {
    oqg = register_module("oqg", OptimizedQueryGenerator(config_.num_queries, d, config_.eta));
  } else {
    query_feat = register_parameter("query_feat", torch::randn({config_.num_queries, d}));
  }
  query_pos = register_parameter("query_pos", torch::zeros({config_.num_queries, d}));
  if (config_.use_oaem) {
    for (int i = 0; i < 3; ++i) {
      oaem.push_back(register_module(
          "oaem_c" + std::to_string(i + 2),
          OrientationAwareEmbedding(d, config_.num_angles, config_.oaem_activation, cache_)));
    }
  }
  pixel_decoder = register_module("pixel_decoder", PixelDecoder(d));
  level_embed = register_parameter("level_embed", torch::randn({3, d}) * kPrototypeInitStd);
  for (int64_t i = 0; i < config_.decoder_layers; ++i) {
    layers.push_back(register_module("layer" + std::to_string(i),
                                      DecoderLayer(d, config_.num_heads, config_.ffn_dim)));
  }
  heads = register_module("heads", PredictionHeads(d));
}

ModelOutput O2FormerImpl::forward(const torch::Tensor& images) {
  const int64_t b = images.size(0);
  const int64_t d = config_.embed_dim;
  auto x = (images - 0.5) / 0.25;
  auto pyramid = backbone->forward(x);
  auto levels = projection->forward(pyramid);

  ModelOutput out;
  QuerySet queries;
  if (config_.use_oqg) {
    auto q = oqg->forward(levels);
    queries = std::move(q.queries);
    out.oqg_state = std::move(q.state);
  } else {
    queries = QuerySet(query_feat.unsqueeze(0).expand({b, config_.num_queries, d}), d);
  }
  auto qpos = query_pos.unsqueeze(0).expand({b, config_.num_queries, d});

  out.c2_before_oaem = levels[0].data;
  for (size_t i = 0; i < oaem.size(); ++i) {
    levels[i] = FeatureMap(oaem[i]->forward(levels[i].data), levels[i].stride);
  }
  out.c2_after_oaem = levels[0].data;

  auto decoded = pixel_decoder->forward(levels);
  out.per_pixel = decoded.per_pixel;

  // Decoder levels in round-robin order: stride 32, 16, 8.
  std::vector<torch::Tensor> memory, memory_pos;
  std::vector<std::pair<int64_t, int64_t>> sizes;
  for (int i = 0; i < 3; ++i) {
    const auto& e = decoded.enhanced[2 - i];
    memory.push_back(flatten_pixels(e.data) + level_embed[i]);
    memory_pos.push_back(sine_position_encoding(e.height(), e.width(), d, e.data.scalar_type()));
    sizes.emplace_back(e.height(), e.width());
  }

  out.layers.push_back(heads->forward(queries, out.per_pixel, sizes[0]));
  for (int64_t l = 0; l < config_.decoder_layers; ++l) {
    const auto level = static_cast<size_t>(l % 3);
    queries = layers[l]->forward(queries, qpos, memory[level], memory_pos[level],
                                 out.layers.back().attention_mask);
    out.layers.push_back(heads->forward(queries, out.per_pixel, sizes[(l + 1) % 3]));
  }
  return out;
}

std::vector<InstanceSet> O2FormerImpl::postprocess(const LayerPrediction& prediction,
                                                   int64_t height, int64_t width) const {
  torch::NoGradGuard no_grad;
  auto probs = torch::softmax(prediction.class_logits.detach(), -1)
                   .select(-1, kShipClass)
                   .to(torch::kFloat64);
  auto masks = torch::sigmoid(F::interpolate(prediction.mask_logits.detach(),
                                             F::InterpolateFuncOptions()
                                                 .size(std::vector<int64_t>{height, width})
                                                 .mode(torch::kBilinear)
                                                 .align_corners(false)))
                   .to(torch::kFloat64);
  std::vector<InstanceSet> result;
  for (int64_t b = 0; b < probs.size(0); ++b) {
    struct Candidate {
      double score;
      int64_t index;
    };
    std::vector<Candidate> kept;
    std::vector<torch::Tensor> binary(static_cast<size_t>(probs.size(1)));
    for (int64_t k = 0; k < probs.size(1); ++k) {
      const double p = probs[b][k].item<double>();
      if (!(p > config_.score_threshold)) continue;
      auto m = masks[b][k];
      auto bin = m > config_.mask_threshold;
      const double area = bin.sum().item<double>();
      if (area == 0.0) continue;
      const double mask_score = (m * bin).sum().item<double>() / area;
      kept.push_back({p * mask_score, k});
      binary[k] = bin;
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const Candidate& a, const Candidate& c) { return a.score > c.score; });
    InstanceSet set;
    set.scores.emplace();
    for (const auto& c : kept) {
      set.masks.push_back(BinaryMask::from_tensor(binary[c.index]));
      set.labels.push_back(static_cast<int>(kShipClass));
      set.scores->push_back(c.score);
    }
    result.push_back(std::move(set));
  }
  return result;
}

std::vector<InstanceSet> O2FormerImpl::predict(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  auto out = forward(images);
  return postprocess(out.layers.back(), images.size(2), images.size(3));
}

}  // namespace o2former
