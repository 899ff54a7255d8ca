#include "o2former/oqg.hpp"

namespace o2former {

ChannelProjectionImpl::ChannelProjectionImpl(const std::array<int64_t, kNumLevels>& in_channels,
                                             int64_t embed_dim) {
  for (int i = 0; i < kNumLevels; ++i) {
    convs_.push_back(register_module(
        "level" + std::to_string(i),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels[i], embed_dim, 1))));
  }
}

std::vector<FeatureMap> ChannelProjectionImpl::forward(const FeaturePyramid& pyramid) {
  if (pyramid.levels.size() != kNumLevels) {
    throw ShapeError("expected 4 levels, got " + std::to_string(pyramid.levels.size()));
  }
  std::vector<FeatureMap> out;
  out.reserve(kNumLevels);
  for (int i = 0; i < kNumLevels; ++i) {
    const auto& level = pyramid.levels[i];
    auto x = level.batched() ? level.data : level.data.unsqueeze(0);
    auto y = convs_[i]->forward(x);
    out.emplace_back(level.batched() ? y : y.squeeze(0), level.stride);
  }
  return out;
}

torch::Tensor pool_and_embed(const torch::Tensor& f, const torch::Tensor& scale_embedding) {
  if (f.dim() != 3 && f.dim() != 4) throw ShapeError("pool_and_embed expects [C,H,W] or [B,C,H,W]");
  if (scale_embedding.dim() != 1 || scale_embedding.size(0) != f.size(-3)) {
    throw ShapeError("scale embedding width must equal the channel count");
  }
  return f.mean({-2, -1}) + scale_embedding;
}

torch::Tensor stack_scales(const std::vector<torch::Tensor>& pooled) {
  if (pooled.size() != kNumLevels) throw ShapeError("stack_scales expects four vectors");
  return torch::stack(pooled, pooled.front().dim() - 1);
}

torch::Tensor scale_softmax(const torch::Tensor& logits) { return torch::softmax(logits, -1); }

torch::Tensor fuse_scales(const torch::Tensor& weights, const torch::Tensor& stacked) {
  if (weights.size(-1) != stacked.size(-2)) throw ShapeError("fuse_scales: scale count mismatch");
  return (weights.unsqueeze(-1) * stacked).sum(-2);
}

torch::Tensor prototype_similarity(const torch::Tensor& fused, const torch::Tensor& prototypes,
                                   double eps) {
  if (prototypes.dim() != 2 || fused.size(-1) != prototypes.size(1)) {
    throw ShapeError("prototype_similarity: width mismatch");
  }
  auto dots = torch::matmul(fused, prototypes.transpose(0, 1));
  auto fused_norm = fused.norm(2, -1, /*keepdim=*/true);
  auto proto_norm = prototypes.norm(2, -1);
  return dots / (fused_norm * proto_norm).clamp_min(eps);
}

torch::Tensor shift_prototypes(const torch::Tensor& prototypes, const torch::Tensor& similarity,
                               double eta) {
  if (similarity.size(-1) != prototypes.size(0)) {
    throw ShapeError("shift_prototypes: one similarity per prototype required");
  }
  return prototypes + eta * similarity.unsqueeze(-1);
}

OptimizedQueryGeneratorImpl::OptimizedQueryGeneratorImpl(int64_t num_queries, int64_t embed_dim,
                                                         double eta)
    : embed_dim_(embed_dim), eta_(eta) {
  if (eta < 0.0) throw ConfigError("eta must be >= 0");
  prototypes = register_parameter(
      "prototypes", torch::randn({num_queries, embed_dim}) * kPrototypeInitStd);
  scale_embeddings = register_parameter(
      "scale_embeddings", torch::randn({kNumLevels, embed_dim}) * kPrototypeInitStd);
  score = register_module("score", torch::nn::Linear(embed_dim, 1));
  output = register_module("output", torch::nn::Linear(embed_dim, embed_dim));
  torch::NoGradGuard no_grad;
  output->bias.zero_();
}

void OptimizedQueryGeneratorImpl::set_eta(double eta) {
  if (eta < 0.0) throw ConfigError("eta must be >= 0");
  eta_ = eta;
}

torch::Tensor OptimizedQueryGeneratorImpl::scale_attention(const torch::Tensor& stacked) {
  return scale_softmax(score->forward(stacked).squeeze(-1));
}

QuerySet OptimizedQueryGeneratorImpl::generate_queries(const torch::Tensor& similarity) {
  return QuerySet(output->forward(shift_prototypes(prototypes, similarity, eta_)), embed_dim_);
}

OQGOutput OptimizedQueryGeneratorImpl::forward(const std::vector<FeatureMap>& levels) {
  if (levels.size() != kNumLevels) throw ShapeError("OQG expects four projected levels");
  OQGState state;
  for (int i = 0; i < kNumLevels; ++i) {
    state.pooled.push_back(pool_and_embed(levels[i].data, scale_embeddings[i]));
  }
  state.stacked = stack_scales(state.pooled);
  state.weights = scale_attention(state.stacked);
  state.fused = fuse_scales(state.weights, state.stacked);
  state.similarity = prototype_similarity(state.fused, prototypes);
  auto queries = generate_queries(state.similarity);
  return {std::move(queries), std::move(state)};
}

}  // namespace o2former
