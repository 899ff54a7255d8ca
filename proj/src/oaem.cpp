#include "o2former/oaem.hpp"

#include <cmath>
#include <numbers>

namespace o2former {

std::vector<double> rotation_angles(int64_t num_angles) {
  if (num_angles < 1) throw ConfigError("num_angles must be >= 1");
  std::vector<double> angles(static_cast<size_t>(num_angles));
  for (int64_t i = 0; i < num_angles; ++i) {
    angles[i] = static_cast<double>(i) * std::numbers::pi / static_cast<double>(num_angles);
  }
  return angles;
}

double lattice_coordinate(int64_t i, int64_t n) {
  if (n <= 1) return 0.0;
  return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
}

torch::Tensor build_rotation_grid(double theta, int64_t height, int64_t width) {
  if (height < 1 || width < 1) throw ShapeError("rotation grid needs H, W >= 1");
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  auto grid = torch::empty({height, width, 2}, torch::kFloat64);
  auto g = grid.accessor<double, 3>();
  for (int64_t i = 0; i < height; ++i) {
    const double y = lattice_coordinate(i, height);
    for (int64_t j = 0; j < width; ++j) {
      const double x = lattice_coordinate(j, width);
      if (theta == 0.0) {
        g[i][j][0] = x;
        g[i][j][1] = y;
      } else {
        g[i][j][0] = c * x - s * y;
        g[i][j][1] = s * x + c * y;
      }
    }
  }
  return grid;
}

namespace {

double unnormalize(double coord, int64_t size) {
  double p = (coord + 1.0) * 0.5 * static_cast<double>(size - 1);
  const double r = std::round(p);
  if (std::abs(p - r) < 1e-9) p = r;
  return p;
}

}  // namespace

SamplingPlan make_sampling_plan(const torch::Tensor& grid, int64_t in_height, int64_t in_width) {
  if (grid.dim() != 3 || grid.size(2) != 2) throw ShapeError("grid must be [H,W,2]");
  if (in_height < 1 || in_width < 1) throw ShapeError("sampling input must be non-empty");
  auto g = grid.to(torch::kFloat64).contiguous();
  if (!torch::isfinite(g).all().item<bool>()) throw ShapeError("grid contains non-finite values");
  SamplingPlan plan;
  plan.in_height = in_height;
  plan.in_width = in_width;
  plan.out_height = g.size(0);
  plan.out_width = g.size(1);
  const int64_t n = plan.out_height * plan.out_width;
  plan.indices = torch::zeros({4, n}, torch::kInt64);
  plan.weights = torch::zeros({4, n}, torch::kFloat64);
  auto idx = plan.indices.accessor<int64_t, 2>();
  auto wts = plan.weights.accessor<double, 2>();
  const double* gp = g.data_ptr<double>();
  for (int64_t p = 0; p < n; ++p) {
    const double ix = unnormalize(gp[2 * p], in_width);
    const double iy = unnormalize(gp[2 * p + 1], in_height);
    const double fx = std::floor(ix);
    const double fy = std::floor(iy);
    const double tx = ix - fx;
    const double ty = iy - fy;
    const int64_t x0 = static_cast<int64_t>(fx);
    const int64_t y0 = static_cast<int64_t>(fy);
    const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const double ws[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
    for (int k = 0; k < 4; ++k) {
      const bool inside = xs[k] >= 0 && xs[k] < in_width && ys[k] >= 0 && ys[k] < in_height;
      if (inside && ws[k] != 0.0) {
        idx[k][p] = ys[k] * in_width + xs[k];
        wts[k][p] = ws[k];
      }
    }
  }
  return plan;
}

torch::Tensor apply_sampling_plan(const torch::Tensor& f, const SamplingPlan& plan) {
  const bool batched = f.dim() == 4;
  if (!batched && f.dim() != 3) throw ShapeError("grid_sample expects [C,H,W] or [B,C,H,W]");
  if (f.size(-2) != plan.in_height || f.size(-1) != plan.in_width) {
    throw ShapeError("grid_sample: input size does not match sampling plan");
  }
  auto x = batched ? f : f.unsqueeze(0);
  auto flat = x.flatten(2);
  auto weights = plan.weights.to(flat.scalar_type());
  torch::Tensor out;
  for (int k = 0; k < 4; ++k) {
    auto term = flat.index_select(2, plan.indices[k]) * weights[k];
    out = k == 0 ? term : out + term;
  }
  out = out.reshape({x.size(0), x.size(1), plan.out_height, plan.out_width});
  return batched ? out : out.squeeze(0);
}

torch::Tensor grid_sample(const torch::Tensor& f, const torch::Tensor& grid) {
  if (grid.dim() == 3) {
    return apply_sampling_plan(f, make_sampling_plan(grid, f.size(-2), f.size(-1)));
  }
  if (grid.dim() != 4 || f.dim() != 4 || grid.size(0) != f.size(0)) {
    throw ShapeError("batched grid_sample needs [B,C,H,W] input and [B,H,W,2] grid");
  }
  std::vector<torch::Tensor> outs;
  for (int64_t b = 0; b < f.size(0); ++b) {
    outs.push_back(apply_sampling_plan(f[b], make_sampling_plan(grid[b], f.size(2), f.size(3))));
  }
  return torch::stack(outs);
}

torch::Tensor polar_embedding(int64_t height, int64_t width) {
  if (height < 1 || width < 1) throw ShapeError("polar embedding needs H, W >= 1");
  auto field = torch::empty({2, height, width}, torch::kFloat64);
  auto a = field.accessor<double, 3>();
  for (int64_t i = 0; i < height; ++i) {
    const double y = lattice_coordinate(i, height);
    for (int64_t j = 0; j < width; ++j) {
      const double x = lattice_coordinate(j, width);
      const double r = std::sqrt(x * x + y * y);
      const double theta = (x == 0.0 && y == 0.0) ? 0.0 : std::atan2(y, x);
      a[0][i][j] = r / std::numbers::sqrt2;
      a[1][i][j] = (theta + std::numbers::pi) / (2.0 * std::numbers::pi);
    }
  }
  return field;
}

const SamplingPlan& GeometryCache::rotation_plan(double theta, int64_t height, int64_t width) {
  std::lock_guard lock(mutex_);
  auto key = std::make_tuple(theta, height, width);
  auto it = plans_.find(key);
  if (it == plans_.end()) {
    it = plans_.emplace(key, make_sampling_plan(build_rotation_grid(theta, height, width),
                                                height, width)).first;
  }
  return it->second;
}

torch::Tensor GeometryCache::polar_field(int64_t height, int64_t width, torch::Dtype dtype) {
  std::lock_guard lock(mutex_);
  auto key = std::make_tuple(height, width, static_cast<int>(dtype));
  auto it = polar_.find(key);
  if (it == polar_.end()) {
    it = polar_.emplace(key, polar_embedding(height, width).to(dtype)).first;
  }
  return it->second;
}

OrientationBranchesImpl::OrientationBranchesImpl(int64_t channels, int64_t num_angles,
                                                 bool activation,
                                                 std::shared_ptr<GeometryCache> cache)
    : channels_(channels),
      angles_(rotation_angles(num_angles)),
      activation_(activation),
      cache_(cache ? std::move(cache) : std::make_shared<GeometryCache>()) {
  if (channels % num_angles != 0) {
    throw ConfigError("channel count " + std::to_string(channels) +
                      " is not divisible by num_angles " + std::to_string(num_angles));
  }
  const int64_t group = channels / num_angles;
  for (int64_t i = 0; i < num_angles; ++i) {
    convs_.push_back(register_module(
        "branch" + std::to_string(i),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(group, group, 3).padding(1).bias(true))));
  }
}

torch::Tensor OrientationBranchesImpl::forward(const torch::Tensor& input) {
  const bool batched = input.dim() == 4;
  auto x = batched ? input : input.unsqueeze(0);
  if (x.size(1) != channels_) throw ShapeError("orientation branches: channel mismatch");
  const int64_t h = x.size(2);
  const int64_t w = x.size(3);
  auto groups = x.chunk(num_angles(), 1);
  std::vector<torch::Tensor> outs;
  outs.reserve(groups.size());
  for (size_t i = 0; i < groups.size(); ++i) {
    auto rotated = apply_sampling_plan(groups[i], cache_->rotation_plan(angles_[i], h, w));
    outs.push_back(convs_[i]->forward(rotated));
  }
  auto y = torch::cat(outs, 1);
  if (activation_) y = torch::relu(y);
  return batched ? y : y.squeeze(0);
}

PolarProjectionImpl::PolarProjectionImpl(int64_t channels)
    : conv(register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, channels, 1)))) {}

torch::Tensor PolarProjectionImpl::forward(const torch::Tensor& polar) {
  const bool batched = polar.dim() == 4;
  auto y = conv->forward(batched ? polar : polar.unsqueeze(0));
  return batched ? y : y.squeeze(0);
}

DynamicFusionImpl::DynamicFusionImpl(int64_t channels)
    : gate(register_module("gate",
                           torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels, 2, 1)))) {}

torch::Tensor fuse_with_logits(const torch::Tensor& orient, const torch::Tensor& polar_proj,
                               const torch::Tensor& logits) {
  auto w = torch::softmax(logits, 1).narrow(1, 0, 1);
  return orient * w + polar_proj * (1.0 - w);
}

FusionState DynamicFusionImpl::forward(const torch::Tensor& orient,
                                       const torch::Tensor& polar_proj) {
  if (orient.sizes() != polar_proj.sizes()) throw ShapeError("dynamic fusion: shape mismatch");
  FusionState s;
  s.concat = torch::cat({orient, polar_proj}, 1);
  s.logits = gate->forward(s.concat);
  s.gate = torch::softmax(s.logits, 1).narrow(1, 0, 1);
  s.fused = orient * s.gate + polar_proj * (1.0 - s.gate);
  return s;
}

OrientationAwareEmbeddingImpl::OrientationAwareEmbeddingImpl(int64_t channels, int64_t num_angles,
                                                             bool activation,
                                                             std::shared_ptr<GeometryCache> cache)
    : cache_(cache ? std::move(cache) : std::make_shared<GeometryCache>()) {
  branches = register_module("branches",
                             OrientationBranches(channels, num_angles, activation, cache_));
  polar_projection = register_module("polar_projection", PolarProjection(channels));
  fusion = register_module("fusion", DynamicFusion(channels));
}

OrientationState OrientationAwareEmbeddingImpl::forward_with_state(const torch::Tensor& input) {
  auto x = input.dim() == 4 ? input : input.unsqueeze(0);
  OrientationState s;
  s.orient = branches->forward(x);
  s.polar = cache_->polar_field(x.size(2), x.size(3), x.scalar_type());
  auto polar_batch = s.polar.unsqueeze(0).expand({x.size(0), 2, x.size(2), x.size(3)});
  s.polar_proj = polar_projection->forward(polar_batch);
  s.fusion = fusion->forward(s.orient, s.polar_proj);
  return s;
}

torch::Tensor OrientationAwareEmbeddingImpl::forward(const torch::Tensor& input) {
  auto y = forward_with_state(input).fusion.fused;
  return input.dim() == 4 ? y : y.squeeze(0);
}

}  // namespace o2former
