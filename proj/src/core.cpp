#include "o2former/core.hpp"

#include <cstring>
#include <sstream>

namespace o2former {

namespace {

std::string level_name(size_t i) { return "C" + std::to_string(i + 2); }

}  // namespace

FeatureMap::FeatureMap(torch::Tensor d, int64_t s) : data(std::move(d)), stride(s) {
  if (data.dim() != 3 && data.dim() != 4) {
    throw ShapeError("feature map must be [C,H,W] or [B,C,H,W], got " +
                     std::to_string(data.dim()) + " dims");
  }
  if (channels() < 1 || height() < 1 || width() < 1) {
    throw ShapeError("feature map channels, height and width must be >= 1");
  }
  if (stride < 1) throw ShapeError("feature map stride must be positive");
}

std::array<int64_t, kNumLevels> pyramid_channels(int64_t backbone_width) {
  return {4 * backbone_width, 8 * backbone_width, 16 * backbone_width, 32 * backbone_width};
}

const FeaturePyramid& validate_pyramid(const FeaturePyramid& p,
                                       const std::array<int64_t, kNumLevels>& channels) {
  if (p.levels.size() != kNumLevels) {
    throw ShapeError("expected 4 levels, got " + std::to_string(p.levels.size()));
  }
  for (size_t i = 0; i < p.levels.size(); ++i) {
    const auto& level = p.levels[i];
    if (level.stride != kLevelStrides[i]) {
      std::ostringstream os;
      os << level_name(i) << ": stride " << level.stride << ", expected " << kLevelStrides[i];
      throw ShapeError(os.str());
    }
    if (level.channels() != channels[i]) {
      std::ostringstream os;
      os << level_name(i) << ": " << level.channels() << " channels, expected " << channels[i];
      throw ShapeError(os.str());
    }
    if (p.input_height > 0 && p.input_width > 0 &&
        (level.height() != p.input_height / level.stride ||
         level.width() != p.input_width / level.stride)) {
      std::ostringstream os;
      os << level_name(i) << ": spatial size " << level.height() << "x" << level.width()
         << " inconsistent with input " << p.input_height << "x" << p.input_width;
      throw ShapeError(os.str());
    }
  }
  return p;
}

torch::Tensor flatten_pixels(const FeatureMap& f) { return flatten_pixels(f.data); }

torch::Tensor flatten_pixels(const torch::Tensor& chw) {
  if (chw.dim() == 3) return chw.flatten(1).transpose(0, 1).contiguous();
  if (chw.dim() == 4) return chw.flatten(2).transpose(1, 2).contiguous();
  throw ShapeError("flatten_pixels expects [C,H,W] or [B,C,H,W]");
}

torch::Tensor unflatten_pixels(const torch::Tensor& rows, int64_t height, int64_t width) {
  if (rows.size(-2) != height * width) {
    throw ShapeError("unflatten_pixels: row count " + std::to_string(rows.size(-2)) +
                     " != " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (rows.dim() == 2) return rows.transpose(0, 1).reshape({-1, height, width}).contiguous();
  if (rows.dim() == 3) {
    return rows.transpose(1, 2).reshape({rows.size(0), -1, height, width}).contiguous();
  }
  throw ShapeError("unflatten_pixels expects [L,C] or [B,L,C]");
}

QuerySet::QuerySet(torch::Tensor q, int64_t embed_dim) : queries(std::move(q)) {
  if (queries.dim() != 2 && queries.dim() != 3) {
    throw ShapeError("query set must be [N,D] or [B,N,D]");
  }
  if (queries.size(-1) != embed_dim) {
    throw ShapeError("query width " + std::to_string(queries.size(-1)) + ", expected " +
                     std::to_string(embed_dim));
  }
}

int64_t BinaryMask::area() const {
  int64_t n = 0;
  for (auto v : data) n += v != 0;
  return n;
}

BinaryMask BinaryMask::from_tensor(const torch::Tensor& t) {
  if (t.dim() != 2) throw ShapeError("mask tensor must be [H,W]");
  auto c = (t.to(torch::kCPU).to(torch::kFloat64) > 0.5).to(torch::kUInt8).contiguous();
  BinaryMask m(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
  std::memcpy(m.data.data(), c.data_ptr<uint8_t>(), m.data.size());
  return m;
}

torch::Tensor BinaryMask::to_tensor(torch::Dtype dtype) const {
  auto t = torch::empty({height, width}, torch::kUInt8);
  std::memcpy(t.data_ptr<uint8_t>(), data.data(), data.size());
  return t.to(dtype);
}

void InstanceSet::validate() const {
  if (labels.size() != masks.size()) throw ShapeError("labels do not align with masks");
  if (scores && scores->size() != masks.size()) {
    throw ShapeError("scores do not align with masks");
  }
  for (const auto& m : masks) {
    if (m.height != masks.front().height || m.width != masks.front().width) {
      throw ShapeError("instance masks must share one spatial shape");
    }
  }
}

torch::Tensor InstanceSet::mask_tensor(int height, int width, torch::Dtype dtype) const {
  if (masks.empty()) return torch::zeros({0, height, width}, dtype);
  std::vector<torch::Tensor> parts;
  parts.reserve(masks.size());
  for (const auto& m : masks) parts.push_back(m.to_tensor(dtype));
  return torch::stack(parts);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (num_queries < 1) fail("num_queries", "must be >= 1");
  if (num_angles < 1) fail("num_angles", "must be >= 1");
  if (embed_dim < 1) fail("embed_dim", "must be >= 1");
  if (embed_dim % num_angles != 0) fail("num_angles", "embed_dim must be divisible by num_angles");
  if (num_heads < 1 || embed_dim % num_heads != 0) {
    fail("num_heads", "embed_dim must be divisible by num_heads");
  }
  if (embed_dim % 4 != 0) fail("embed_dim", "must be divisible by 4 for 2-D positional encoding");
  if (decoder_layers < 0) fail("decoder_layers", "must be >= 0");
  if (backbone_width < 1) fail("backbone_width", "must be >= 1");
  if (ffn_dim < 1) fail("ffn_dim", "must be >= 1");
  if (!(eta >= 0.0)) fail("eta", "must be >= 0");
  if (score_threshold < 0.0 || score_threshold > 1.0) fail("score_threshold", "must be in [0,1]");
  if (mask_threshold < 0.0 || mask_threshold > 1.0) fail("mask_threshold", "must be in [0,1]");
}

void check_finite(const torch::Tensor& t, const std::string& what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw ShapeError(what + " contains non-finite values");
  }
}

}  // namespace o2former
