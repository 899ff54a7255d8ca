#include "o2former/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "o2former/rng.hpp"

namespace o2former {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kBowFraction = 0.3;
constexpr int kBowPoints = 9;

double round_centi(double v) { return std::round(v * 100.0) / 100.0; }

struct Hull {
  double cx, cy, length, width, angle;
};

// Half extents of the rotated hull's bounding box.
std::pair<double, double> half_extent(double length, double width, double angle) {
  const double c = std::abs(std::cos(angle));
  const double s = std::abs(std::sin(angle));
  return {0.5 * length * c + 0.5 * width * s, 0.5 * length * s + 0.5 * width * c};
}

bool intersects(const BinaryMask& a, const BinaryMask& b) {
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i] && b.data[i]) return true;
  }
  return false;
}

void merge_into(BinaryMask& dst, const BinaryMask& src) {
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] |= src.data[i];
}

struct Terrain {
  BinaryMask land;
  std::vector<double> reflectivity;  // land and clutter; 0 elsewhere
};

Terrain make_shoreline(int size, Xoshiro256& rng) {
  Terrain t{BinaryMask(size, size), std::vector<double>(static_cast<size_t>(size) * size, 0.0)};
  const int side = static_cast<int>(rng.uniform_int(0, 3));
  const double base = rng.uniform(0.15, 0.30);
  const double a1 = rng.uniform(0.02, 0.06);
  const double f1 = static_cast<double>(rng.uniform_int(1, 3));
  const double p1 = rng.uniform(0.0, 2.0 * kPi);
  const double a2 = rng.uniform(0.01, 0.03);
  const double f2 = static_cast<double>(rng.uniform_int(4, 8));
  const double p2 = rng.uniform(0.0, 2.0 * kPi);
  const double land_level = rng.uniform(0.35, 0.50);
  const double tex_f = rng.uniform(2.0, 5.0);

  auto depth = [&](double along) {
    const double u = along / size;
    return size * (base + a1 * std::sin(2.0 * kPi * f1 * u + p1) +
                   a2 * std::sin(2.0 * kPi * f2 * u + p2));
  };
  // (along, inward) coordinates of pixel (x, y) for the chosen side.
  auto frame = [&](int x, int y) -> std::pair<double, double> {
    switch (side) {
      case 0: return {x + 0.5, y + 0.5};
      case 1: return {x + 0.5, size - y - 0.5};
      case 2: return {y + 0.5, x + 0.5};
      default: return {y + 0.5, size - x - 0.5};
    }
  };
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const auto [along, inward] = frame(x, y);
      if (inward < depth(along)) {
        t.land.at(y, x) = 1;
        const double tex = 1.0 + 0.25 * std::sin(2.0 * kPi * tex_f * x / size) *
                                     std::cos(2.0 * kPi * tex_f * y / size);
        t.reflectivity[static_cast<size_t>(y) * size + x] = land_level * tex;
      }
    }
  }

  // Bright clutter (port structures) on land close to the waterline.
  const int blobs = static_cast<int>(rng.uniform_int(3, 8));
  for (int b = 0; b < blobs; ++b) {
    const double along = rng.uniform(0.0, size);
    const double inward = depth(along) - rng.uniform(1.0, 10.0);
    const double rx = rng.uniform(2.0, 6.0);
    const double ry = rng.uniform(2.0, 6.0);
    const double level = rng.uniform(0.8, 1.0);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const auto [a, i] = frame(x, y);
        const double dx = (a - along) / rx;
        const double dy = (i - inward) / ry;
        if (dx * dx + dy * dy <= 1.0 && t.land.at(y, x)) {
          t.reflectivity[static_cast<size_t>(y) * size + x] = level;
        }
      }
    }
  }
  return t;
}

}  // namespace

void SceneSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("scene." + field + ": " + why);
  };
  if (image_size < 32) fail("image_size", "must be at least 32");
  if (min_ships < 0) fail("min_ships", "must be non-negative");
  if (max_ships < min_ships) fail("max_ships", "must be >= min_ships");
  if (!(min_length > 0.0)) fail("min_length", "must be positive");
  if (max_length < min_length) fail("max_length", "must be >= min_length");
  if (!(min_aspect > 0.0) || max_aspect < min_aspect || max_aspect > 1.0) {
    fail("max_aspect", "need 0 < min_aspect <= max_aspect <= 1");
  }
  if (min_width < 1.0) fail("min_width", "must be at least 1");
  if (min_separation < 0.0) fail("min_separation", "must be non-negative");
  if (looks < 1) fail("looks", "must be a positive integer");
  if (max_retries < 1) fail("max_retries", "must be positive");
}

SceneSpec SceneSpec::benchmark() {
  SceneSpec s;
  s.image_size = 256;
  s.min_ships = 1;
  s.max_ships = 6;
  s.min_length = 10.0;
  s.max_length = 150.0;
  s.min_aspect = 0.22;
  s.max_aspect = 0.35;
  s.min_width = 3.0;
  return s;
}

torch::Tensor Scene::image() const {
  auto t = torch::from_blob(const_cast<uint8_t*>(gray.data.data()), {1, height, width},
                            torch::kUInt8)
               .to(torch::kFloat32)
               .div_(255.0f);
  return t.expand({3, height, width}).contiguous();
}

Polygon ship_outline(double cx, double cy, double length, double width, double angle) {
  const double bow = kBowFraction * length;
  const double x0 = 0.5 * length - bow;
  const double hw = 0.5 * width;
  Polygon local;
  local.push_back({-0.5 * length, -hw});
  for (int k = 0; k < kBowPoints; ++k) {
    const double phi = -0.5 * kPi + kPi * k / (kBowPoints - 1);
    local.push_back({x0 + bow * std::cos(phi), hw * std::sin(phi)});
  }
  local.push_back({-0.5 * length, hw});
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Polygon out;
  for (const auto& p : local) {
    out.push_back({round_centi(cx + c * p.x - s * p.y), round_centi(cy + s * p.x + c * p.y)});
  }
  return out;
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
  if (radius <= 0) return mask;
  BinaryMask rows(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (int k = std::max(0, x - radius); k <= std::min(mask.width - 1, x + radius); ++k) {
        rows.at(y, k) = 1;
      }
    }
  }
  BinaryMask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!rows.at(y, x)) continue;
      for (int k = std::max(0, y - radius); k <= std::min(mask.height - 1, y + radius); ++k) {
        out.at(k, x) = 1;
      }
    }
  }
  return out;
}

int chebyshev_distance(const BinaryMask& a, const BinaryMask& b) {
  std::vector<std::pair<int, int>> pa, pb;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (a.at(y, x)) pa.emplace_back(y, x);
      if (b.at(y, x)) pb.emplace_back(y, x);
    }
  }
  if (pa.empty() || pb.empty()) return -1;
  int best = std::max(a.height, a.width);
  for (const auto& [ya, xa] : pa) {
    for (const auto& [yb, xb] : pb) {
      best = std::min(best, std::max(std::abs(ya - yb), std::abs(xa - xb)));
    }
  }
  return best;
}

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  const int n = spec.image_size;
  Xoshiro256 rng(spec.seed);
  Scene scene;
  scene.height = scene.width = n;
  scene.inshore = spec.shoreline;
  scene.dense = spec.dense;
  scene.gt.scores.reset();

  const double sea = rng.uniform(0.08, 0.16);
  Terrain terrain{BinaryMask(n, n), std::vector<double>(static_cast<size_t>(n) * n, 0.0)};
  if (spec.shoreline) terrain = make_shoreline(n, rng);

  const int separation = static_cast<int>(std::ceil(spec.min_separation));
  const BinaryMask land_block = dilate(terrain.land, spec.dense ? 1 : separation + 1);
  BinaryMask ship_block(n, n);
  std::vector<Hull> hulls;
  std::vector<double> ship_level;

  const int target = static_cast<int>(rng.uniform_int(spec.min_ships, spec.max_ships));
  for (int s = 0; s < target; ++s) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      const double length = rng.uniform(spec.min_length, spec.max_length);
      const double width =
          std::max(spec.min_width, rng.uniform(spec.min_aspect, spec.max_aspect) * length);
      Hull h{0.0, 0.0, length, width, 0.0};
      int anchor = -1;
      if (spec.dense && !hulls.empty()) {
        anchor = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(hulls.size()) - 1));
        const Hull& a = hulls[static_cast<size_t>(anchor)];
        const double gap = rng.uniform(1.2, 2.2);
        const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double shift = rng.uniform(-0.25, 0.25) * a.length;
        const double offset = side * (0.5 * a.width + 0.5 * width + gap);
        h.angle = a.angle;
        h.cx = a.cx + shift * std::cos(a.angle) - offset * std::sin(a.angle);
        h.cy = a.cy + shift * std::sin(a.angle) + offset * std::cos(a.angle);
      } else {
        h.angle = spec.fixed_angle ? *spec.fixed_angle : rng.uniform(0.0, kPi);
        const auto [ex, ey] = half_extent(length, width, h.angle);
        if (2.0 * ex + 2.0 > n || 2.0 * ey + 2.0 > n) continue;
        h.cx = rng.uniform(ex + 1.0, n - ex - 1.0);
        h.cy = rng.uniform(ey + 1.0, n - ey - 1.0);
      }
      const auto [ex, ey] = half_extent(length, width, h.angle);
      if (h.cx - ex < 0.5 || h.cy - ey < 0.5 || h.cx + ex > n - 0.5 || h.cy + ey > n - 0.5) {
        continue;
      }
      Polygon outline = ship_outline(h.cx, h.cy, length, width, h.angle);
      BinaryMask mask = rasterize_polygon(outline, n, n);
      if (mask.area() < 4) continue;
      if (intersects(mask, land_block) || intersects(mask, ship_block)) continue;
      if (anchor >= 0) {
        const int d = chebyshev_distance(mask, scene.gt.masks[static_cast<size_t>(anchor)]);
        if (d > 3) continue;
      }
      ship_block = [&] {
        BinaryMask b = ship_block;
        merge_into(b, dilate(mask, spec.dense ? 1 : separation));
        return b;
      }();
      hulls.push_back(h);
      ship_level.push_back(rng.uniform(0.55, 0.85));
      scene.gt.masks.push_back(std::move(mask));
      scene.gt.labels.push_back(static_cast<int>(kShipClass));
      scene.outlines.push_back(std::move(outline));
      placed = true;
    }
  }

  std::vector<double> reflectivity(static_cast<size_t>(n) * n, sea);
  for (size_t i = 0; i < reflectivity.size(); ++i) {
    if (terrain.land.data[i]) reflectivity[i] = terrain.reflectivity[i];
  }
  for (size_t k = 0; k < scene.gt.masks.size(); ++k) {
    const auto& m = scene.gt.masks[k];
    for (size_t i = 0; i < reflectivity.size(); ++i) {
      if (m.data[i]) reflectivity[i] = ship_level[k];
    }
  }

  scene.gray = Image8{n, n, 1, std::vector<uint8_t>(static_cast<size_t>(n) * n)};
  const double looks = static_cast<double>(spec.looks);
  for (size_t i = 0; i < reflectivity.size(); ++i) {
    const double v = reflectivity[i] * rng.gamma(looks, 1.0 / looks);
    scene.gray.data[i] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  return scene;
}

void DatasetSpec::validate() const {
  scene.validate();
  if (num_images < 1) throw ConfigError("dataset.num_images: must be positive");
  auto fraction = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConfigError(std::string("dataset.") + name + ": must lie in [0, 1]");
    }
  };
  fraction(inshore_fraction, "inshore_fraction");
  fraction(dense_fraction, "dense_fraction");
  fraction(test_fraction, "test_fraction");
}

SceneSpec image_spec(const DatasetSpec& spec, int index) {
  SceneSpec s = spec.scene;
  s.seed = spec.scene.seed + static_cast<uint64_t>(index);
  auto flags = derived_stream(s.seed, 7);
  s.shoreline = flags.uniform() < spec.inshore_fraction;
  s.dense = flags.uniform() < spec.dense_fraction;
  return s;
}

CocoDataset generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError((out_dir / "images").string() + ": " + ec.message());

  CocoDataset dataset;
  nlohmann::json manifest = {{"train", nlohmann::json::array()},
                             {"test", nlohmann::json::array()},
                             {"inshore", nlohmann::json::array()},
                             {"offshore", nlohmann::json::array()}};
  const int num_test = static_cast<int>(std::lround(spec.num_images * spec.test_fraction));
  int64_t ann_id = 1;
  for (int i = 0; i < spec.num_images; ++i) {
    const SceneSpec s = image_spec(spec, i);
    const Scene scene = generate_scene(s);
    char name[32];
    std::snprintf(name, sizeof name, "images/img_%06d.png", i);
    write_png(out_dir / name, gray_to_rgb(scene.gray));

    const int64_t image_id = i + 1;
    dataset.images.push_back({image_id, name, scene.height, scene.width,
                              scene.inshore ? "inshore" : "offshore",
                              static_cast<int64_t>(s.seed)});
    for (size_t k = 0; k < scene.gt.size(); ++k) {
      CocoAnnotation ann;
      ann.id = ann_id++;
      ann.image_id = image_id;
      ann.mask = scene.gt.masks[k];
      const Polygon& outline = scene.outlines[k];
      if (is_convex(outline) && rasterize_polygon(outline, scene.height, scene.width) == ann.mask) {
        ann.segmentation = nlohmann::json::array({polygon_to_json(outline)});
      } else {
        ann.segmentation = encode_rle(ann.mask);
      }
      dataset.annotations.push_back(std::move(ann));
    }
    manifest[i < spec.num_images - num_test ? "train" : "test"].push_back(image_id);
    manifest[scene.inshore ? "inshore" : "offshore"].push_back(image_id);
  }
  save_json(out_dir / "annotations.json", dataset.to_json());
  save_json(out_dir / "manifest.json", manifest, 2);
  return dataset;
}

nlohmann::json load_manifest(const std::filesystem::path& dataset_dir) {
  return load_json(dataset_dir / "manifest.json");
}

}  // namespace o2former
