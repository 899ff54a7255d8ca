#pragma once

// Synthetic SAR-like ship scenes: oriented hulls with a tapered bow on a
// speckled sea, optional shoreline with bright clutter, and COCO export.

#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "o2former/coco.hpp"
#include "o2former/core.hpp"
#include "o2former/image_io.hpp"

namespace o2former {

struct SceneSpec {
  int image_size = 128;
  int min_ships = 1;
  int max_ships = 4;
  double min_length = 24.0;
  double max_length = 56.0;
  double min_aspect = 0.25;  // width / length
  double max_aspect = 0.40;
  double min_width = 7.0;
  /// Fixed heading in radians; uniform over [0, pi) when absent.
  std::optional<double> fixed_angle;
  double min_separation = 3.0;  // px of sea kept between ships (ignored when dense)
  bool dense = false;           // ships packed side by side with 1-2 px gaps
  int looks = 4;
  bool shoreline = false;
  uint64_t seed = 0;
  int max_retries = 200;

  /// Throws ConfigError naming the offending field (prefix "scene.").
  void validate() const;
  /// 256 x 256 scenes with lengths 10..150 px, spanning all size buckets.
  static SceneSpec benchmark();
};

struct Scene {
  int height = 0;
  int width = 0;
  Image8 gray;                   // single channel
  InstanceSet gt;                // labels are all kShipClass
  std::vector<Polygon> outlines; // hull outline per instance
  bool inshore = false;
  bool dense = false;

  /// [3, H, W] float32 in [0, 1], the gray image replicated.
  torch::Tensor image() const;
};

/// Fully determined by `spec` (including its seed).
Scene generate_scene(const SceneSpec& spec);

/// Hull outline: rectangle stern section with an elliptical bow, centred at
/// (cx, cy), bow pointing along `angle`. Vertices rounded to 0.01 px.
Polygon ship_outline(double cx, double cy, double length, double width, double angle);

/// Box (Chebyshev) dilation by `radius` pixels.
BinaryMask dilate(const BinaryMask& mask, int radius);
/// Minimum Chebyshev distance between set pixels of two masks; -1 if either
/// is empty. Disjoint 8-adjacent masks have distance 1.
int chebyshev_distance(const BinaryMask& a, const BinaryMask& b);

struct DatasetSpec {
  SceneSpec scene;
  int num_images = 8;
  double inshore_fraction = 0.5;
  double dense_fraction = 0.25;
  double test_fraction = 0.0;  // the last round(n * f) images form the test split

  void validate() const;
};

/// Scene spec of image `index`: seed = scene.seed + index, with the inshore
/// and dense flags drawn from a stream derived from that seed.
SceneSpec image_spec(const DatasetSpec& spec, int index);

/// Writes images/img_NNNNNN.png, annotations.json and manifest.json under
/// `out_dir`. Returns the dataset as written.
CocoDataset generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

/// Split name -> image ids ("train", "test", "inshore", "offshore").
nlohmann::json load_manifest(const std::filesystem::path& dataset_dir);

}  // namespace o2former
