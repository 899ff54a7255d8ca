#pragma once

// COCO annotation and result files: compressed RLE, polygon rasterisation
// and (de)serialisation of datasets and prediction lists.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "o2former/core.hpp"

namespace o2former {

/// Run lengths over the column-major flattening, starting with zeros.
std::vector<uint32_t> rle_counts(const BinaryMask& mask);
BinaryMask rle_decode_counts(const std::vector<uint32_t>& counts, int height, int width);

/// Compressed COCO RLE string (the format used by the reference COCO API).
std::string rle_to_string(const std::vector<uint32_t>& counts);
std::vector<uint32_t> rle_from_string(const std::string& s);

/// {"size": [h, w], "counts": "<compressed>"}.
nlohmann::json encode_rle(const BinaryMask& mask);
/// Accepts compressed string or uncompressed list counts.
BinaryMask decode_rle(const nlohmann::json& rle);

struct Point {
  double x = 0.0;
  double y = 0.0;
};
using Polygon = std::vector<Point>;

/// Pixel (x, y) is set iff its centre (x + 0.5, y + 0.5) lies inside the
/// polygon (even-odd rule).
BinaryMask rasterize_polygon(const Polygon& poly, int height, int width);
bool is_convex(const Polygon& poly);
/// COCO flat [x0, y0, x1, y1, ...] list.
nlohmann::json polygon_to_json(const Polygon& poly);
Polygon polygon_from_json(const nlohmann::json& flat);

/// Rasterises a COCO "segmentation" field (polygon list or RLE).
BinaryMask decode_segmentation(const nlohmann::json& segmentation, int height, int width);

/// [x, y, w, h] of the mask's set pixels; zeros for an empty mask.
std::array<double, 4> mask_bbox(const BinaryMask& mask);

inline constexpr int kShipCategoryId = 1;

struct CocoImage {
  int64_t id = 0;
  std::string file_name;
  int height = 0;
  int width = 0;
  std::string scene = "offshore";  // "inshore" when a shoreline is present
  int64_t seed = 0;
};

struct CocoAnnotation {
  int64_t id = 0;
  int64_t image_id = 0;
  int category_id = kShipCategoryId;
  nlohmann::json segmentation;
  BinaryMask mask;  // decoded segmentation
};

struct CocoDataset {
  std::vector<CocoImage> images;
  std::vector<CocoAnnotation> annotations;

  nlohmann::json to_json() const;
  static CocoDataset from_json(const nlohmann::json& j);
  const CocoImage& image(int64_t id) const;
  /// Ground-truth instances of one image (labels are 0-based class ids).
  InstanceSet instances(int64_t image_id) const;
};

CocoDataset load_coco(const std::filesystem::path& path);
void save_json(const std::filesystem::path& path, const nlohmann::json& j, int indent = -1);
nlohmann::json load_json(const std::filesystem::path& path);

/// Results list entries {image_id, category_id, segmentation (RLE), score}.
nlohmann::json predictions_to_json(const std::map<int64_t, InstanceSet>& preds);
std::map<int64_t, InstanceSet> predictions_from_json(const nlohmann::json& results,
                                                     const CocoDataset& dataset);

}  // namespace o2former
