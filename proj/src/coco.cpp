#include "o2former/coco.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace o2former {

std::vector<uint32_t> rle_counts(const BinaryMask& mask) {
  std::vector<uint32_t> counts;
  uint8_t current = 0;
  uint32_t run = 0;
  for (int x = 0; x < mask.width; ++x) {
    for (int y = 0; y < mask.height; ++y) {
      const uint8_t v = mask.at(y, x) != 0;
      if (v != current) {
        counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  }
  counts.push_back(run);
  return counts;
}

BinaryMask rle_decode_counts(const std::vector<uint32_t>& counts, int height, int width) {
  BinaryMask mask(height, width);
  const size_t total = static_cast<size_t>(height) * width;
  size_t pos = 0;
  uint8_t value = 0;
  for (uint32_t c : counts) {
    if (pos + c > total) throw IoError("RLE counts exceed the mask size");
    for (uint32_t k = 0; k < c; ++k, ++pos) {
      if (value) {
        const size_t x = pos / height;
        const size_t y = pos % height;
        mask.data[y * width + x] = 1;
      }
    }
    value ^= 1;
  }
  if (pos != total) throw IoError("RLE counts do not cover the mask");
  return mask;
}

std::string rle_to_string(const std::vector<uint32_t>& counts) {
  std::string s;
  for (size_t i = 0; i < counts.size(); ++i) {
    int64_t x = counts[i];
    if (i > 2) x -= static_cast<int64_t>(counts[i - 2]);
    bool more = true;
    while (more) {
      int64_t c = x & 0x1f;
      x >>= 5;
      more = (c & 0x10) ? x != -1 : x != 0;
      if (more) c |= 0x20;
      s.push_back(static_cast<char>(c + 48));
    }
  }
  return s;
}

std::vector<uint32_t> rle_from_string(const std::string& s) {
  std::vector<uint32_t> counts;
  size_t p = 0;
  while (p < s.size()) {
    int64_t x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= s.size()) throw IoError("truncated RLE string");
      const int64_t c = static_cast<int64_t>(s[p]) - 48;
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= static_cast<int64_t>(-1) * (int64_t{1} << (5 * k));
    }
    if (counts.size() > 2) x += counts[counts.size() - 2];
    if (x < 0) throw IoError("negative RLE run");
    counts.push_back(static_cast<uint32_t>(x));
  }
  return counts;
}

nlohmann::json encode_rle(const BinaryMask& mask) {
  return {{"size", {mask.height, mask.width}}, {"counts", rle_to_string(rle_counts(mask))}};
}

BinaryMask decode_rle(const nlohmann::json& rle) {
  const int h = rle.at("size").at(0).get<int>();
  const int w = rle.at("size").at(1).get<int>();
  const auto& counts = rle.at("counts");
  if (counts.is_string()) return rle_decode_counts(rle_from_string(counts.get<std::string>()), h, w);
  return rle_decode_counts(counts.get<std::vector<uint32_t>>(), h, w);
}

BinaryMask rasterize_polygon(const Polygon& poly, int height, int width) {
  BinaryMask mask(height, width);
  const size_t n = poly.size();
  if (n < 3) return mask;
  std::vector<double> xs;
  for (int y = 0; y < height; ++y) {
    const double py = y + 0.5;
    xs.clear();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
      const auto& a = poly[i];
      const auto& b = poly[j];
      if ((a.y > py) != (b.y > py)) xs.push_back((b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x);
    }
    std::sort(xs.begin(), xs.end());
    // Centre px is inside iff it lies in [xs[2k], xs[2k+1]).
    for (size_t k = 0; k + 1 < xs.size(); k += 2) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int x1 = std::min(width, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
      for (int x = x0; x < x1; ++x) mask.at(y, x) = 1;
    }
  }
  return mask;
}

bool is_convex(const Polygon& poly) {
  const size_t n = poly.size();
  if (n < 3) return false;
  int sign = 0;
  for (size_t i = 0; i < n; ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % n];
    const auto& c = poly[(i + 2) % n];
    const double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
    if (cross == 0.0) continue;
    const int s = cross > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    if (s != sign) return false;
  }
  return sign != 0;
}

nlohmann::json polygon_to_json(const Polygon& poly) {
  auto flat = nlohmann::json::array();
  for (const auto& p : poly) {
    flat.push_back(p.x);
    flat.push_back(p.y);
  }
  return flat;
}

Polygon polygon_from_json(const nlohmann::json& flat) {
  if (!flat.is_array() || flat.size() % 2 != 0) throw IoError("polygon must be a flat x,y list");
  Polygon poly;
  for (size_t i = 0; i + 1 < flat.size(); i += 2) {
    poly.push_back({flat[i].get<double>(), flat[i + 1].get<double>()});
  }
  return poly;
}

BinaryMask decode_segmentation(const nlohmann::json& segmentation, int height, int width) {
  if (segmentation.is_object()) {
    auto m = decode_rle(segmentation);
    if (m.height != height || m.width != width) throw IoError("RLE size differs from image size");
    return m;
  }
  if (!segmentation.is_array()) throw IoError("unsupported segmentation encoding");
  BinaryMask mask(height, width);
  for (const auto& part : segmentation) {
    auto m = rasterize_polygon(polygon_from_json(part), height, width);
    for (size_t i = 0; i < mask.data.size(); ++i) mask.data[i] |= m.data[i];
  }
  return mask;
}

std::array<double, 4> mask_bbox(const BinaryMask& mask) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return {0, 0, 0, 0};
  return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
          static_cast<double>(y1 - y0 + 1)};
}

nlohmann::json CocoDataset::to_json() const {
  nlohmann::json j;
  j["info"] = {{"description", "synthetic SAR ship scenes"}, {"version", "1.0"}};
  j["categories"] = nlohmann::json::array({{{"id", kShipCategoryId}, {"name", "ship"}}});
  j["images"] = nlohmann::json::array();
  for (const auto& im : images) {
    j["images"].push_back({{"id", im.id},
                           {"file_name", im.file_name},
                           {"height", im.height},
                           {"width", im.width},
                           {"scene", im.scene},
                           {"seed", im.seed}});
  }
  j["annotations"] = nlohmann::json::array();
  for (const auto& a : annotations) {
    const auto box = mask_bbox(a.mask);
    j["annotations"].push_back({{"id", a.id},
                                {"image_id", a.image_id},
                                {"category_id", a.category_id},
                                {"segmentation", a.segmentation},
                                {"area", a.mask.area()},
                                {"bbox", box},
                                {"iscrowd", 0}});
  }
  return j;
}

CocoDataset CocoDataset::from_json(const nlohmann::json& j) {
  CocoDataset d;
  for (const auto& im : j.at("images")) {
    CocoImage image;
    image.id = im.at("id").get<int64_t>();
    image.file_name = im.at("file_name").get<std::string>();
    image.height = im.at("height").get<int>();
    image.width = im.at("width").get<int>();
    image.scene = im.value("scene", std::string("offshore"));
    image.seed = im.value("seed", int64_t{0});
    d.images.push_back(std::move(image));
  }
  for (const auto& a : j.at("annotations")) {
    CocoAnnotation ann;
    ann.id = a.at("id").get<int64_t>();
    ann.image_id = a.at("image_id").get<int64_t>();
    ann.category_id = a.at("category_id").get<int>();
    ann.segmentation = a.at("segmentation");
    const auto& im = d.image(ann.image_id);
    ann.mask = decode_segmentation(ann.segmentation, im.height, im.width);
    d.annotations.push_back(std::move(ann));
  }
  return d;
}

const CocoImage& CocoDataset::image(int64_t id) const {
  for (const auto& im : images) {
    if (im.id == id) return im;
  }
  throw IoError("unknown image id " + std::to_string(id));
}

InstanceSet CocoDataset::instances(int64_t image_id) const {
  InstanceSet set;
  for (const auto& a : annotations) {
    if (a.image_id != image_id) continue;
    set.masks.push_back(a.mask);
    set.labels.push_back(a.category_id - kShipCategoryId);
  }
  return set;
}

nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_json(const std::filesystem::path& path, const nlohmann::json& j, int indent) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(indent) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

CocoDataset load_coco(const std::filesystem::path& path) {
  try {
    return CocoDataset::from_json(load_json(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

nlohmann::json predictions_to_json(const std::map<int64_t, InstanceSet>& preds) {
  auto out = nlohmann::json::array();
  for (const auto& [image_id, set] : preds) {
    for (size_t k = 0; k < set.size(); ++k) {
      out.push_back({{"image_id", image_id},
                     {"category_id", set.labels[k] + kShipCategoryId},
                     {"segmentation", encode_rle(set.masks[k])},
                     {"score", set.scores ? (*set.scores)[k] : 1.0}});
    }
  }
  return out;
}

std::map<int64_t, InstanceSet> predictions_from_json(const nlohmann::json& results,
                                                     const CocoDataset& dataset) {
  std::map<int64_t, InstanceSet> preds;
  for (const auto& im : dataset.images) {
    preds[im.id].scores.emplace();
  }
  for (const auto& r : results) {
    const int64_t id = r.at("image_id").get<int64_t>();
    const auto& im = dataset.image(id);
    auto& set = preds[id];
    set.masks.push_back(decode_segmentation(r.at("segmentation"), im.height, im.width));
    set.labels.push_back(r.at("category_id").get<int>() - kShipCategoryId);
    set.scores->push_back(r.at("score").get<double>());
  }
  return preds;
}

}  // namespace o2former
