#pragma once

// COCO-style mask average precision with configurable size buckets.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "o2former/core.hpp"
#include <json.hpp>

namespace o2former {

/// |a n b| / |a u b|; 0 when both masks are empty. Throws ShapeError on a
/// shape mismatch.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

struct ThresholdMatch {
  std::vector<bool> true_positive;     // per prediction, in the given order
  std::vector<int64_t> matched_gt;     // gt index or -1
  int64_t false_negatives = 0;
  int64_t true_positives() const;
  int64_t false_positives() const;
};

/// Greedy matching of predictions (already in descending score order) to
/// ground truth: each prediction takes the highest-IoU unmatched gt with
/// IoU >= t.
ThresholdMatch match_at_threshold(const InstanceSet& preds, const InstanceSet& gts, double t);

inline constexpr int kRecallPoints = 101;

/// 101-point interpolated AP. Detections are ordered by descending score
/// with ties kept in input order; `num_gt` is the total ground-truth count.
/// Returns 0 when num_gt > 0 and there are no detections.
double average_precision(const std::vector<double>& scores, const std::vector<bool>& true_positive,
                         int64_t num_gt);

/// Interpolated precision at each of the 101 recall points.
std::array<double, kRecallPoints> precision_envelope(const std::vector<double>& scores,
                                                     const std::vector<bool>& true_positive,
                                                     int64_t num_gt);

enum class SizeBuckets {
  kPaper,  // S: area < 32^2, M: 32^2 <= area < 64^2, L: area >= 64^2
  kCoco,   // standard COCO: [0, 32^2], [32^2, 96^2], [96^2, inf), closed
};

struct AreaRange {
  double lo = 0.0;
  double hi = 1e10;
  bool closed = false;  // [lo, hi] when true, [lo, hi) otherwise
  bool contains(double area) const { return area >= lo && (closed ? area <= hi : area < hi); }
};

/// Ranges ordered {all, small, medium, large}.
std::array<AreaRange, 4> area_ranges(SizeBuckets buckets);
std::string to_string(SizeBuckets buckets);
SizeBuckets size_buckets_from_string(const std::string& name);

/// IoU thresholds 0.50, 0.55, ..., 0.95.
std::array<double, 10> iou_thresholds();

struct EvalOptions {
  SizeBuckets buckets = SizeBuckets::kPaper;
  int max_detections = 100;
};

struct EvalReport {
  std::optional<double> ap, ap50, ap75, ap_small, ap_medium, ap_large;
  /// Interpolated precision per IoU threshold over all areas.
  std::vector<std::array<double, kRecallPoints>> precision;
  int64_t num_gt = 0;
  int64_t num_predictions = 0;

  nlohmann::json to_json() const;
  std::string to_table(const std::string& title) const;
};

/// Mask AP summary over a set of images; `preds[i]` and `gts[i]` belong to
/// the same image. Buckets without ground truth are reported as undefined.
EvalReport coco_summary(const std::vector<InstanceSet>& preds, const std::vector<InstanceSet>& gts,
                        const EvalOptions& options = {});

}  // namespace o2former
