#include "o2former/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace o2former {

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("mask_iou: masks differ in shape");
  }
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0;
    const bool y = b.data[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

int64_t ThresholdMatch::true_positives() const {
  return std::count(true_positive.begin(), true_positive.end(), true);
}

int64_t ThresholdMatch::false_positives() const {
  return static_cast<int64_t>(true_positive.size()) - true_positives();
}

namespace {

std::vector<std::vector<double>> iou_matrix(const InstanceSet& preds, const InstanceSet& gts) {
  std::vector<std::vector<double>> ious(preds.size(), std::vector<double>(gts.size(), 0.0));
  for (size_t d = 0; d < preds.size(); ++d) {
    for (size_t g = 0; g < gts.size(); ++g) ious[d][g] = mask_iou(preds.masks[d], gts.masks[g]);
  }
  return ious;
}

struct ImageEval {
  std::vector<double> scores;
  std::vector<bool> matched;
  std::vector<bool> ignored;
  int64_t num_gt = 0;
};

// Greedy matching with gts outside the area range ignored, mirroring the
// reference COCO evaluator: non-ignored gts are preferred, detections
// matched to an ignored gt and unmatched detections outside the range are
// ignored.
ImageEval evaluate_image(const std::vector<std::vector<double>>& ious,
                         const std::vector<size_t>& det_order, const std::vector<double>& scores,
                         const std::vector<double>& det_area, const std::vector<double>& gt_area,
                         double threshold, const AreaRange& range) {
  const size_t ng = gt_area.size();
  std::vector<size_t> gt_order(ng);
  std::iota(gt_order.begin(), gt_order.end(), 0);
  std::vector<bool> gt_ignore(ng);
  for (size_t g = 0; g < ng; ++g) gt_ignore[g] = !range.contains(gt_area[g]);
  std::stable_sort(gt_order.begin(), gt_order.end(),
                   [&](size_t a, size_t b) { return !gt_ignore[a] && gt_ignore[b]; });

  ImageEval e;
  for (size_t g = 0; g < ng; ++g) e.num_gt += !gt_ignore[g];
  std::vector<bool> gt_taken(ng, false);
  for (size_t d : det_order) {
    double best = std::min(threshold, 1.0 - 1e-10);
    int64_t match = -1;
    for (size_t gi = 0; gi < ng; ++gi) {
      const size_t g = gt_order[gi];
      if (gt_taken[g]) continue;
      if (match > -1 && !gt_ignore[match] && gt_ignore[g]) break;
      if (ious[d][g] < best) continue;
      best = ious[d][g];
      match = static_cast<int64_t>(g);
    }
    e.scores.push_back(scores[d]);
    if (match >= 0) {
      gt_taken[match] = true;
      e.matched.push_back(true);
      e.ignored.push_back(gt_ignore[match]);
    } else {
      e.matched.push_back(false);
      e.ignored.push_back(!range.contains(det_area[d]));
    }
  }
  return e;
}

std::vector<size_t> descending_order(const std::vector<double>& scores) {
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

ThresholdMatch match_at_threshold(const InstanceSet& preds, const InstanceSet& gts, double t) {
  auto ious = iou_matrix(preds, gts);
  ThresholdMatch m;
  std::vector<bool> taken(gts.size(), false);
  for (size_t d = 0; d < preds.size(); ++d) {
    double best = std::min(t, 1.0 - 1e-10);
    int64_t match = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || ious[d][g] < best) continue;
      best = ious[d][g];
      match = static_cast<int64_t>(g);
    }
    if (match >= 0) taken[match] = true;
    m.true_positive.push_back(match >= 0);
    m.matched_gt.push_back(match);
  }
  m.false_negatives = std::count(taken.begin(), taken.end(), false);
  return m;
}

std::array<double, kRecallPoints> precision_envelope(const std::vector<double>& scores,
                                                     const std::vector<bool>& true_positive,
                                                     int64_t num_gt) {
  std::array<double, kRecallPoints> q{};
  if (num_gt <= 0 || scores.empty()) return q;
  const auto order = descending_order(scores);
  const size_t n = order.size();
  std::vector<double> recall(n), precision(n);
  double tp = 0.0, fp = 0.0;
  for (size_t i = 0; i < n; ++i) {
    (true_positive[order[i]] ? tp : fp) += 1.0;
    recall[i] = tp / static_cast<double>(num_gt);
    precision[i] = tp / (tp + fp);
  }
  for (size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  for (int r = 0; r < kRecallPoints; ++r) {
    const double level = static_cast<double>(r) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    q[r] = it == recall.end() ? 0.0 : precision[static_cast<size_t>(it - recall.begin())];
  }
  return q;
}

double average_precision(const std::vector<double>& scores, const std::vector<bool>& true_positive,
                         int64_t num_gt) {
  if (scores.size() != true_positive.size()) {
    throw ShapeError("average_precision: scores and flags differ in length");
  }
  const auto q = precision_envelope(scores, true_positive, num_gt);
  return std::accumulate(q.begin(), q.end(), 0.0) / kRecallPoints;
}

std::array<AreaRange, 4> area_ranges(SizeBuckets buckets) {
  constexpr double kMax = 1e10;
  if (buckets == SizeBuckets::kPaper) {
    return {AreaRange{0, kMax, true}, AreaRange{0, 32.0 * 32.0, false},
            AreaRange{32.0 * 32.0, 64.0 * 64.0, false}, AreaRange{64.0 * 64.0, kMax, true}};
  }
  return {AreaRange{0, kMax, true}, AreaRange{0, 32.0 * 32.0, true},
          AreaRange{32.0 * 32.0, 96.0 * 96.0, true}, AreaRange{96.0 * 96.0, kMax, true}};
}

std::string to_string(SizeBuckets buckets) {
  return buckets == SizeBuckets::kPaper ? "paper" : "coco";
}

SizeBuckets size_buckets_from_string(const std::string& name) {
  if (name == "paper") return SizeBuckets::kPaper;
  if (name == "coco") return SizeBuckets::kCoco;
  throw ConfigError("eval.size_buckets: expected \"paper\" or \"coco\", got \"" + name + "\"");
}

std::array<double, 10> iou_thresholds() {
  std::array<double, 10> t{};
  for (int i = 0; i < 10; ++i) t[i] = 0.5 + 0.05 * i;
  return t;
}

EvalReport coco_summary(const std::vector<InstanceSet>& preds, const std::vector<InstanceSet>& gts,
                        const EvalOptions& options) {
  if (preds.size() != gts.size()) throw ShapeError("coco_summary: one prediction set per image");
  const auto thresholds = iou_thresholds();
  const auto ranges = area_ranges(options.buckets);

  struct Cached {
    std::vector<std::vector<double>> ious;
    std::vector<size_t> order;
    std::vector<double> scores, det_area, gt_area;
  };
  std::vector<Cached> cache(preds.size());
  EvalReport report;
  for (size_t i = 0; i < preds.size(); ++i) {
    preds[i].validate();
    gts[i].validate();
    auto& c = cache[i];
    const size_t nd = preds[i].size();
    c.scores = preds[i].scores.value_or(std::vector<double>(nd, 1.0));
    c.order = descending_order(c.scores);
    if (c.order.size() > static_cast<size_t>(options.max_detections)) {
      c.order.resize(static_cast<size_t>(options.max_detections));
    }
    c.ious = iou_matrix(preds[i], gts[i]);
    for (const auto& m : preds[i].masks) c.det_area.push_back(static_cast<double>(m.area()));
    for (const auto& m : gts[i].masks) c.gt_area.push_back(static_cast<double>(m.area()));
    report.num_gt += static_cast<int64_t>(gts[i].size());
    report.num_predictions += static_cast<int64_t>(c.order.size());
  }

  // ap[range][threshold]; undefined when the range holds no ground truth.
  std::array<std::array<std::optional<double>, 10>, 4> ap{};
  for (size_t r = 0; r < ranges.size(); ++r) {
    for (size_t t = 0; t < thresholds.size(); ++t) {
      std::vector<double> scores;
      std::vector<bool> tp;
      int64_t num_gt = 0;
      for (const auto& c : cache) {
        auto e = evaluate_image(c.ious, c.order, c.scores, c.det_area, c.gt_area, thresholds[t],
                                ranges[r]);
        num_gt += e.num_gt;
        for (size_t k = 0; k < e.scores.size(); ++k) {
          if (e.ignored[k]) continue;
          scores.push_back(e.scores[k]);
          tp.push_back(e.matched[k]);
        }
      }
      if (num_gt == 0) continue;
      const auto q = precision_envelope(scores, tp, num_gt);
      ap[r][t] = std::accumulate(q.begin(), q.end(), 0.0) / kRecallPoints;
      if (r == 0) report.precision.push_back(q);
    }
  }
  auto mean = [](const std::array<std::optional<double>, 10>& v) -> std::optional<double> {
    if (!v[0]) return std::nullopt;
    double s = 0.0;
    for (const auto& x : v) s += *x;
    return s / static_cast<double>(v.size());
  };
  report.ap = mean(ap[0]);
  report.ap50 = ap[0][0];
  report.ap75 = ap[0][5];
  report.ap_small = mean(ap[1]);
  report.ap_medium = mean(ap[2]);
  report.ap_large = mean(ap[3]);
  return report;
}

nlohmann::json EvalReport::to_json() const {
  auto value = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"AP_m", value(ap)},          {"AP50", value(ap50)},   {"AP75", value(ap75)},
          {"AP_S", value(ap_small)},    {"AP_M", value(ap_medium)}, {"AP_L", value(ap_large)}};
}

std::string EvalReport::to_table(const std::string& title) const {
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (v) {
      std::snprintf(buf, sizeof buf, "%7.3f", *v);
    } else {
      std::snprintf(buf, sizeof buf, "%7s", "undef");
    }
    return std::string(buf);
  };
  std::ostringstream os;
  os << title << "\n"
     << "   AP_m   AP50   AP75   AP_S   AP_M   AP_L\n"
     << cell(ap) << cell(ap50) << cell(ap75) << cell(ap_small) << cell(ap_medium)
     << cell(ap_large) << "\n";
  return os.str();
}

}  // namespace o2former
