#include "o2former/matching_loss.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace o2former {

namespace F = torch::nn::functional;

CostMatrix CostMatrix::from_tensor(const torch::Tensor& t) {
  if (t.dim() != 2) throw ShapeError("cost matrix must be 2-D");
  auto c = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  CostMatrix m(c.size(0), c.size(1));
  std::copy_n(c.data_ptr<double>(), m.costs.size(), m.costs.begin());
  return m;
}

namespace {

// Rows <= cols. Returns col index per row.
std::vector<int64_t> solve_assignment(int64_t n, int64_t m,
                                      const std::function<double(int64_t, int64_t)>& cost) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int64_t> p(m + 1, 0), way(m + 1, 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int64_t i0 = p[j0];
      double delta = kInf;
      int64_t j1 = 0;
      for (int64_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int64_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int64_t> col_of_row(static_cast<size_t>(n), -1);
  for (int64_t j = 1; j <= m; ++j) {
    if (p[j] != 0) col_of_row[p[j] - 1] = j - 1;
  }
  return col_of_row;
}

}  // namespace

Assignment hungarian_match(const CostMatrix& costs) {
  for (double c : costs.costs) {
    if (!std::isfinite(c)) throw ShapeError("hungarian_match: non-finite cost");
  }
  Assignment pairs;
  if (costs.rows == 0 || costs.cols == 0) return pairs;
  if (costs.rows <= costs.cols) {
    auto cols = solve_assignment(costs.rows, costs.cols,
                                 [&](int64_t r, int64_t c) { return costs.at(r, c); });
    for (int64_t r = 0; r < costs.rows; ++r) pairs.emplace_back(r, cols[r]);
  } else {
    auto rows = solve_assignment(costs.cols, costs.rows,
                                 [&](int64_t r, int64_t c) { return costs.at(c, r); });
    for (int64_t c = 0; c < costs.cols; ++c) pairs.emplace_back(rows[c], c);
    std::sort(pairs.begin(), pairs.end());
  }
  return pairs;
}

double assignment_cost(const CostMatrix& costs, const Assignment& a) {
  double total = 0.0;
  for (const auto& [r, c] : a) total += costs.at(r, c);
  return total;
}

torch::Tensor soft_dice(const torch::Tensor& probs, const torch::Tensor& targets) {
  auto num = 2.0 * (probs * targets).sum(-1);
  auto den = probs.sum(-1) + targets.sum(-1) + kDiceEpsilon;
  auto dice = 1.0 - num / den;
  auto both_empty = (probs.amax(-1) <= 0.5).logical_and(targets.sum(-1) == 0);
  return torch::where(both_empty, torch::zeros_like(dice), dice);
}

PairCost pair_cost(const torch::Tensor& class_logits, const torch::Tensor& mask_logits, int label,
                   const torch::Tensor& gt_mask) {
  if (mask_logits.sizes() != gt_mask.sizes()) {
    throw ShapeError("pair_cost: mask logits and ground truth must share a shape");
  }
  torch::NoGradGuard no_grad;
  auto logits = mask_logits.to(torch::kFloat64).flatten();
  auto g = gt_mask.to(torch::kFloat64).flatten();
  PairCost c;
  c.cls = -torch::softmax(class_logits.to(torch::kFloat64), -1)[label].item<double>();
  c.bce = F::binary_cross_entropy_with_logits(logits, g).item<double>();
  c.dice = soft_dice(torch::sigmoid(logits).unsqueeze(0), g.unsqueeze(0))[0].item<double>();
  return c;
}

CostMatrix matching_costs(const torch::Tensor& class_logits, const torch::Tensor& mask_logits,
                          const torch::Tensor& gt_labels, const torch::Tensor& gt_masks,
                          const CostWeights& weights) {
  torch::NoGradGuard no_grad;
  const int64_t n = class_logits.size(0);
  const int64_t m = gt_labels.size(0);
  CostMatrix out(n, m);
  if (m == 0) return out;
  auto x = mask_logits.detach().to(torch::kFloat64).flatten(1);
  auto g = gt_masks.to(torch::kFloat64).flatten(1);
  const double pixels = static_cast<double>(x.size(1));
  auto cls = -torch::softmax(class_logits.detach().to(torch::kFloat64), -1)
                  .index_select(1, gt_labels.to(torch::kInt64));
  auto pos = F::softplus(-x);
  auto neg = F::softplus(x);
  auto bce = (torch::matmul(pos, g.transpose(0, 1)) + torch::matmul(neg, (1.0 - g).transpose(0, 1))) /
             pixels;
  auto p = torch::sigmoid(x);
  auto num = 2.0 * torch::matmul(p, g.transpose(0, 1));
  auto den = p.sum(-1).unsqueeze(1) + g.sum(-1).unsqueeze(0) + kDiceEpsilon;
  auto dice = 1.0 - num / den;
  auto both_empty = (p.amax(-1) <= 0.5).unsqueeze(1).logical_and((g.sum(-1) == 0).unsqueeze(0));
  dice = torch::where(both_empty, torch::zeros_like(dice), dice);
  auto total = (weights.cls * cls + weights.bce * bce + weights.dice * dice).contiguous();

  auto copy = [](const torch::Tensor& t) {
    auto c = t.contiguous();
    return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  };
  out.costs = copy(total);
  out.cls = copy(cls);
  out.bce = copy(bce);
  out.dice = copy(dice);
  return out;
}

LossTarget make_loss_target(const InstanceSet& gt, int64_t height, int64_t width,
                            torch::Dtype dtype) {
  gt.validate();
  LossTarget t;
  t.labels = torch::empty({static_cast<int64_t>(gt.size())}, torch::kInt64);
  for (size_t i = 0; i < gt.size(); ++i) t.labels[i] = gt.labels[i];
  if (gt.empty()) {
    t.masks = torch::zeros({0, height, width}, dtype);
    return t;
  }
  const int64_t full_h = gt.masks.front().height;
  const int64_t full_w = gt.masks.front().width;
  if (full_h % height != 0 || full_w % width != 0) {
    throw ShapeError("mask size must be an integer multiple of the target grid");
  }
  auto masks = gt.mask_tensor(static_cast<int>(full_h), static_cast<int>(full_w), dtype);
  if (full_h == height && full_w == width) {
    t.masks = masks;
  } else {
    t.masks = F::avg_pool2d(masks.unsqueeze(1),
                            F::AvgPool2dFuncOptions({full_h / height, full_w / width}))
                  .squeeze(1);
  }
  return t;
}

torch::Tensor layer_loss(const LayerPrediction& prediction, const std::vector<LossTarget>& targets,
                         const LossWeights& weights, double& cls, double& bce, double& dice,
                         std::vector<Assignment>* assignments) {
  const auto& class_logits = prediction.class_logits;
  const auto& mask_logits = prediction.mask_logits;
  const int64_t batch = class_logits.size(0);
  const int64_t nq = class_logits.size(1);
  if (static_cast<int64_t>(targets.size()) != batch) {
    throw ShapeError("one loss target per image is required");
  }
  const CostWeights cost_weights{weights.cls, weights.bce, weights.dice};
  auto target_classes = torch::full({batch, nq}, kNoObjectClass, torch::kInt64);
  std::vector<torch::Tensor> src, tgt;
  int64_t num_masks = 0;
  if (assignments) assignments->clear();
  for (int64_t b = 0; b < batch; ++b) {
    const auto& t = targets[b];
    num_masks += t.labels.size(0);
    Assignment a;
    if (t.labels.size(0) > 0) {
      a = hungarian_match(matching_costs(class_logits[b], mask_logits[b], t.labels, t.masks,
                                         cost_weights));
      for (const auto& [q, g] : a) {
        target_classes[b][q] = t.labels[g].item<int64_t>();
        src.push_back(mask_logits[b][q]);
        tgt.push_back(t.masks[g]);
      }
    }
    if (assignments) assignments->push_back(std::move(a));
  }
  auto class_weight = torch::ones({2}, class_logits.options());
  {
    torch::NoGradGuard g;
    class_weight[kNoObjectClass] = weights.no_object;
  }
  auto ce = F::cross_entropy(class_logits.flatten(0, 1), target_classes.flatten(),
                             F::CrossEntropyFuncOptions().weight(class_weight));
  auto loss = weights.cls * ce;
  cls += weights.cls * ce.item<double>();
  if (!src.empty()) {
    const double denom = static_cast<double>(std::max<int64_t>(num_masks, 1));
    auto s = torch::stack(src).flatten(1);
    auto g = torch::stack(tgt).to(s.scalar_type()).flatten(1);
    auto bce_term = F::binary_cross_entropy_with_logits(
                        s, g, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
                        .mean(1)
                        .sum() /
                    denom;
    auto dice_term = soft_dice(torch::sigmoid(s), g).sum() / denom;
    loss = loss + weights.bce * bce_term + weights.dice * dice_term;
    bce += weights.bce * bce_term.item<double>();
    dice += weights.dice * dice_term.item<double>();
  }
  return loss;
}

LossReport total_loss(const std::vector<LayerPrediction>& layers,
                      const std::vector<LossTarget>& targets, const LossWeights& weights) {
  LossReport report;
  for (size_t l = 0; l < layers.size(); ++l) {
    const bool last = l + 1 == layers.size();
    auto loss = layer_loss(layers[l], targets, weights, report.cls, report.bce, report.dice,
                           last ? &report.final_assignment : nullptr);
    report.per_layer.push_back(loss.item<double>());
    report.total = report.total.defined() ? report.total + loss : loss;
  }
  if (!report.total.defined()) report.total = torch::zeros({});
  return report;
}

}  // namespace o2former
