#pragma once

// Bipartite matching of query predictions to ground truth and the
// deep-supervision training loss (classification CE + mask BCE + soft dice).

#include <utility>
#include <vector>

#include "o2former/core.hpp"
#include "o2former/pipeline.hpp"

namespace o2former {

/// Dense row-major cost matrix with an optional per-entry breakdown.
struct CostMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> costs;
  std::vector<double> cls, bce, dice;

  CostMatrix() = default;
  CostMatrix(int64_t r, int64_t c) : rows(r), cols(c), costs(static_cast<size_t>(r * c), 0.0) {}
  double& at(int64_t r, int64_t c) { return costs[static_cast<size_t>(r * cols + c)]; }
  double at(int64_t r, int64_t c) const { return costs[static_cast<size_t>(r * cols + c)]; }

  static CostMatrix from_tensor(const torch::Tensor& t);
};

using Assignment = std::vector<std::pair<int64_t, int64_t>>;

/// Minimum-cost assignment of min(rows, cols) pairs (shortest augmenting
/// path with potentials). Pairs are sorted by row. Throws on non-finite costs.
Assignment hungarian_match(const CostMatrix& costs);
double assignment_cost(const CostMatrix& costs, const Assignment& a);

inline constexpr double kDiceEpsilon = 1.0;

struct PairCost {
  double cls = 0.0;   // -prob(gt class)
  double bce = 0.0;   // mean BCE of sigmoid(mask logits) vs mask
  double dice = 0.0;  // 1 - 2 sum(p*g) / (sum p + sum g + 1); 0 when both are empty
};

/// Matching cost components for one prediction/ground-truth pair. The mask is
/// given at the resolution of `mask_logits`.
PairCost pair_cost(const torch::Tensor& class_logits, const torch::Tensor& mask_logits, int label,
                   const torch::Tensor& gt_mask);

/// Soft dice per row of flattened probabilities [K,P] vs targets [K,P],
/// with the both-empty rule applied (empty prediction: no p > 0.5).
torch::Tensor soft_dice(const torch::Tensor& probs, const torch::Tensor& targets);

struct CostWeights {
  double cls = 2.0;
  double bce = 5.0;
  double dice = 5.0;
};

/// Weighted cost matrix [N_q, N_gt] for one image with the breakdown filled.
CostMatrix matching_costs(const torch::Tensor& class_logits, const torch::Tensor& mask_logits,
                          const torch::Tensor& gt_labels, const torch::Tensor& gt_masks,
                          const CostWeights& weights = {});

/// Ground truth of one image prepared for the loss.
struct LossTarget {
  torch::Tensor labels;  // [M] int64
  torch::Tensor masks;   // [M,h,w] float, area-averaged to the mask-logit grid
};

/// Area-averages full-resolution masks down to (height, width). The input
/// size must be an integer multiple of the target size.
LossTarget make_loss_target(const InstanceSet& gt, int64_t height, int64_t width,
                            torch::Dtype dtype = torch::kFloat32);

struct LossWeights {
  double cls = 2.0;
  double bce = 5.0;
  double dice = 5.0;
  double no_object = 0.1;  // class weight of "no object" in the CE
};

struct LossReport {
  torch::Tensor total;  // scalar, differentiable
  double cls = 0.0, bce = 0.0, dice = 0.0;  // weighted, summed over layers
  std::vector<double> per_layer;
  std::vector<Assignment> final_assignment;  // per image, last layer
};

/// Loss of a single layer; `assignments` receives the matching per image.
torch::Tensor layer_loss(const LayerPrediction& prediction, const std::vector<LossTarget>& targets,
                         const LossWeights& weights, double& cls, double& bce, double& dice,
                         std::vector<Assignment>* assignments = nullptr);

/// Sum of layer losses over every supervised layer.
LossReport total_loss(const std::vector<LayerPrediction>& layers,
                      const std::vector<LossTarget>& targets, const LossWeights& weights = {});

}  // namespace o2former
