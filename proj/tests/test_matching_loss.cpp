#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "o2former/matching_loss.hpp"
#include "test_util.hpp"

using namespace o2former;
using o2former::testutil::f64;

namespace {

CostMatrix matrix(int64_t r, int64_t c, std::initializer_list<double> v) {
  CostMatrix m(r, c);
  std::copy(v.begin(), v.end(), m.costs.begin());
  return m;
}

// Minimum over every injective map of the shorter side into the longer one.
double brute_force_min(const CostMatrix& m) {
  const bool transpose = m.rows > m.cols;
  const int64_t small = std::min(m.rows, m.cols), large = std::max(m.rows, m.cols);
  std::vector<int64_t> perm(large);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int64_t i = 0; i < small; ++i) c += transpose ? m.at(perm[i], i) : m.at(i, perm[i]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

BinaryMask box(int h, int w, int y0, int x0, int y1, int x1) {
  BinaryMask m(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(y, x) = 1;
  return m;
}

LayerPrediction prediction(const torch::Tensor& cls, const torch::Tensor& masks) {
  LayerPrediction p;
  p.class_logits = cls;
  p.mask_logits = masks;
  return p;
}

}  // namespace

TEST(Hungarian, SquareExample) {
  auto m = matrix(3, 3, {4, 1, 3, 2, 0, 5, 3, 2, 2});
  auto a = hungarian_match(m);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_DOUBLE_EQ(assignment_cost(m, a), 5.0);
  EXPECT_EQ(a[0], (std::pair<int64_t, int64_t>{0, 1}));
  EXPECT_EQ(a[1], (std::pair<int64_t, int64_t>{1, 0}));
  EXPECT_EQ(a[2], (std::pair<int64_t, int64_t>{2, 2}));
}

TEST(Hungarian, RectangularBothOrientations) {
  auto wide = matrix(2, 3, {5, 1, 9, 2, 8, 0.5});
  auto a = hungarian_match(wide);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_DOUBLE_EQ(assignment_cost(wide, a), 1.5);
  auto tall = matrix(3, 2, {5, 2, 1, 8, 9, 0.5});
  auto b = hungarian_match(tall);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_DOUBLE_EQ(assignment_cost(tall, b), 1.5);
  EXPECT_TRUE(std::is_sorted(b.begin(), b.end()));
}

TEST(Hungarian, EmptyAndNonFinite) {
  EXPECT_TRUE(hungarian_match(CostMatrix(4, 0)).empty());
  EXPECT_TRUE(hungarian_match(CostMatrix(0, 3)).empty());
  auto bad = matrix(2, 2, {1, std::nan(""), 0, 1});
  EXPECT_THROW(hungarian_match(bad), ShapeError);
}

TEST(Hungarian, MatchesBruteForceOnRandomMatrices) {
  std::mt19937_64 rng(42);
  for (int t = 0; t < 200; ++t) {
    const int64_t r = 1 + rng() % 6, c = 1 + rng() % 6;
    CostMatrix m(r, c);
    const bool integer = t % 2 == 0;  // integer costs exercise ties
    for (auto& v : m.costs) {
      v = integer ? static_cast<double>(rng() % 4) : std::uniform_real_distribution<double>(-3, 3)(rng);
    }
    auto a = hungarian_match(m);
    ASSERT_EQ(a.size(), static_cast<size_t>(std::min(r, c)));
    std::set<int64_t> rows, cols;
    for (auto [i, j] : a) {
      rows.insert(i);
      cols.insert(j);
    }
    EXPECT_EQ(rows.size(), a.size());
    EXPECT_EQ(cols.size(), a.size());
    EXPECT_NEAR(assignment_cost(m, a), brute_force_min(m), 1e-9) << "trial " << t;
  }
}

TEST(Hungarian, CostCovariantUnderRowPermutation) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    CostMatrix m(5, 4);
    for (auto& v : m.costs) v = std::uniform_real_distribution<double>(0, 1)(rng);
    std::vector<int64_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    CostMatrix p(5, 4);
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = 0; j < 4; ++j) p.at(i, j) = m.at(perm[i], j);
    EXPECT_NEAR(assignment_cost(m, hungarian_match(m)), assignment_cost(p, hungarian_match(p)), 1e-12);
  }
}

TEST(PairCost, HandComputedTwoByTwo) {
  auto logits = torch::zeros({2, 2}, f64());
  auto g = torch::tensor({{1.0, 0.0}, {0.0, 0.0}}, f64());
  auto c = pair_cost(torch::zeros({2}, f64()), logits, 0, g);
  EXPECT_NEAR(c.cls, -0.5, 1e-12);
  EXPECT_NEAR(c.bce, std::log(2.0), 1e-12);
  // 1 - 2 * 0.5 / (2 + 1 + 1)
  EXPECT_NEAR(c.dice, 0.75, 1e-12);
}

TEST(PairCost, SaturatedPerfectPrediction) {
  auto g = torch::zeros({4, 4}, f64());
  g.narrow(0, 1, 2).narrow(1, 1, 2).fill_(1.0);
  auto logits = (g * 2 - 1) * 50.0;
  auto c = pair_cost(torch::tensor({30.0, -30.0}, f64()), logits, 0, g);
  EXPECT_NEAR(c.cls, -1.0, 1e-12);
  EXPECT_NEAR(c.bce, 0.0, 1e-12);
  // Only the smoothing constant remains: 1 - 2A / (2A + 1).
  EXPECT_NEAR(c.dice, 1.0 / 9.0, 1e-12);
}

TEST(PairCost, BothEmptyAndMissedObject) {
  auto empty = torch::zeros({3, 3}, f64());
  EXPECT_EQ(pair_cost(torch::zeros({2}), torch::full({3, 3}, -8.0, f64()), 0, empty).dice, 0.0);
  auto g = empty.clone();
  g[1][1] = 1.0;
  auto c = pair_cost(torch::zeros({2}), torch::full({3, 3}, -30.0, f64()), 0, g);
  EXPECT_NEAR(c.dice, 1.0, 1e-12);
  // A confident prediction against an empty target is not "both empty".
  auto d = pair_cost(torch::zeros({2}), torch::full({3, 3}, 30.0, f64()), 0, empty);
  EXPECT_NEAR(d.dice, 1.0, 1e-12);
  EXPECT_THROW(pair_cost(torch::zeros({2}), torch::zeros({2, 3}), 0, empty), ShapeError);
}

TEST(MatchingCosts, AgreesWithPairCostLoop) {
  torch::manual_seed(3);
  auto cls = torch::randn({5, 2}, f64());
  auto masks = torch::randn({5, 6, 6}, f64()) * 3;
  auto gt = (torch::rand({3, 6, 6}, f64()) > 0.6).to(torch::kFloat64);
  auto labels = torch::zeros({3}, torch::kInt64);
  CostWeights w{2.0, 5.0, 5.0};
  auto m = matching_costs(cls, masks, labels, gt, w);
  ASSERT_EQ(m.rows, 5);
  ASSERT_EQ(m.cols, 3);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 3; ++j) {
      auto c = pair_cost(cls[i], masks[i], 0, gt[j]);
      EXPECT_NEAR(m.at(i, j), w.cls * c.cls + w.bce * c.bce + w.dice * c.dice, 1e-9);
      EXPECT_NEAR(m.dice[i * 3 + j], c.dice, 1e-12);
    }
}

TEST(LossTarget, AreaAveragedDownsampling) {
  InstanceSet gt;
  gt.masks = {box(8, 8, 0, 0, 2, 2), box(8, 8, 1, 1, 3, 3)};
  gt.labels = {0, 0};
  auto t = make_loss_target(gt, 4, 4);
  EXPECT_EQ(t.masks.sizes(), (std::vector<int64_t>{2, 4, 4}));
  EXPECT_FLOAT_EQ(t.masks[0][0][0].item<float>(), 1.0f);
  EXPECT_FLOAT_EQ(t.masks[0].sum().item<float>(), 1.0f);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) EXPECT_FLOAT_EQ(t.masks[1][y][x].item<float>(), 0.25f);
  EXPECT_THROW(make_loss_target(gt, 3, 3), ShapeError);
  auto e = make_loss_target(InstanceSet{}, 4, 4);
  EXPECT_EQ(e.masks.size(0), 0);
}

TEST(LayerLoss, InvariantToQueryPermutation) {
  torch::manual_seed(5);
  auto cls = torch::randn({1, 4, 2}, f64());
  auto masks = torch::randn({1, 4, 4, 4}, f64());
  InstanceSet gt;
  gt.masks = {box(4, 4, 0, 0, 2, 2), box(4, 4, 2, 1, 4, 4)};
  gt.labels = {0, 0};
  std::vector<LossTarget> targets = {make_loss_target(gt, 4, 4, torch::kFloat64)};
  auto perm = torch::tensor({2, 0, 3, 1}, torch::kInt64);
  double a1 = 0, a2 = 0, a3 = 0, b1 = 0, b2 = 0, b3 = 0;
  auto la = layer_loss(prediction(cls, masks), targets, {}, a1, a2, a3);
  auto lb = layer_loss(prediction(cls.index_select(1, perm), masks.index_select(1, perm)), targets, {}, b1, b2,
                       b3);
  EXPECT_NEAR(la.item<double>(), lb.item<double>(), 1e-12);
  EXPECT_GE(la.item<double>(), 0.0);
  EXPECT_NEAR(a1 + a2 + a3, la.item<double>(), 1e-9);
}

TEST(LayerLoss, EmptyTargetsOnlyPenaliseClasses) {
  auto cls = torch::zeros({1, 3, 2}, f64());
  cls.select(2, 1).fill_(1.0);
  std::vector<LossTarget> targets = {make_loss_target(InstanceSet{}, 4, 4, torch::kFloat64)};
  double c = 0, b = 0, d = 0;
  auto l = layer_loss(prediction(cls, torch::zeros({1, 3, 4, 4}, f64())), targets, {}, c, b, d);
  // Weighted CE of "no object": mean over queries of -log softmax([0,1])[1].
  const double ce = -std::log(std::exp(1.0) / (1.0 + std::exp(1.0)));
  EXPECT_NEAR(l.item<double>(), 2.0 * ce, 1e-12);
  EXPECT_EQ(b, 0.0);
  EXPECT_EQ(d, 0.0);
}

TEST(TotalLoss, SumOfLayersWithFinalAssignment) {
  torch::manual_seed(6);
  InstanceSet gt;
  gt.masks = {box(4, 4, 0, 0, 2, 4)};
  gt.labels = {0};
  std::vector<LossTarget> targets = {make_loss_target(gt, 4, 4, torch::kFloat64),
                                     make_loss_target(InstanceSet{}, 4, 4, torch::kFloat64)};
  std::vector<LayerPrediction> layers;
  double sum = 0;
  for (int l = 0; l < 3; ++l) {
    layers.push_back(prediction(torch::randn({2, 3, 2}, f64()), torch::randn({2, 3, 4, 4}, f64())));
    double c = 0, b = 0, d = 0;
    sum += layer_loss(layers.back(), targets, {}, c, b, d).item<double>();
  }
  auto r = total_loss(layers, targets);
  EXPECT_NEAR(r.total.item<double>(), sum, 1e-12);
  EXPECT_EQ(r.per_layer.size(), 3u);
  ASSERT_EQ(r.final_assignment.size(), 2u);
  EXPECT_EQ(r.final_assignment[0].size(), 1u);
  EXPECT_TRUE(r.final_assignment[1].empty());
}

TEST(TotalLoss, GradientCheck) {
  torch::manual_seed(8);
  auto cls0 = torch::randn({1, 4, 2}, f64()), cls1 = torch::randn({1, 4, 2}, f64());
  auto m0 = torch::randn({1, 4, 4, 4}, f64()), m1 = torch::randn({1, 4, 4, 4}, f64());
  InstanceSet gt;
  gt.masks = {box(8, 8, 0, 0, 4, 6), box(8, 8, 5, 2, 8, 8)};
  gt.labels = {0, 0};
  std::vector<LossTarget> targets = {make_loss_target(gt, 4, 4, torch::kFloat64)};
  auto r = testutil::gradient_check(
      [&] { return total_loss({prediction(cls0, m0), prediction(cls1, m1)}, targets).total; },
      {{"cls0", cls0}, {"cls1", cls1}, {"mask0", m0}, {"mask1", m1}});
  EXPECT_LE(r.max_rel_error, 1e-5) << r.worst;
}

TEST(TotalLoss, FreeLogitsOptimiseBelowHalf) {
  torch::manual_seed(9);
  auto cls = torch::randn({2, 5, 2}).requires_grad_(true);
  auto masks = torch::randn({2, 5, 8, 8}).requires_grad_(true);
  InstanceSet a, b;
  a.masks = {box(8, 8, 1, 1, 4, 7), box(8, 8, 5, 0, 7, 3)};
  a.labels = {0, 0};
  b.masks = {box(8, 8, 2, 2, 6, 6)};
  b.labels = {0};
  std::vector<LossTarget> targets = {make_loss_target(a, 8, 8), make_loss_target(b, 8, 8)};
  torch::optim::Adam opt({cls, masks}, torch::optim::AdamOptions(0.1));
  double first = 0, last = 0;
  for (int s = 0; s < 50; ++s) {
    opt.zero_grad();
    auto r = total_loss({prediction(cls, masks)}, targets);
    if (s == 0) first = r.total.item<double>();
    last = r.total.item<double>();
    r.total.backward();
    opt.step();
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(SoftDice, RowwiseWithBothEmptyRule) {
  auto p = torch::tensor({{0.9, 0.1}, {0.2, 0.3}, {0.6, 0.0}}, f64());
  auto g = torch::tensor({{1.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}}, f64());
  auto d = soft_dice(p, g);
  EXPECT_NEAR(d[0].item<double>(), 1.0 - 1.8 / 3.0, 1e-12);
  EXPECT_EQ(d[1].item<double>(), 0.0);
  EXPECT_NEAR(d[2].item<double>(), 1.0, 1e-12);
}
