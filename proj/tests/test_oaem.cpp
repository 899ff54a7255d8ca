#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <thread>

#include "o2former/oaem.hpp"
#include "test_util.hpp"

using namespace o2former;
using o2former::testutil::f64;

namespace {

constexpr double kPi = std::numbers::pi;

// Straight-line bilinear sampling with zero padding (align-corners lattice).
double bilinear_at(const torch::Tensor& plane, double gx, double gy) {
  const int64_t h = plane.size(0), w = plane.size(1);
  const double px = (gx + 1.0) * 0.5 * (w - 1);
  const double py = (gy + 1.0) * 0.5 * (h - 1);
  const double x0 = std::floor(px), y0 = std::floor(py);
  double acc = 0.0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const int64_t xi = static_cast<int64_t>(x0) + dx;
      const int64_t yi = static_cast<int64_t>(y0) + dy;
      const double wx = dx ? px - x0 : 1.0 - (px - x0);
      const double wy = dy ? py - y0 : 1.0 - (py - y0);
      if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
      acc += wx * wy * plane[yi][xi].item<double>();
    }
  }
  return acc;
}

torch::Tensor rotate_oracle(const torch::Tensor& chw, double theta) {
  const int64_t c = chw.size(0), h = chw.size(1), w = chw.size(2);
  auto out = torch::zeros_like(chw);
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      const double x = -1.0 + 2.0 * j / (w - 1);
      const double y = -1.0 + 2.0 * i / (h - 1);
      const double gx = std::cos(theta) * x - std::sin(theta) * y;
      const double gy = std::sin(theta) * x + std::cos(theta) * y;
      for (int64_t k = 0; k < c; ++k) out[k][i][j] = bilinear_at(chw[k], gx, gy);
    }
  }
  return out;
}

// 3x3 same-padded convolution with explicit loops.
torch::Tensor conv3x3_oracle(const torch::Tensor& chw, const torch::Tensor& weight,
                             const torch::Tensor& bias) {
  const int64_t cin = chw.size(0), h = chw.size(1), w = chw.size(2), cout = weight.size(0);
  auto out = torch::zeros({cout, h, w}, chw.options());
  auto a = chw.accessor<double, 3>();
  auto k = weight.accessor<double, 4>();
  auto o = out.accessor<double, 3>();
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double s = bias[co].item<double>();
        for (int64_t ci = 0; ci < cin; ++ci)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int64_t yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              s += k[co][ci][dy + 1][dx + 1] * a[ci][yy][xx];
            }
        o[co][y][x] = s;
      }
  return out;
}

void set_identity_kernel(torch::nn::Conv2d conv) {
  torch::NoGradGuard g;
  conv->weight.zero_();
  for (int64_t c = 0; c < conv->weight.size(0); ++c) conv->weight[c][c][1][1] = 1.0;
  conv->bias.zero_();
}

}  // namespace

TEST(RotationAngles, StartAtZeroIncreasingBelowPi) {
  for (int n : {1, 2, 4, 7}) {
    auto a = rotation_angles(n);
    ASSERT_EQ(a.size(), static_cast<size_t>(n));
    EXPECT_EQ(a[0], 0.0);
    for (size_t i = 1; i < a.size(); ++i) EXPECT_GT(a[i], a[i - 1]);
    EXPECT_LT(a.back(), kPi);
  }
  EXPECT_NEAR(rotation_angles(4)[1], kPi / 4, 1e-15);
}

TEST(RotationGrid, ZeroAngleIsExactLattice) {
  auto g = build_rotation_grid(0.0, 5, 7);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 7; ++j) {
      EXPECT_EQ(g[i][j][0].item<double>(), lattice_coordinate(j, 7));
      EXPECT_EQ(g[i][j][1].item<double>(), lattice_coordinate(i, 5));
    }
  EXPECT_EQ(lattice_coordinate(0, 7), -1.0);
  EXPECT_EQ(lattice_coordinate(6, 7), 1.0);
}

TEST(RotationGrid, PiIsPointReflection) {
  auto g = build_rotation_grid(kPi, 5, 5);
  auto id = build_rotation_grid(0.0, 5, 5);
  EXPECT_TRUE(torch::allclose(g, -id, 0, 1e-15));
  auto f = torch::randn({2, 5, 5}, f64());
  auto out = grid_sample(f, g);
  EXPECT_TRUE(torch::allclose(out, f.flip({1, 2}), 0, 1e-12));
}

TEST(RotationGrid, QuarterTurnMovesImpulseWithUnitWeight) {
  // Impulse at lattice (x=1, y=0): row 2, col 4. The output pixel p samples
  // R(pi/2) p = (-y, x); that equals (1, 0) for p = (0, -1): row 0, col 2.
  auto f = torch::zeros({1, 5, 5}, f64());
  f[0][2][4] = 1.0;
  auto out = grid_sample(f, build_rotation_grid(kPi / 2, 5, 5));
  EXPECT_EQ(out[0][0][2].item<double>(), 1.0);
  EXPECT_EQ(out.sum().item<double>(), 1.0);
}

TEST(GridSample, IdentityIsExact) {
  auto f = torch::randn({3, 6, 9}, f64());
  EXPECT_TRUE(torch::equal(grid_sample(f, build_rotation_grid(0.0, 6, 9)), f));
}

TEST(GridSample, ConstantImageStaysConstant) {
  auto f = torch::full({2, 9, 9}, 0.7, f64());
  // Rotation by 0.3 rad of a square lattice scaled into the unit disk.
  auto g = build_rotation_grid(0.3, 9, 9) * (1.0 / std::sqrt(2.0));
  EXPECT_TRUE(torch::allclose(grid_sample(f, g), f, 0, 1e-6));
}

TEST(GridSample, HalfPixelShiftAveragesNeighbours) {
  auto f = torch::arange(9, f64()).reshape({1, 3, 3});
  auto g = build_rotation_grid(0.0, 3, 3);
  g.select(2, 0).add_(0.5);  // half a pixel: spacing is 2 / (3 - 1) = 1
  auto out = grid_sample(f, g);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      const double expect = 0.5 * (f[0][i][j].item<double>() + f[0][i][j + 1].item<double>());
      EXPECT_NEAR(out[0][i][j].item<double>(), expect, 1e-15);
    }
  // Right edge: half the weight falls outside (zero padding).
  EXPECT_NEAR(out[0][1][2].item<double>(), 0.5 * f[0][1][2].item<double>(), 1e-15);
}

TEST(GridSample, AgreesWithTorchSampler) {
  torch::manual_seed(2);
  for (int t = 0; t < 10; ++t) {
    auto f = torch::randn({2, 3, 7, 8}, f64());
    auto g = torch::rand({2, 5, 6, 2}, f64()) * 2.6 - 1.3;
    auto ours = grid_sample(f, g);
    auto ref = torch::grid_sampler(f, g, /*bilinear*/ 0, /*zeros*/ 0, /*align_corners*/ true);
    EXPECT_TRUE(torch::allclose(ours, ref, 0, 1e-12));
  }
}

TEST(GridSample, AxisAlignedRotationsArePermutations) {
  for (int64_t n : {3, 5, 7}) {
    const int64_t c = (n - 1) / 2;
    auto f = torch::randn({1, n, n}, f64());
    for (int q = 0; q < 4; ++q) {
      const double theta = q * kPi / 2;
      auto out = grid_sample(f, build_rotation_grid(theta, n, n));
      const int64_t cs = std::lround(std::cos(theta)), sn = std::lround(std::sin(theta));
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const int64_t x = j - c, y = i - c;
          const int64_t sx = c + cs * x - sn * y, sy = c + sn * x + cs * y;
          EXPECT_NEAR(out[0][i][j].item<double>(), f[0][sy][sx].item<double>(), 1e-6);
        }
    }
  }
}

TEST(GridSample, PartitionOfUnityInBounds) {
  torch::manual_seed(4);
  auto f = torch::full({1, 6, 6}, -3.25, f64());
  auto g = torch::rand({4, 4, 2}, f64()) * 2.0 - 1.0;
  EXPECT_TRUE(torch::allclose(grid_sample(f, g), torch::full({1, 4, 4}, -3.25, f64()), 0, 1e-6));
}

TEST(GridSample, GradientWrtInput) {
  torch::manual_seed(6);
  auto f = torch::randn({2, 4, 5}, f64());
  auto g = build_rotation_grid(0.7, 4, 5);
  auto w = torch::randn({2, 4, 5}, f64());
  auto r = testutil::gradient_check([&] { return (grid_sample(f, g) * w).sum(); }, {{"f", f}});
  EXPECT_LE(r.max_rel_error, 1e-6) << r.worst;
}

TEST(PolarEmbedding, AnalyticValues) {
  auto p = polar_embedding(5, 5);
  // Centre.
  EXPECT_NEAR(p[0][2][2].item<double>(), 0.0, 1e-6);
  EXPECT_NEAR(p[1][2][2].item<double>(), 0.5, 1e-6);
  // Corner (x=1, y=1): r = sqrt(2), theta = pi/4.
  EXPECT_NEAR(p[0][4][4].item<double>(), 1.0, 1e-6);
  EXPECT_NEAR(p[1][4][4].item<double>(), 0.625, 1e-6);
  // (x=-1, y=0): theta = pi.
  EXPECT_NEAR(p[1][2][0].item<double>(), 1.0, 1e-6);
  // (x=1, y=0): theta = 0.
  EXPECT_NEAR(p[1][2][4].item<double>(), 0.5, 1e-6);
}

TEST(PolarEmbedding, RangesAndCornerMaximum) {
  for (auto [h, w] : std::vector<std::pair<int, int>>{{1, 1}, {2, 3}, {5, 5}, {8, 13}, {16, 16}}) {
    auto p = polar_embedding(h, w);
    EXPECT_TRUE((p >= 0.0).all().item<bool>());
    EXPECT_TRUE((p <= 1.0).all().item<bool>());
    if (h > 1 && w > 1) {
      EXPECT_NEAR(p[0].max().item<double>(), 1.0, 1e-12);
      EXPECT_NEAR(p[0][0][0].item<double>(), 1.0, 1e-12);
      EXPECT_NEAR(p[0][h - 1][w - 1].item<double>(), 1.0, 1e-12);
    }
  }
}

TEST(PolarEmbedding, RadiusInvariantUnderRotation) {
  auto p = polar_embedding(7, 7);
  for (double phi : {0.1, 0.9, 2.0, 4.5}) {
    auto g = build_rotation_grid(phi, 7, 7);
    auto r = (g.select(2, 0).square() + g.select(2, 1).square()).sqrt() / std::sqrt(2.0);
    EXPECT_TRUE(torch::allclose(r, p[0], 0, 1e-12));
  }
}

TEST(PolarEmbedding, AngleShiftsUnderRotation) {
  // Quarter-turn rotations map lattice points of an odd square grid onto
  // lattice points, so theta_norm can be compared without interpolation.
  const int64_t n = 7, c = 3;
  auto p = polar_embedding(n, n);
  for (int q = 1; q < 4; ++q) {
    const double delta = q * kPi / 2;
    const int64_t cs = std::lround(std::cos(delta)), sn = std::lround(std::sin(delta));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        if (i == c && j == c) continue;
        const int64_t x = j - c, y = i - c;
        const int64_t rx = c + cs * x - sn * y, ry = c + sn * x + cs * y;
        double expect = p[1][i][j].item<double>() + delta / (2 * kPi);
        expect -= std::floor(expect);
        double got = p[1][ry][rx].item<double>();
        double diff = std::abs(got - expect);
        diff = std::min(diff, 1.0 - diff);  // theta_norm is periodic (1.0 == 0.0)
        EXPECT_LT(diff, 1e-12) << i << "," << j << " q=" << q;
      }
  }
}

TEST(OrientationBranches, SingleAngleIdentityKernelIsIdentity) {
  OrientationBranches b(4, 1, /*activation=*/false);
  b->to(torch::kFloat64);
  set_identity_kernel(b->branch(0));
  auto x = torch::randn({4, 6, 6}, f64());
  EXPECT_TRUE(torch::allclose(b->forward(x), x, 0, 1e-15));
}

TEST(OrientationBranches, ConstantInputGivesTapSumInterior) {
  OrientationBranches b(2, 2, /*activation=*/false);
  b->to(torch::kFloat64);
  torch::NoGradGuard g;
  for (int i = 0; i < 2; ++i) b->branch(i)->bias.zero_();
  auto x = torch::full({2, 7, 7}, 1.5, f64());
  auto out = b->forward(x);
  for (int i = 0; i < 2; ++i) {
    const double taps = b->branch(i)->weight.sum().item<double>();
    for (int64_t y = 1; y < 6; ++y)
      for (int64_t xx = 1; xx < 6; ++xx) EXPECT_NEAR(out[i][y][xx].item<double>(), taps * 1.5, 1e-12);
  }
}

TEST(OrientationBranches, MatchesLoopOracle) {
  torch::manual_seed(9);
  OrientationBranches b(8, 4, /*activation=*/true);
  b->to(torch::kFloat64);
  auto x = torch::randn({8, 6, 6}, f64());
  auto out = b->forward(x);
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < 4; ++i) {
    auto group = x.narrow(0, 2 * i, 2);
    auto rotated = rotate_oracle(group, i * kPi / 4);
    parts.push_back(conv3x3_oracle(rotated, b->branch(i)->weight.detach(), b->branch(i)->bias.detach()));
  }
  auto expect = torch::relu(torch::cat(parts, 0));
  EXPECT_TRUE(torch::allclose(out, expect, 0, 1e-10));
}

TEST(OrientationBranches, IndivisibleChannelsRejected) {
  EXPECT_THROW(OrientationBranches(6, 4), ConfigError);
}

TEST(PolarProjection, ZeroSelectorAndOracle) {
  PolarProjection proj(4);
  proj->to(torch::kFloat64);
  auto polar = polar_embedding(3, 3);
  torch::NoGradGuard g;
  proj->conv->weight.zero_();
  proj->conv->bias.zero_();
  EXPECT_TRUE(torch::equal(proj->forward(polar), torch::zeros({4, 3, 3}, f64())));
  proj->conv->weight.select(1, 0).fill_(1.0);
  auto sel = proj->forward(polar);
  for (int c = 0; c < 4; ++c) EXPECT_TRUE(torch::equal(sel[c], polar[0]));
  proj->conv->weight.copy_(torch::randn({4, 2, 1, 1}, f64()));
  proj->conv->bias.copy_(torch::randn({4}, f64()));
  auto out = proj->forward(polar);
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        const double v = proj->conv->weight[c][0][0][0].item<double>() * polar[0][y][x].item<double>() +
                         proj->conv->weight[c][1][0][0].item<double>() * polar[1][y][x].item<double>() +
                         proj->conv->bias[c].item<double>();
        EXPECT_NEAR(out[c][y][x].item<double>(), v, 1e-12);
      }
}

TEST(DynamicFusion, EqualLogitsAverage) {
  auto o = torch::randn({1, 3, 4, 4}, f64());
  auto p = torch::randn({1, 3, 4, 4}, f64());
  auto out = fuse_with_logits(o, p, torch::zeros({1, 2, 4, 4}, f64()));
  EXPECT_TRUE(torch::allclose(out, 0.5 * (o + p), 0, 1e-15));
}

TEST(DynamicFusion, SaturatedLogitsSelectOneField) {
  auto o = torch::randn({1, 3, 4, 4}, f64());
  auto p = torch::randn({1, 3, 4, 4}, f64());
  auto logits = torch::zeros({1, 2, 4, 4}, f64());
  logits.select(1, 0).fill_(100.0);
  EXPECT_TRUE(torch::allclose(fuse_with_logits(o, p, logits), o, 0, 1e-12));
  logits.select(1, 0).fill_(-100.0);
  EXPECT_TRUE(torch::allclose(fuse_with_logits(o, p, logits), p, 0, 1e-12));
}

TEST(DynamicFusion, MatchesScalarGateLoop) {
  torch::manual_seed(12);
  auto o = torch::randn({1, 3, 4, 5}, f64());
  auto p = torch::randn({1, 3, 4, 5}, f64());
  auto logits = torch::randn({1, 2, 4, 5}, f64()) * 4.0;
  auto out = fuse_with_logits(o, p, logits);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      const double a = logits[0][0][y][x].item<double>(), b = logits[0][1][y][x].item<double>();
      const double w = std::exp(a) / (std::exp(a) + std::exp(b));
      for (int c = 0; c < 3; ++c) {
        const double v = o[0][c][y][x].item<double>() * w + p[0][c][y][x].item<double>() * (1 - w);
        EXPECT_NEAR(out[0][c][y][x].item<double>(), v, 1e-10);
      }
    }
}

TEST(DynamicFusion, GatePlanesComplementary) {
  torch::manual_seed(13);
  DynamicFusion fusion(4);
  fusion->to(torch::kFloat64);
  auto s = fusion->forward(torch::randn({2, 4, 5, 5}, f64()) * 5, torch::randn({2, 4, 5, 5}, f64()) * 5);
  auto planes = torch::softmax(s.logits, 1);
  EXPECT_TRUE(torch::allclose(planes.sum(1), torch::ones({2, 5, 5}, f64()), 0, 1e-6));
  EXPECT_TRUE(torch::allclose(planes.narrow(1, 0, 1), s.gate, 0, 0));
  EXPECT_TRUE((s.gate > 0).all().item<bool>());
  EXPECT_TRUE((s.gate < 1).all().item<bool>());
  EXPECT_EQ(s.concat.size(1), 8);
}

TEST(OAEM, OutputShapeEqualsInput) {
  for (auto [c, n] : std::vector<std::pair<int64_t, int64_t>>{{8, 16}, {16, 32}}) {
    OrientationAwareEmbedding m(c, 4);
    auto x = torch::randn({c, n, n});
    auto y = m->forward(x);
    EXPECT_EQ(y.sizes(), x.sizes());
    EXPECT_TRUE(testutil::all_finite(y));
  }
}

TEST(OAEM, IdentityBranchesAndSaturatedGateReturnInput) {
  OrientationAwareEmbedding m(4, 1, /*activation=*/false);
  m->to(torch::kFloat64);
  set_identity_kernel(m->branches->branch(0));
  torch::NoGradGuard g;
  m->fusion->gate->weight.zero_();
  m->fusion->gate->bias.copy_(torch::tensor({100.0, 0.0}, f64()));
  auto x = torch::randn({1, 4, 6, 6}, f64());
  EXPECT_TRUE(torch::allclose(m->forward(x), x, 0, 1e-12));
}

TEST(OAEM, GradientCheck) {
  torch::manual_seed(21);
  OrientationAwareEmbedding m(4, 4);
  m->to(torch::kFloat64);
  auto x = torch::randn({1, 4, 6, 6}, f64());
  auto w = torch::randn({1, 4, 6, 6}, f64());
  auto leaves = testutil::module_leaves(*m);
  leaves.emplace_back("input", x);
  ASSERT_LE(testutil::leaf_count(leaves), 10000);
  auto r = testutil::gradient_check([&] { return (m->forward(x) * w).sum(); }, leaves);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GeometryCache, ConcurrentPopulationYieldsOneEntry) {
  GeometryCache cache;
  std::vector<const SamplingPlan*> seen(8, nullptr);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] { seen[t] = &cache.rotation_plan(kPi / 4, 9, 9); });
  }
  for (auto& th : threads) th.join();
  for (auto* p : seen) EXPECT_EQ(p, seen[0]);
  auto a = cache.polar_field(5, 5, torch::kFloat32);
  auto b = cache.polar_field(5, 5, torch::kFloat32);
  EXPECT_EQ(a.data_ptr(), b.data_ptr());
}
