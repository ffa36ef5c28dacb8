#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "pepr/gradcheck.hpp"
#include "pepr/objective.hpp"
#include "pepr/optim.hpp"
#include "pepr/testing/oracles.hpp"
#include "pepr/testing/verify.hpp"

using namespace pepr;
using V = ad::Var<double>;

namespace {

// 128x128 activity with events only in the upper-left quarter.
ActivityMap quarter_activity(std::uint64_t seed) {
  ActivityMap a;
  a.resolution = {128, 128};
  a.counts.assign(128 * 128, 0);
  rng::Engine eng = rng::engine(seed);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) a.counts[static_cast<std::size_t>(y * 128 + x)] = 1 + static_cast<std::uint32_t>(rng::index_below(eng, 4));
  return a;
}

// Window sums straight from pixel counts, for an 8x8 grid of 16-px cells.
double window_events(const ActivityMap& a, GridCoord p, int s) {
  double total = 0.0;
  for (int y = p.row * 16; y < (p.row + s) * 16; ++y)
    for (int x = p.col * 16; x < (p.col + s) * 16; ++x) total += a.at(y, x);
  return total;
}

FeatureMap<double> random_map(std::uint64_t seed, int h, int w, int d) {
  rng::Engine eng = rng::engine(seed);
  std::vector<double> v(static_cast<std::size_t>(h * w * d));
  for (auto& x : v) x = rng::uniform(eng, -1.0, 1.0);
  FeatureMap<double> f;
  f.tokens = V::parameter({static_cast<std::size_t>(h * w), static_cast<std::size_t>(d)}, v);
  f.height = h;
  f.width = w;
  f.dim = d;
  return f;
}

}  // namespace

// ---------------------------------------------------------------- sampler

TEST(Sampler, FullMixRatioDrawsOnlyHigh) {
  PatchSamplerConfig cfg;
  cfg.num_patches = 3;
  cfg.patch_size = 2;
  cfg.mix_ratio = 1.0;
  const auto s = sample_patch_locations(quarter_activity(1), 8, 8, cfg);
  EXPECT_EQ(s.n_high, 3u);
  EXPECT_EQ(s.n_low, 0u);
  for (bool h : s.from_high) EXPECT_TRUE(h);
}

TEST(Sampler, AllZeroMapGivesLowAnchorsOnly) {
  ActivityMap zero;
  zero.resolution = {128, 128};
  zero.counts.assign(128 * 128, 0);
  PatchSamplerConfig cfg;
  cfg.num_patches = 4;
  cfg.patch_size = 2;
  const auto s = sample_patch_locations(zero, 8, 8, cfg);
  EXPECT_EQ(s.locations.size(), 4u);
  EXPECT_EQ(s.n_high, 0u);
  EXPECT_EQ(s.n_low, 4u);
  EXPECT_EQ(s.high_pool, 0u);
  EXPECT_EQ(s.requested_high, 2u);
}

TEST(Sampler, HalfMixGivesTwoHighTwoLowByIndependentQuantile) {
  const auto act = quarter_activity(2);
  PatchSamplerConfig cfg;
  cfg.num_patches = 4;
  cfg.patch_size = 2;
  cfg.mix_ratio = 0.5;
  // Independent classification: recompute every anchor's score from pixels and
  // take the 0.7 quantile by sorting.
  std::vector<double> scores;
  for (int r = 0; r + 2 <= 8; ++r)
    for (int c = 0; c + 2 <= 8; ++c) scores.push_back(window_events(act, {r, c}, 2));
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const double pos = 0.7 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double cut = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    cfg.seed = seed;
    const auto s = sample_patch_locations(act, 8, 8, cfg);
    ASSERT_EQ(s.locations.size(), 4u);
    int high = 0, low = 0;
    for (const auto& p : s.locations) {
      const double v = window_events(act, p, 2);
      high += v > 0.0 && v >= cut;
      low += v == 0.0;
    }
    EXPECT_EQ(high, 2) << "seed " << seed;
    EXPECT_EQ(low, 2) << "seed " << seed;
  }
}

TEST(Sampler, RejectsTooManyPatches) {
  PatchSamplerConfig cfg;
  cfg.num_patches = 50;
  cfg.patch_size = 2;
  EXPECT_THROW(sample_patch_locations(quarter_activity(0), 8, 8, cfg), ValidationError);
  cfg.num_patches = 1;
  cfg.patch_size = 9;
  EXPECT_THROW(sample_patch_locations(quarter_activity(0), 8, 8, cfg), ValidationError);
}

TEST(SamplerProperty, DeterministicPerSeedAndVariesAcrossSeeds) {
  const auto act = quarter_activity(3);
  PatchSamplerConfig cfg;
  cfg.num_patches = 2;
  cfg.patch_size = 2;
  std::set<std::vector<GridCoord>> distinct;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    cfg.seed = seed;
    const auto a = sample_patch_locations(act, 8, 8, cfg), b = sample_patch_locations(act, 8, 8, cfg);
    EXPECT_EQ(a.locations, b.locations);
    distinct.insert(a.locations);
  }
  EXPECT_GT(distinct.size(), 50u);
}

TEST(SamplerProperty, LocationsAreDistinctValidAnchors) {
  const auto act = quarter_activity(4);
  PatchSamplerConfig cfg;
  cfg.num_patches = 4;
  cfg.patch_size = 4;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    cfg.seed = seed;
    const auto s = sample_patch_locations(act, 8, 8, cfg);
    std::set<GridCoord> seen(s.locations.begin(), s.locations.end());
    EXPECT_EQ(seen.size(), s.locations.size());
    for (const auto& p : s.locations) {
      EXPECT_LE(p.row + 4, 8);
      EXPECT_LE(p.col + 4, 8);
    }
  }
}

TEST(Sampler, SharedSuitePasses) {
  const auto r = verify::sampler_suite(200);
  EXPECT_TRUE(r.passed) << r.to_json().dump();
}

// ---------------------------------------------------------------- targets

TEST(TargetPatches, UnitWindowIsIdentity) {
  const auto f = random_map(1, 8, 8, 6);
  const std::vector<GridCoord> locs = {{3, 4}, {7, 7}};
  const auto p = extract_target_patches<double>(f, locs, 1);
  for (std::size_t m = 0; m < locs.size(); ++m) {
    const auto want = f.at(locs[m].row, locs[m].col);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(p.value()[m * 6 + k], want[k]);
  }
}

TEST(TargetPatches, ConstantMapGivesConstant) {
  FeatureMap<double> f;
  f.tokens = V::constant({64, 4}, 0.75);
  f.height = f.width = 8;
  f.dim = 4;
  const std::vector<GridCoord> locs = {{0, 0}, {4, 4}};
  const auto p = extract_target_patches<double>(f, locs, 4);
  for (double v : p.value()) EXPECT_DOUBLE_EQ(v, 0.75);
}

TEST(TargetPatches, MatchesNaiveLoopOracle) {
  const auto f = random_map(2, 8, 8, 64);
  const std::vector<GridCoord> locs = {{0, 0}, {2, 5}, {6, 6}, {3, 1}};
  const auto p = extract_target_patches<double>(f, locs, 2);
  for (std::size_t m = 0; m < locs.size(); ++m)
    for (int k = 0; k < 64; ++k) {
      double sum = 0.0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) sum += f.at(locs[m].row + dy, locs[m].col + dx)[static_cast<std::size_t>(k)];
      EXPECT_NEAR(p.value()[m * 64 + static_cast<std::size_t>(k)], sum / 4.0, 1e-12);
    }
}

TEST(TargetPatches, RejectsOutOfBoundsWindow) {
  const auto f = random_map(3, 8, 8, 4);
  const std::vector<GridCoord> locs = {{7, 0}};
  EXPECT_THROW(extract_target_patches<double>(f, locs, 2), ValidationError);
}

TEST(TargetPatches, DifferentiableWithRespectToFeatures) {
  gradcheck::Store store;
  const auto base = random_map(4, 4, 4, 3);
  store.add("event.tokens", base.tokens.shape(), std::vector<double>(base.tokens.value().begin(), base.tokens.value().end()),
            ParamKind::weight);
  const std::vector<GridCoord> locs = {{0, 1}, {2, 2}};
  const auto target = V::constant({2, 3}, {0.1, 0.2, 0.3, -0.1, -0.2, -0.3});
  const auto rep = gradcheck::gradient_check(store, [&](const gradcheck::Store& s) {
    FeatureMap<double> f = base;
    f.tokens = s.get("event.tokens");
    return predictive_loss(extract_target_patches<double>(f, locs, 2), target);
  });
  EXPECT_TRUE(rep.passed) << rep.to_json().dump();
}

// ---------------------------------------------------------------- losses

TEST(Losses, HandValues) {
  EXPECT_EQ(predictive_loss(V::constant({3, 4}, 0.5), V::constant({3, 4}, 0.5)).item(), 0.0);
  EXPECT_EQ(predictive_loss(V::constant({1, 2}, {1.0, 1.0}), V::constant({1, 2}, 0.0)).item(), 2.0);
  EXPECT_EQ(predictive_loss(V::constant({2, 2}, {3.0, 4.0, 0.0, 0.0}), V::constant({2, 2}, 0.0)).item(), 12.5);
  const std::vector<std::uint8_t> labels = {0, 1, 2, 3, 1};
  EXPECT_NEAR(seg_task_loss(V::constant({5, 4}, 0.0), labels).item(), 1.386294, 1e-6);
  EXPECT_NEAR(total_loss(V::constant({1}, 1.386), V::constant({1}, 12.5), {1.0, 1.0}).item(), 13.886, 1e-12);
  EXPECT_EQ(total_loss(V::constant({1}, 2.0), V::constant({1}, 4.0), {0.5, 1.0}).item(), 5.0);
}

TEST(Losses, SharedSuitePasses) {
  const auto r = verify::loss_suite(10);
  EXPECT_TRUE(r.passed) << r.to_json().dump();
}

TEST(Losses, ZeroFeatureWeightIsTheTaskObjective) {
  auto task = V::parameter({1}, {1.7});
  auto feat = V::parameter({1}, {9.0});
  const auto t = total_loss(task, feat, {1.0, 0.0});
  EXPECT_EQ(t.item(), 1.7);
  ad::backward(t);
  EXPECT_EQ(feat.grad()[0], 0.0);
  EXPECT_EQ(task.grad()[0], 1.0);
}

TEST(Losses, L2AlignmentConstantOffset) {
  FeatureMap<double> a, b;
  a.tokens = V::constant({4, 3}, 0.0);
  b.tokens = V::constant({4, 3}, 1.0);
  a.height = b.height = a.width = b.width = 2;
  a.dim = b.dim = 3;
  EXPECT_EQ(l2_alignment_loss(a, a).item(), 0.0);
  EXPECT_EQ(l2_alignment_loss(a, b).item(), 1.0);
  b.dim = 2;
  EXPECT_THROW(l2_alignment_loss(a, b), ValidationError);
}

TEST(Losses, SegSaturationAndIgnoredPixels) {
  std::vector<double> logits(3 * 4, 0.0);
  const std::vector<std::uint8_t> labels = {2, 0, synth::kIgnoreLabel};
  logits[0 * 4 + 2] = 20.0;
  logits[1 * 4 + 0] = 20.0;
  EXPECT_LT(seg_task_loss(V::constant({3, 4}, logits), labels).item(), 1e-8);
  const std::vector<std::uint8_t> ignored(3, synth::kIgnoreLabel);
  EXPECT_THROW(seg_task_loss(V::constant({3, 4}, 0.0), ignored), ValidationError);
  EXPECT_THROW(seg_task_loss(V::constant({2, 4}, 0.0), labels), ValidationError);
}

TEST(Losses, DetectionPerfectAndEmpty) {
  const std::vector<synth::Box> gt = {{1, 8.0, 8.0, 20.0, 24.0}, {1, 40.0, 36.0, 60.0, 60.0}};
  const auto t = det_targets(gt, 4, 4);
  EXPECT_EQ(t.positives, 2u);
  std::vector<double> logits(16), sizes(32, 0.0);
  for (std::size_t i = 0; i < 16; ++i) {
    logits[i] = t.objectness[i] > 0 ? 30.0 : -30.0;
    sizes[2 * i] = t.sizes[2 * i];
    sizes[2 * i + 1] = t.sizes[2 * i + 1];
  }
  DetHeadOutput<double> head;
  head.logits = V::constant({16, 1}, logits);
  head.heatmap = ad::sigmoid(head.logits);
  head.sizes = V::constant({16, 2}, sizes);
  head.height = head.width = 4;
  EXPECT_LT(det_task_loss(head, gt).item(), 1e-6);
  head.logits = V::constant({16, 1}, -40.0);
  EXPECT_LT(det_task_loss(head, std::vector<synth::Box>{}).item(), 1e-12);
}

TEST(Losses, DetectionMatchesOracleAndLargerBoxWinsCell) {
  const std::vector<synth::Box> gt = {{1, 2.0, 2.0, 10.0, 10.0}, {1, 0.0, 0.0, 14.0, 12.0}};
  const auto t = det_targets(gt, 2, 2);
  EXPECT_EQ(t.positives, 1u);
  EXPECT_EQ(t.sizes[0], 14.0);
  EXPECT_EQ(t.sizes[1], 12.0);
  const std::vector<double> z = {0.3, -1.0, 2.0, 0.1}, sz = {10.0, 9.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0};
  DetHeadOutput<double> head;
  head.logits = V::constant({4, 1}, z);
  head.heatmap = ad::sigmoid(head.logits);
  head.sizes = V::constant({4, 2}, sz);
  head.height = head.width = 2;
  EXPECT_NEAR(det_task_loss(head, gt).item(), oracle::det_loss(z, sz, gt, 2, 2), 1e-12);
}

TEST(Losses, RejectMismatchAndNonFinite) {
  EXPECT_THROW(predictive_loss(V::constant({2, 3}), V::constant({2, 4})), ValidationError);
  EXPECT_THROW(predictive_loss(V::constant({2, 3}), V::constant({3, 3})), ValidationError);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(total_loss(V::constant({1}, nan), V::constant({1}, 1.0), {}), DivergenceError);
  EXPECT_THROW(total_loss(V::constant({1}, 1.0), V::constant({1}, INFINITY), {}), DivergenceError);
  EXPECT_THROW(total_loss(V::constant({1}, 1.0), V::constant({1}, 1.0), {0.0, 0.0}), ValidationError);
}

// ---------------------------------------------------------------- schedule and optimizer

TEST(Schedule, PhaseBoundariesAndMidpoint) {
  ScheduleConfig s;
  s.warmup_iters = 10;
  EXPECT_EQ(lr_at(10, 100, 6e-5, s), 6e-5);
  EXPECT_EQ(lr_at(100, 100, 6e-5, s), 0.0);
  EXPECT_NEAR(lr_at(0, 100, 6e-5, s), 6e-5 * 1e-6, 1e-20);
  s.warmup_iters = 0;
  EXPECT_NEAR(lr_at(50, 100, 6e-5, s), 3e-5, 1e-18);
  s.warmup_iters = 100;
  EXPECT_THROW(lr_at(0, 100, 6e-5, s), ValidationError);
}

TEST(ScheduleProperty, WarmupIncreasesThenDecayDecreases) {
  ScheduleConfig s;
  s.warmup_iters = 20;
  double prev = -1.0;
  for (int k = 0; k <= 20; ++k) {
    const double lr = lr_at(k, 200, 1e-3, s);
    EXPECT_GT(lr, prev);
    prev = lr;
  }
  for (int k = 21; k <= 200; ++k) {
    const double lr = lr_at(k, 200, 1e-3, s);
    EXPECT_LT(lr, prev);
    prev = lr;
  }
}

TEST(Optimizer, ZeroGradientNoDecayLeavesParameters) {
  ParameterStore<double> s;
  s.add("w", {3}, {1.0, -2.0, 0.5}, ParamKind::weight);
  s.get("w").mutable_grad();
  AdamState st;
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  ASSERT_TRUE(optimizer_step(s, st, 1e-3, cfg));
  EXPECT_EQ(std::vector<double>(s.get("w").value().begin(), s.get("w").value().end()), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Optimizer, FirstAdamStepIsMinusLearningRate) {
  ParameterStore<double> s;
  s.add("w", {1}, {0.3}, ParamKind::norm);
  s.get("w").mutable_grad()[0] = 1.0;
  AdamState st;
  OptimizerConfig cfg;
  ASSERT_TRUE(optimizer_step(s, st, 1e-2, cfg));
  EXPECT_NEAR(s.get("w").value()[0] - 0.3, -1e-2, 1e-9);
}

TEST(Optimizer, DecoupledDecayShrinksWeightsAndBiasesOnly) {
  ParameterStore<double> s;
  s.add("w", {1}, {2.0}, ParamKind::weight);
  s.add("b", {1}, {2.0}, ParamKind::bias);
  s.add("g", {1}, {2.0}, ParamKind::norm);
  s.add("e", {1}, {2.0}, ParamKind::embedding);
  AdamState st;
  OptimizerConfig cfg;
  cfg.weight_decay = 0.01;
  const double lr = 0.5;
  for (int k = 0; k < 3; ++k) {
    s.zero_grad();
    ASSERT_TRUE(optimizer_step(s, st, lr, cfg));
  }
  const double want = 2.0 * std::pow(1.0 - lr * 0.01, 3);
  EXPECT_NEAR(s.get("w").value()[0], want, 1e-15);
  EXPECT_NEAR(s.get("b").value()[0], want, 1e-15);
  EXPECT_EQ(s.get("g").value()[0], 2.0);
  EXPECT_EQ(s.get("e").value()[0], 2.0);
}

TEST(Optimizer, NonFiniteGradientAbortsStep) {
  ParameterStore<double> s;
  s.add("w", {2}, {1.0, 1.0}, ParamKind::weight);
  s.get("w").mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  AdamState st;
  EXPECT_FALSE(optimizer_step(s, st, 1e-3, {}));
  EXPECT_EQ(st.step, 0);
  EXPECT_EQ(s.get("w").value()[0], 1.0);
}
