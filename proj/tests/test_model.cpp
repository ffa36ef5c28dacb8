#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "pepr/gradcheck.hpp"
#include "pepr/model.hpp"
#include "pepr/params.hpp"
#include "pepr/training.hpp"
#include "test_util.hpp"

using namespace pepr;
using V = ad::Var<double>;

namespace {

std::vector<double> random_values(std::uint64_t seed, std::size_t n, double lo = -1.0, double hi = 1.0) {
  rng::Engine eng = rng::engine(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng::uniform(eng, lo, hi);
  return v;
}

// Scalar readout of an arbitrary tensor so every output coordinate matters.
V readout(const V& y, std::uint64_t seed) {
  const auto w = V::constant({1, y.size()}, random_values(seed, y.size()));
  return ad::reshape(ad::matmul(w, ad::reshape(y, {y.size(), 1})), {1});
}

// Checks one op by finite differences on a single parameter "x".
void expect_op_gradient(const std::string& name, ad::Shape shape, const std::function<V(const V&)>& op) {
  gradcheck::Store store;
  store.add("x." + name, shape, random_values(7, ad::numel(shape)), ParamKind::weight);
  const auto rep = gradcheck::gradient_check(
      store, [&](const gradcheck::Store& s) { return readout(op(s.get("x." + name)), 99); }, {}, {}, name);
  EXPECT_TRUE(rep.passed) << rep.to_json().dump();
}

FeatureMap<double> constant_map(double v, int h, int w, int d) {
  FeatureMap<double> f;
  f.tokens = V::constant({static_cast<std::size_t>(h * w), static_cast<std::size_t>(d)}, v);
  f.height = h;
  f.width = w;
  f.dim = d;
  return f;
}

}  // namespace

// ---------------------------------------------------------------- autodiff

TEST(Autodiff, OpGradientsMatchFiniteDifferences) {
  const auto b = V::constant({4, 3}, random_values(1, 12));
  expect_op_gradient("matmul", {2, 4}, [&](const V& x) { return ad::matmul(x, b); });
  expect_op_gradient("matmul_nt", {2, 3}, [&](const V& x) { return ad::matmul_nt(x, b); });
  expect_op_gradient("transpose", {2, 3}, [](const V& x) { return ad::transpose(x); });
  expect_op_gradient("softmax", {3, 4}, [](const V& x) { return ad::softmax_rows(x); });
  expect_op_gradient("sigmoid", {2, 3}, [](const V& x) { return ad::sigmoid(x); });
  expect_op_gradient("softplus", {2, 3}, [](const V& x) { return ad::softplus(x); });
  expect_op_gradient("silu", {2, 3}, [](const V& x) { return ad::silu(x); });
  expect_op_gradient("gelu", {2, 3}, [](const V& x) { return ad::gelu(x); });
  expect_op_gradient("gather", {4, 2}, [](const V& x) { return ad::gather_rows(x, {3, 0, 3}); });
  expect_op_gradient("concat", {2, 2}, [](const V& x) { return ad::concat_cols<double>({x, ad::scale(x, 2.0)}); });
  expect_op_gradient("slice", {2, 4}, [](const V& x) { return ad::slice_cols(x, 1, 2); });
  const auto gain = V::constant({3}, {1.0, 0.5, 2.0}), bias = V::constant({3}, {0.1, 0.2, -0.3});
  expect_op_gradient("layer_norm", {4, 3}, [&](const V& x) { return ad::layer_norm(x, gain, bias); });
  const auto g4 = V::constant({4}, {1.0, 0.5, 2.0, 1.5}), b4 = V::constant({4}, 0.1);
  expect_op_gradient("group_norm", {4, 3, 3}, [&](const V& x) { return ad::group_norm(x, g4, b4, 2); });
  const auto cw = V::constant({2, 3 * 9}, random_values(2, 54)), cb = V::constant({2}, {0.1, -0.1});
  expect_op_gradient("conv", {3, 5, 5}, [&](const V& x) { return ad::conv2d(x, cw, cb, 3, 2, 1); });
  expect_op_gradient("upsample", {4, 2}, [](const V& x) { return ad::upsample_bilinear(x, 2, 2, 4); });
}

TEST(Autodiff, GradientsAccumulateOverSharedInputs) {
  auto x = V::parameter({1}, {3.0});
  const auto y = ad::weighted_sum<double>({x, ad::scale(x, 2.0)}, {1.0, 1.0});  // 3x
  ad::backward(y);
  ASSERT_EQ(x.grad().size(), 1u);
  EXPECT_EQ(x.grad()[0], 3.0);
}

TEST(Autodiff, NoGradGuardBuildsNoGraph) {
  auto x = V::parameter({2}, {1.0, 2.0});
  {
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::grad_mode());
    const auto y = ad::scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(ad::grad_mode());
  EXPECT_TRUE(ad::scale(x, 2.0).requires_grad());
}

TEST(Autodiff, StopGradientBlocksBackward) {
  auto x = V::parameter({1}, {2.0});
  const auto y = ad::weighted_sum<double>({ad::stop_gradient(x), x}, {5.0, 1.0});
  ad::backward(y);
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Autodiff, ShapeErrorsAreRejected) {
  EXPECT_THROW(V::constant({2, 2}, std::vector<double>{1.0}), ValidationError);
  EXPECT_THROW(ad::matmul(V::constant({2, 3}), V::constant({2, 3})), ValidationError);
  EXPECT_THROW(ad::add(V::constant({2}), V::constant({3})), ValidationError);
}

// ---------------------------------------------------------------- model

TEST(Model, EncoderShapesAndDeterminism) {
  const ModelConfig cfg;
  Components comp;
  comp.event_encoder = true;
  const auto ps = init_parameters<float>(cfg, Task::segmentation, comp, 3);
  const auto image = ad::Var<float>::constant({3, 128, 128}, 0.5f);
  const auto a = rgb_encode(image, ps, cfg), b = rgb_encode(image, ps, cfg);
  EXPECT_EQ(a.height, 8);
  EXPECT_EQ(a.width, 8);
  EXPECT_EQ(a.dim, 64);
  EXPECT_EQ(a.tokens.shape(), (ad::Shape{64, 64}));
  EXPECT_EQ(a.source, Modality::rgb);
  EXPECT_TRUE(std::equal(a.tokens.value().begin(), a.tokens.value().end(), b.tokens.value().begin()));

  const auto ev = event_encode(ad::Var<float>::constant({2, 128, 128}, 0.0f), ps, cfg);
  EXPECT_EQ(ev.tokens.shape(), (ad::Shape{64, 64}));
  EXPECT_EQ(ev.source, Modality::event);
  for (float v : ev.tokens.value()) EXPECT_TRUE(std::isfinite(v));
  const auto ev2 = event_encode(ad::Var<float>::constant({2, 128, 128}, 0.0f), ps, cfg);
  EXPECT_TRUE(std::equal(ev.tokens.value().begin(), ev.tokens.value().end(), ev2.tokens.value().begin()));
}

TEST(Model, EncoderRejectsWrongInputShape) {
  const ModelConfig cfg;
  const auto ps = init_parameters<float>(cfg, Task::segmentation, {}, 0);
  EXPECT_THROW(rgb_encode(ad::Var<float>::constant({3, 64, 128}), ps, cfg), ValidationError);
  EXPECT_THROW(rgb_encode(ad::Var<float>::constant({2, 128, 128}), ps, cfg), ValidationError);
}

TEST(Model, ConfigValidation) {
  ModelConfig cfg;
  cfg.predictor_heads = 7;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.image_height = 120;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.channels = {16, 32, 64};
  EXPECT_THROW(cfg.validate(), ValidationError);
  EXPECT_EQ(ModelConfig::from_json(ModelConfig{}.to_json()).to_json(), ModelConfig{}.to_json());
}

TEST(Model, PredictorOutputs) {
  const auto cfg = test::tiny_model();
  Components comp;
  comp.predictor = true;
  const auto ps = init_parameters<double>(cfg, Task::segmentation, comp, 5);
  FeatureMap<double> f;
  f.tokens = V::constant({16, 8}, random_values(3, 128));
  f.height = f.width = 4;
  f.dim = 8;

  EXPECT_EQ(predict_patches<double>(f, {}, ps, cfg).size(), 0u);

  const std::vector<GridCoord> dup = {{1, 2}, {1, 2}};
  const auto out = predict_patches<double>(f, dup, ps, cfg);
  ASSERT_EQ(out.shape(), (ad::Shape{2, 8}));
  for (int k = 0; k < 8; ++k) EXPECT_EQ(out.value()[k], out.value()[8 + k]);

  const std::vector<GridCoord> bad = {{4, 0}};
  EXPECT_THROW(predict_patches<double>(f, bad, ps, cfg), ValidationError);
}

TEST(ModelProperty, PredictorIsPermutationEquivariant) {
  const auto cfg = test::tiny_model();
  Components comp;
  comp.predictor = true;
  const auto ps = init_parameters<double>(cfg, Task::segmentation, comp, 8);
  FeatureMap<double> f;
  f.tokens = V::constant({16, 8}, random_values(4, 128));
  f.height = f.width = 4;
  f.dim = 8;
  const std::vector<GridCoord> locs = {{0, 0}, {1, 3}, {2, 1}, {3, 3}};
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<GridCoord> permuted;
  for (auto i : perm) permuted.push_back(locs[i]);
  const auto a = predict_patches<double>(f, locs, ps, cfg);
  const auto b = predict_patches<double>(f, permuted, ps, cfg);
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(b.value()[r * 8 + k], a.value()[perm[r] * 8 + k], 1e-12);
}

TEST(Model, SegHeadShapeAndConstantInput) {
  const ModelConfig cfg;
  const auto ps = init_parameters<double>(cfg, Task::segmentation, {}, 1);
  const auto logits = seg_head_forward(constant_map(0.3, 8, 8, 64), ps);
  ASSERT_EQ(logits.shape(), (ad::Shape{128 * 128, 4}));
  for (std::size_t i = 1; i < 128 * 128; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(logits.value()[i * 4 + c], logits.value()[c], 1e-12);
}

TEST(Model, DetHeadShapesAndRanges) {
  const ModelConfig cfg;
  const auto ps = init_parameters<double>(cfg, Task::detection, {}, 1);
  FeatureMap<double> f = constant_map(0.0, 8, 8, 64);
  f.tokens = V::constant({64, 64}, random_values(9, 64 * 64, -3.0, 3.0));
  const auto head = det_head_forward(f, ps);
  EXPECT_EQ(head.heatmap.shape(), (ad::Shape{64, 1}));
  EXPECT_EQ(head.sizes.shape(), (ad::Shape{64, 2}));
  for (double v : head.heatmap.value()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (double v : head.sizes.value()) EXPECT_GT(v, 0.0);
}

TEST(Decode, AllZeroHeatmapGivesNothing) {
  const std::vector<double> heat(64, 0.0), sizes(128, 16.0);
  EXPECT_TRUE(decode_detections(heat, sizes, 8, 8, 0.5, 100).empty());
}

TEST(Decode, SinglePeakAtCellCenter) {
  std::vector<double> heat(64, 0.1), sizes(128, 16.0);
  heat[3 * 8 + 5] = 0.9;
  const auto d = decode_detections(heat, sizes, 8, 8, 0.5, 100);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].score, 0.9);
  EXPECT_EQ(d[0].box.xmin, 5 * 16.0);
  EXPECT_EQ(d[0].box.xmax, 6 * 16.0);
  EXPECT_EQ(d[0].box.ymin, 3 * 16.0);
  EXPECT_EQ(d[0].box.ymax, 4 * 16.0);
}

TEST(Decode, MatchesExhaustiveNeighborhoodOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto heat = random_values(seed, 36, 0.0, 1.0);
    const auto sizes = random_values(seed + 100, 72, 4.0, 30.0);
    const auto got = decode_detections(heat, sizes, 6, 6, 0.2, 100);
    std::vector<std::pair<double, std::size_t>> want;
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        const double v = heat[static_cast<std::size_t>(y * 6 + x)];
        bool peak = v >= 0.2;
        for (int yy = 0; yy < 6; ++yy)
          for (int xx = 0; xx < 6; ++xx)
            if ((yy != y || xx != x) && std::abs(yy - y) <= 1 && std::abs(xx - x) <= 1 &&
                heat[static_cast<std::size_t>(yy * 6 + xx)] >= v)
              peak = false;
        if (peak) want.push_back({v, static_cast<std::size_t>(y * 6 + x)});
      }
    std::sort(want.begin(), want.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    ASSERT_EQ(got.size(), want.size()) << "seed " << seed;
    for (std::size_t i = 0; i < got.size(); ++i) {
      const std::size_t c = want[i].second;
      EXPECT_EQ(got[i].score, want[i].first);
      EXPECT_NEAR(got[i].box.xmax - got[i].box.xmin, sizes[2 * c], 1e-9);
      EXPECT_NEAR(0.5 * (got[i].box.xmin + got[i].box.xmax), (static_cast<double>(c % 6) + 0.5) * 16.0, 1e-9);
    }
  }
}

TEST(Decode, RespectsMaxDetections) {
  std::vector<double> heat(64, 0.0), sizes(128, 8.0);
  for (int i = 0; i < 8; i += 2) heat[static_cast<std::size_t>(i * 8 + i)] = 0.5 + 0.05 * i;
  const auto d = decode_detections(heat, sizes, 8, 8, 0.1, 2);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_GE(d[0].score, d[1].score);
}

// ---------------------------------------------------------------- params

TEST(Params, InitializationIsPerParameter) {
  const ModelConfig cfg;
  Components full;
  full.event_encoder = full.predictor = true;
  const auto a = init_parameters<float>(cfg, Task::segmentation, {}, 4);
  const auto b = init_parameters<float>(cfg, Task::segmentation, full, 4);
  for (const auto& p : a.params()) {
    const auto& q = b.get(p.name);
    EXPECT_TRUE(std::equal(p.var.value().begin(), p.var.value().end(), q.value().begin())) << p.name;
  }
  EXPECT_TRUE(b.has_prefix(prefix::kEventEncoder));
  EXPECT_TRUE(b.has_prefix(prefix::kPredictor));
  EXPECT_TRUE(b.contains("predictor.query_table"));
  EXPECT_EQ(b.get("predictor.query_table").shape(), (ad::Shape{64, 64}));
}

TEST(Params, DuplicateNamesRejected) {
  ParameterStore<double> s;
  s.add("a", {1}, {1.0}, ParamKind::weight);
  EXPECT_THROW(s.add("a", {1}, {2.0}, ParamKind::bias), ValidationError);
  EXPECT_THROW(s.get("b"), ValidationError);
}

TEST(Params, CheckpointRoundTripGivesBitIdenticalForward) {
  test::TempDir dir("ckpt");
  const ModelConfig cfg;
  const auto ps = init_parameters<float>(cfg, Task::segmentation, {}, 12);
  const nlohmann::json header{{"kind", "test"}};
  checkpoint::save(ps, header, (dir / "a.ckpt").string());
  const auto back = checkpoint::load<float>((dir / "a.ckpt").string());
  EXPECT_EQ(back.header, header);
  EXPECT_EQ(params_checksum(back.store), params_checksum(ps));
  const auto image = ad::Var<float>::constant({3, 128, 128}, 0.25f);
  const auto a = seg_head_forward(rgb_encode(image, ps, cfg), ps);
  const auto b = seg_head_forward(rgb_encode(image, back.store, cfg), back.store);
  EXPECT_TRUE(std::equal(a.value().begin(), a.value().end(), b.value().begin()));
  for (std::size_t i = 0; i < ps.params().size(); ++i) EXPECT_EQ(back.store.params()[i].kind, ps.params()[i].kind);
}

TEST(Params, CorruptCheckpointsRejected) {
  const auto ps = init_parameters<float>(test::tiny_model(), Task::segmentation, {}, 1);
  const std::string bytes = checkpoint::serialize(ps, {});
  EXPECT_THROW(checkpoint::deserialize<float>("XXXXXXXX" + bytes.substr(8)), ValidationError);
  EXPECT_THROW(checkpoint::deserialize<float>(bytes.substr(0, bytes.size() - 3)), ValidationError);
  EXPECT_THROW(checkpoint::deserialize<float>(bytes + "x"), ValidationError);
}

TEST(Params, InferenceFilterDropsTrainingOnlyArrays) {
  Components full;
  full.event_encoder = full.predictor = true;
  const auto ps = init_parameters<float>(test::tiny_model(), Task::segmentation, full, 2);
  const auto inf = inference_params(ps);
  EXPECT_FALSE(inf.has_prefix(prefix::kEventEncoder));
  EXPECT_FALSE(inf.has_prefix(prefix::kPredictor));
  EXPECT_TRUE(inf.has_prefix(prefix::kRgbEncoder));
  EXPECT_TRUE(inf.has_prefix(prefix::kSegHead));
  EXPECT_TRUE(is_training_only("event_encoder.block0.conv.weight"));
  EXPECT_FALSE(is_training_only("rgb_encoder.block0.conv.weight"));
}

// ---------------------------------------------------------------- gradcheck

TEST(GradCheck, LinearProbeIsExact) {
  auto probe = gradcheck::linear_probe(0);
  const auto rep = gradcheck::gradient_check(probe.store, probe.loss);
  ASSERT_TRUE(rep.passed);
  for (const auto& g : rep.groups) EXPECT_LT(g.max_rel, 1e-8);
}

TEST(GradCheck, CorruptedGradientIsReported) {
  auto probe = gradcheck::linear_probe(0);
  const auto rep = gradcheck::gradient_check(probe.store, probe.loss, {}, [](gradcheck::Store& s) {
    for (auto& g : s.get("probe.weight").mutable_grad()) g *= 1.01;
  });
  EXPECT_FALSE(rep.passed);
}

TEST(GradCheck, PeprCompositePasses) {
  for (auto& c : gradcheck::model_composites(0)) {
    if (c.name != "pepr_total") continue;
    const auto rep = gradcheck::gradient_check(c.store, c.loss, {}, {}, c.name);
    EXPECT_TRUE(rep.passed) << rep.to_json().dump();
    return;
  }
  FAIL() << "pepr_total composite missing";
}
