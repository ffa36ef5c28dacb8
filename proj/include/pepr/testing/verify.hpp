#pragma once

// Oracle-equivalence suites shared by `pepr verify` and the acceptance tests.

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/events.hpp"
#include "pepr/metrics.hpp"
#include "pepr/objective.hpp"
#include "pepr/rng.hpp"
#include "pepr/testing/oracles.hpp"

namespace pepr::verify {

struct SuiteResult {
  std::string name;
  bool passed = true;
  std::size_t cases = 0;
  std::vector<std::string> failures;

  void fail(const std::string& msg) {
    passed = false;
    if (failures.size() < 20) failures.push_back(msg);
  }

  nlohmann::json to_json() const {
    return {{"suite", name}, {"passed", passed}, {"cases", cases}, {"failures", failures}};
  }
};

// ---------------------------------------------------------------- simulator

struct RandomScene {
  std::vector<LuminanceFrame> frames;
  std::vector<double> timestamps;
};

// Per-pixel random walk in [0, 1] sampled at `steps + 1` key frames.
inline RandomScene random_scene(std::uint64_t seed, int size, int steps, double interval) {
  rng::Engine eng = rng::engine(seed);
  RandomScene s;
  LuminanceFrame f(size, size);
  for (auto& v : f.data) v = rng::uniform(eng, 0.0, 1.0);
  for (int k = 0; k <= steps; ++k) {
    if (k > 0)
      for (auto& v : f.data) v = std::clamp(v + rng::uniform(eng, -0.3, 0.3), 0.0, 1.0);
    s.frames.push_back(f);
    s.timestamps.push_back(k * interval);
  }
  return s;
}

inline bool by_pixel(const EventRecord& a, const EventRecord& b) {
  if (a.y != b.y) return a.y < b.y;
  if (a.x != b.x) return a.x < b.x;
  return a.t < b.t;
}

inline SuiteResult simulator_suite(int scenes = 20, int size = 8, int steps = 100) {
  SuiteResult r;
  r.name = "simulator";
  for (int i = 0; i < scenes; ++i) {
    const RandomScene sc = random_scene(rng::derive(7, "verify/simulator", static_cast<std::uint64_t>(i)), size,
                                        steps, 1e-3);
    SimulatorConfig cfg;
    cfg.contrast_threshold = i % 2 ? 0.15 : 0.25;
    cfg.refractory = i % 4 == 3 ? 2.5e-4 : 0.0;
    auto got = simulate_events(sc.frames, sc.timestamps, cfg).records;
    auto want = oracle::brute_force_events(sc.frames, sc.timestamps, cfg, 1e-6);
    std::stable_sort(got.begin(), got.end(), by_pixel);
    std::stable_sort(want.begin(), want.end(), by_pixel);
    ++r.cases;
    if (got.size() != want.size()) {
      r.fail("scene " + std::to_string(i) + ": " + std::to_string(got.size()) + " events vs oracle " +
             std::to_string(want.size()));
      continue;
    }
    for (std::size_t k = 0; k < got.size(); ++k) {
      const auto &a = got[k], &b = want[k];
      if (a.x != b.x || a.y != b.y || a.polarity != b.polarity || std::abs(a.t - b.t) > 1e-9) {
        r.fail("scene " + std::to_string(i) + ": event " + std::to_string(k) + " differs from oracle");
        break;
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------- representations

inline EventStream random_stream(std::uint64_t seed, int h, int w, std::size_t n, double t_end) {
  rng::Engine eng = rng::engine(seed);
  EventStream s;
  s.resolution = {h, w};
  s.t_start = 0.0;
  s.t_end = t_end;
  for (std::size_t i = 0; i < n; ++i)
    s.records.push_back({static_cast<int>(rng::index_below(eng, static_cast<std::uint64_t>(w))),
                         static_cast<int>(rng::index_below(eng, static_cast<std::uint64_t>(h))),
                         rng::uniform(eng, 0.0, t_end), rng::index_below(eng, 2) ? 1 : -1});
  std::stable_sort(s.records.begin(), s.records.end(), event_time_order);
  return s;
}

inline SuiteResult representation_suite(int streams = 50) {
  SuiteResult r;
  r.name = "representation";
  for (int i = 0; i < streams; ++i) {
    rng::Engine eng = rng::engine(rng::derive(11, "verify/representation", static_cast<std::uint64_t>(i)));
    const int h = 4 + static_cast<int>(rng::index_below(eng, 13)), w = 4 + static_cast<int>(rng::index_below(eng, 13));
    const EventStream s = random_stream(rng::derive(11, "verify/stream", static_cast<std::uint64_t>(i)), h, w,
                                        50 + rng::index_below(eng, 400), 0.2);
    const double t_ref = rng::uniform(eng, 0.05, 0.2), tau = rng::uniform(eng, 0.005, 0.05);
    const double t0 = rng::uniform(eng, 0.0, 0.1), t1 = t0 + rng::uniform(eng, 0.0, 0.1);
    ++r.cases;
    const TimeSurface ts = build_time_surface(s, t_ref, tau);
    const auto want_ts = oracle::naive_time_surface(s, t_ref, tau);
    for (std::size_t k = 0; k < want_ts.size(); ++k)
      if (std::abs(ts.values[k] - want_ts[k]) > 1e-12) {
        r.fail("stream " + std::to_string(i) + ": time surface differs at " + std::to_string(k));
        break;
      }
    if (build_activity_map(s, t0, t1).counts != oracle::naive_activity(s, t0, t1))
      r.fail("stream " + std::to_string(i) + ": activity map differs");
  }
  return r;
}

// ---------------------------------------------------------------- metrics

struct MapInstance {
  std::vector<std::vector<metrics::ScoredBox>> dets;
  std::vector<std::vector<synth::Box>> gts;
};

// Three images, up to 4 ground-truth boxes each; detections are jittered
// copies, duplicates and random false positives with distinct scores.
inline MapInstance random_map_instance(std::uint64_t seed) {
  rng::Engine eng = rng::engine(seed);
  MapInstance in;
  auto rand_box = [&] {
    const double x = rng::uniform(eng, 0.0, 80.0), y = rng::uniform(eng, 0.0, 80.0);
    return synth::Box{1, x, y, x + rng::uniform(eng, 8.0, 40.0), y + rng::uniform(eng, 8.0, 40.0)};
  };
  for (int img = 0; img < 3; ++img) {
    std::vector<synth::Box> g;
    const std::size_t n = rng::index_below(eng, 5);
    for (std::size_t i = 0; i < n; ++i) g.push_back(rand_box());
    std::vector<metrics::ScoredBox> d;
    for (const auto& b : g) {
      const int copies = static_cast<int>(rng::index_below(eng, 3));  // 0 = miss, 2 = duplicate
      for (int c = 0; c < copies; ++c) {
        const double j = rng::uniform(eng, 0.0, 0.35) * b.width();
        synth::Box p{1, b.xmin + rng::uniform(eng, -j, j), b.ymin + rng::uniform(eng, -j, j),
                     b.xmax + rng::uniform(eng, -j, j), b.ymax + rng::uniform(eng, -j, j)};
        if (p.xmin > p.xmax) std::swap(p.xmin, p.xmax);
        if (p.ymin > p.ymax) std::swap(p.ymin, p.ymax);
        d.push_back({rng::uniform(eng, 0.0, 1.0), p});
      }
    }
    for (std::size_t i = rng::index_below(eng, 2); i > 0; --i) d.push_back({rng::uniform(eng, 0.0, 1.0), rand_box()});
    in.gts.push_back(g);
    in.dets.push_back(d);
  }
  return in;
}

inline SuiteResult metrics_suite(int instances = 40) {
  SuiteResult r;
  r.name = "metrics";
  for (int i = 0; i < instances; ++i) {
    const MapInstance in = random_map_instance(rng::derive(13, "verify/map", static_cast<std::uint64_t>(i)));
    const metrics::MapResult m = metrics::compute_map(in.dets, in.gts);
    ++r.cases;
    for (std::size_t t = 0; t < m.thresholds.size(); ++t) {
      const double want = oracle::exhaustive_ap(in.dets, in.gts, m.thresholds[t]);
      if (std::abs(m.ap[t] - want) > 1e-12)
        r.fail("instance " + std::to_string(i) + " @" + std::to_string(m.thresholds[t]) + ": AP " +
               std::to_string(m.ap[t]) + " vs oracle " + std::to_string(want));
    }
    if (m.map_50 < m.map_50_95) r.fail("instance " + std::to_string(i) + ": mAP50 < mAP50:95");
  }

  // Hand-counted mIoU fixtures on a 4x4 grid.
  auto grid = [](auto f) {
    std::vector<std::uint8_t> g(16);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) g[static_cast<std::size_t>(y * 4 + x)] = static_cast<std::uint8_t>(f(y, x));
    return g;
  };
  const auto left = grid([](int, int x) { return x < 2 ? 1 : 0; });
  const auto top = grid([](int y, int) { return y < 2 ? 1 : 0; });
  ++r.cases;
  const auto lt = metrics::compute_miou({left}, {top}, 4);
  if (std::abs(lt.per_class[1] - 1.0 / 3.0) > 1e-15) r.fail("mIoU fixture left/top: class 1 IoU != 1/3");
  ++r.cases;
  if (metrics::compute_miou({left}, {left}, 4).miou != 1.0) r.fail("mIoU fixture pred = gt: mIoU != 1");
  ++r.cases;
  const auto ones = grid([](int, int) { return 1; });
  const auto twos = grid([](int, int) { return 2; });
  const auto disjoint = metrics::compute_miou({ones}, {twos}, 4);
  if (disjoint.per_class[1] != 0.0 || disjoint.per_class[2] != 0.0) r.fail("mIoU fixture disjoint: IoU != 0");
  return r;
}

// ---------------------------------------------------------------- sampler

inline SuiteResult sampler_suite(int draws = 1000) {
  SuiteResult r;
  r.name = "sampler";
  // 8x8 grid (128x128 pixels), events concentrated in the upper-left quarter
  // so both HIGH and LOW pools are ample for s = 2.
  ActivityMap act;
  act.resolution = {128, 128};
  act.counts.assign(128 * 128, 0);
  rng::Engine eng = rng::engine(rng::derive(17, "verify/sampler_map"));
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) act.counts[static_cast<std::size_t>(y * 128 + x)] = static_cast<std::uint32_t>(rng::index_below(eng, 5));

  for (int M : {2, 3, 4}) {
    PatchSamplerConfig cfg;
    cfg.num_patches = M;
    cfg.patch_size = 2;
    cfg.mix_ratio = 0.5;
    const std::size_t want_hi = static_cast<std::size_t>(std::ceil(0.5 * M));
    for (int d = 0; d < draws; ++d) {
      cfg.seed = rng::derive(17, "verify/sampler", static_cast<std::uint64_t>(d));
      const PatchSample s = sample_patch_locations(act, 8, 8, cfg);
      ++r.cases;
      if (s.n_high != want_hi || s.n_low != static_cast<std::size_t>(M) - want_hi || s.n_other != 0 ||
          s.locations.size() != static_cast<std::size_t>(M)) {
        r.fail("M=" + std::to_string(M) + " draw " + std::to_string(d) + ": got " + std::to_string(s.n_high) + "/" +
               std::to_string(s.n_low) + "/" + std::to_string(s.n_other));
        break;
      }
    }
  }

  ActivityMap zero = act;
  std::fill(zero.counts.begin(), zero.counts.end(), 0u);
  PatchSamplerConfig cfg;
  cfg.num_patches = 4;
  cfg.patch_size = 2;
  cfg.mix_ratio = 0.5;
  for (int d = 0; d < 50; ++d) {
    cfg.seed = static_cast<std::uint64_t>(d);
    const PatchSample s = sample_patch_locations(zero, 8, 8, cfg);
    ++r.cases;
    if (s.locations.size() != 4 || s.n_high != 0 || s.n_low != 4 || s.high_pool != 0 || s.requested_high != 2) {
      r.fail("all-zero map: expected 4 LOW anchors with 0 from HIGH");
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------- losses

namespace detail {

inline std::vector<double> uniform_vec(rng::Engine& eng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng::uniform(eng, lo, hi);
  return v;
}

inline FeatureMap<double> feature_map(std::vector<double> v, int h, int w, int d) {
  FeatureMap<double> f;
  f.tokens = ad::Var<double>::constant({static_cast<std::size_t>(h * w), static_cast<std::size_t>(d)}, std::move(v));
  f.height = h;
  f.width = w;
  f.dim = d;
  return f;
}

}  // namespace detail

inline SuiteResult loss_suite(int instances = 25) {
  SuiteResult r;
  r.name = "losses";
  constexpr double tol = 1e-10;
  auto check = [&](bool ok, const std::string& what) {
    ++r.cases;
    if (!ok) r.fail(what);
  };
  using V = ad::Var<double>;

  for (int i = 0; i < instances; ++i) {
    rng::Engine eng = rng::engine(rng::derive(29, "verify/losses", static_cast<std::uint64_t>(i)));
    const std::string tag = " (instance " + std::to_string(i) + ")";

    const std::size_t m = 1 + rng::index_below(eng, 4), d = 2 + rng::index_below(eng, 8);
    const auto t = detail::uniform_vec(eng, m * d, -2.0, 2.0), p = detail::uniform_vec(eng, m * d, -2.0, 2.0);
    const double pl = predictive_loss(V::constant({m, d}, t), V::constant({m, d}, p)).item();
    check(std::abs(pl - oracle::predictive_loss(t, p, m)) <= tol, "predictive_loss vs oracle" + tag);

    const int gh = 2 + static_cast<int>(rng::index_below(eng, 4)), gw = 2 + static_cast<int>(rng::index_below(eng, 4));
    const std::size_t n = static_cast<std::size_t>(gh * gw) * d;
    const auto a = detail::uniform_vec(eng, n, -1.0, 1.0), b = detail::uniform_vec(eng, n, -1.0, 1.0);
    const double l2 = l2_alignment_loss(detail::feature_map(a, gh, gw, static_cast<int>(d)),
                                        detail::feature_map(b, gh, gw, static_cast<int>(d)))
                          .item();
    check(std::abs(l2 - oracle::mean_squared(a, b)) <= tol, "l2_alignment_loss vs oracle" + tag);

    const std::size_t pixels = 20 + rng::index_below(eng, 40), classes = 4;
    const auto logits = detail::uniform_vec(eng, pixels * classes, -5.0, 5.0);
    std::vector<std::uint8_t> labels(pixels);
    for (auto& l : labels)
      l = rng::uniform(eng, 0.0, 1.0) < 0.1 ? synth::kIgnoreLabel : static_cast<std::uint8_t>(rng::index_below(eng, 4));
    labels[0] = 1;
    const double seg = seg_task_loss(V::constant({pixels, classes}, logits), labels).item();
    check(std::abs(seg - oracle::seg_cross_entropy(logits, labels, classes)) <= tol, "seg_task_loss vs oracle" + tag);

    const int dh = 2 + static_cast<int>(rng::index_below(eng, 3)), dw = 2 + static_cast<int>(rng::index_below(eng, 3));
    const std::size_t cells = static_cast<std::size_t>(dh * dw);
    const auto z = detail::uniform_vec(eng, cells, -4.0, 4.0), sz = detail::uniform_vec(eng, 2 * cells, 1.0, 30.0);
    std::vector<synth::Box> boxes;
    const std::size_t nb = rng::index_below(eng, 5);
    for (std::size_t k = 0; k < nb; ++k) {
      const double x0 = rng::uniform(eng, 0.0, 16.0 * dw - 4.0), y0 = rng::uniform(eng, 0.0, 16.0 * dh - 4.0);
      boxes.push_back({1, x0, y0, std::min(16.0 * dw, x0 + rng::uniform(eng, 2.0, 20.0)),
                       std::min(16.0 * dh, y0 + rng::uniform(eng, 2.0, 20.0))});
    }
    DetHeadOutput<double> head;
    head.logits = V::constant({cells, 1}, z);
    head.heatmap = ad::sigmoid(head.logits);
    head.sizes = V::constant({cells, 2}, sz);
    head.height = dh;
    head.width = dw;
    const double det = det_task_loss(head, boxes).item();
    check(std::abs(det - oracle::det_loss(z, sz, boxes, dh, dw)) <= tol, "det_task_loss vs oracle" + tag);

    const double lt = rng::uniform(eng, 0.0, 3.0), lf = rng::uniform(eng, 0.0, 3.0);
    const LossWeights w{rng::uniform(eng, 0.1, 1.0), rng::uniform(eng, 0.0, 1.0)};
    const double tot = total_loss(V::constant({1}, lt), V::constant({1}, lf), w).item();
    check(std::abs(tot - (w.task * lt + w.feat * lf)) <= tol, "total_loss vs oracle" + tag);
  }

  // Hand values, compared exactly.
  const V zero2 = V::constant({1, 2}, 0.0);
  check(predictive_loss(zero2, zero2).item() == 0.0, "predictive_loss identity != 0");
  check(predictive_loss(zero2, V::constant({1, 2}, 1.0)).item() == 2.0, "predictive_loss (1,1) != 2.0");
  check(predictive_loss(V::constant({2, 2}, 0.0), V::constant({2, 2}, {3.0, 4.0, 0.0, 0.0})).item() == 12.5,
        "predictive_loss (3,4),(0,0) != 12.5");
  const auto f0 = detail::feature_map(std::vector<double>(2 * 2 * 3, 0.5), 2, 2, 3);
  const auto f1 = detail::feature_map(std::vector<double>(2 * 2 * 3, 1.5), 2, 2, 3);
  check(l2_alignment_loss(f0, f0).item() == 0.0, "l2_alignment_loss identical != 0");
  check(l2_alignment_loss(f0, f1).item() == 1.0, "l2_alignment_loss constant offset != 1.0");
  const std::vector<std::uint8_t> lab = {0, 1, 2, 3};
  check(seg_task_loss(V::constant({4, 4}, 0.0), lab).item() == std::log(4.0), "seg_task_loss uniform != ln 4");
  std::vector<double> margin(16, 0.0);
  for (int i = 0; i < 4; ++i) margin[static_cast<std::size_t>(i * 4 + i)] = 20.0;
  check(seg_task_loss(V::constant({4, 4}, margin), lab).item() < 1e-8, "seg_task_loss margin 20 not < 1e-8");
  check(total_loss(V::constant({1}, 1.386), V::constant({1}, 12.5), {1.0, 1.0}).item() == 1.386 + 12.5,
        "total_loss (1.386, 12.5) != 13.886");
  check(total_loss(V::constant({1}, 2.0), V::constant({1}, 4.0), {0.5, 1.0}).item() == 5.0,
        "total_loss (2, 4, (0.5, 1)) != 5.0");
  check(total_loss(V::constant({1}, 2.0), V(), {1.0, 0.0}).item() == 2.0, "total_loss without feature term");
  return r;
}

inline std::vector<SuiteResult> run(const std::string& suite) {
  std::vector<SuiteResult> out;
  const bool all = suite == "all";
  if (!all && suite != "simulator" && suite != "losses" && suite != "metrics" && suite != "sampler")
    throw ValidationError("unknown verify suite: " + suite + " (expected simulator, losses, metrics, sampler or all)");
  if (all || suite == "simulator") {
    out.push_back(simulator_suite());
    out.push_back(representation_suite());
  }
  if (all || suite == "losses") out.push_back(loss_suite());
  if (all || suite == "metrics") out.push_back(metrics_suite());
  if (all || suite == "sampler") out.push_back(sampler_suite());
  return out;
}

}  // namespace pepr::verify
