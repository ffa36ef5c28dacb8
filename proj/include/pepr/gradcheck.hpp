#pragma once

// Central-difference gradient verification on miniature float64 models.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/model.hpp"
#include "pepr/objective.hpp"
#include "pepr/params.hpp"
#include "pepr/rng.hpp"

namespace pepr::gradcheck {

struct Options {
  double step = 1e-5;
  std::size_t samples_per_group = 50;
  double rel_tol = 1e-4;
  double abs_tol = 1e-7;
  double min_fraction = 0.99;
  std::uint64_t seed = 0;
};

struct GroupReport {
  std::string group;
  std::size_t checked = 0;
  std::size_t within_rel = 0;  // rel error < rel_tol
  std::size_t within_abs = 0;  // failed rel but abs error < abs_tol
  std::size_t negligible = 0;  // both gradients below abs_tol; judged on abs error only
  double max_rel = 0.0;
  double max_abs = 0.0;
  bool passed = false;
};

struct Report {
  std::string composite;
  std::vector<GroupReport> groups;
  bool passed = false;

  nlohmann::json to_json() const {
    nlohmann::json g = nlohmann::json::array();
    for (const auto& r : groups)
      g.push_back({{"group", r.group},
                   {"checked", r.checked},
                   {"within_rel", r.within_rel},
                   {"within_abs", r.within_abs},
                   {"negligible", r.negligible},
                   {"max_rel_error", r.max_rel},
                   {"max_abs_error", r.max_abs},
                   {"passed", r.passed}});
    return {{"composite", composite}, {"passed", passed}, {"groups", g}};
  }
};

using Store = ParameterStore<double>;
using LossFn = std::function<ad::Var<double>(const Store&)>;
// Test hook: may alter the analytic gradients before comparison.
using GradHook = std::function<void(Store&)>;

// Parameter group = first component of the name ("rgb_encoder", "predictor", ...).
inline std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

// A group passes when at least min_fraction of its coordinates meet rel_tol
// and all the rest meet abs_tol. Coordinates whose analytic and numeric
// gradients are both below abs_tol (e.g. a conv bias feeding GroupNorm, which
// is exactly zero) are left out of the fraction, since relative error carries
// no information there.
inline Report gradient_check(Store& store, const LossFn& loss, const Options& opt = {}, const GradHook& corrupt = {},
                             const std::string& name = "") {
  store.zero_grad();
  {
    const ad::Var<double> l = loss(store);
    require(l.size() == 1, "gradient_check: loss must be a scalar");
    ad::backward(l);
  }
  if (corrupt) corrupt(store);

  struct Coord {
    std::size_t param, index;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Coord>> groups;
  auto& params = store.params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string g = group_of(params[p].name);
    if (!groups.count(g)) order.push_back(g);
    for (std::size_t i = 0; i < params[p].var.size(); ++i) groups[g].push_back({p, i});
  }

  Report rep;
  rep.composite = name;
  rep.passed = true;
  ad::NoGradGuard no_grad;
  for (const auto& g : order) {
    std::vector<Coord> coords = groups[g];
    rng::Engine eng = rng::engine(rng::derive(opt.seed, "gradcheck/" + g));
    for (std::size_t i = coords.size(); i > 1; --i) std::swap(coords[i - 1], coords[rng::index_below(eng, i)]);
    if (coords.size() > opt.samples_per_group) coords.resize(opt.samples_per_group);

    GroupReport gr;
    gr.group = g;
    for (const auto& c : coords) {
      auto value = params[c.param].var.mutable_value();
      const auto grad = params[c.param].var.grad();
      const double analytic = grad.empty() ? 0.0 : grad[c.index];
      const double orig = value[c.index];
      value[c.index] = orig + opt.step;
      const double up = loss(store).item();
      value[c.index] = orig - opt.step;
      const double down = loss(store).item();
      value[c.index] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double abs_err = std::abs(analytic - numeric);
      const double scale = std::max(std::abs(analytic), std::abs(numeric));
      const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
      ++gr.checked;
      gr.max_abs = std::max(gr.max_abs, abs_err);
      if (scale < opt.abs_tol) {
        ++gr.negligible;
        continue;
      }
      gr.max_rel = std::max(gr.max_rel, rel_err);
      if (rel_err < opt.rel_tol)
        ++gr.within_rel;
      else if (abs_err < opt.abs_tol)
        ++gr.within_abs;
    }
    const std::size_t significant = gr.checked - gr.negligible;
    gr.passed = gr.checked > 0 && gr.within_rel + gr.within_abs == significant &&
                static_cast<double>(gr.within_rel) >= opt.min_fraction * static_cast<double>(significant);
    rep.passed = rep.passed && gr.passed;
    rep.groups.push_back(gr);
  }
  return rep;
}

// ---------------------------------------------------------------- composites

// Miniature model: 32x32 input, 2x2 token grid, D = 4.
inline ModelConfig miniature_config() {
  ModelConfig c;
  c.image_height = 32;
  c.image_width = 32;
  c.channels = {2, 2, 2, 4};
  c.norm_groups = 2;
  c.predictor_depth = 1;
  c.predictor_heads = 2;
  c.ffn_multiplier = 2;
  return c;
}

struct Fixture {
  ModelConfig cfg;
  ad::Var<double> image;
  ad::Var<double> surface;
  std::vector<std::uint8_t> mask;
  std::vector<synth::Box> boxes;
  std::vector<GridCoord> locations;
  int patch_size = 1;
};

inline Fixture make_fixture(std::uint64_t seed) {
  Fixture f;
  f.cfg = miniature_config();
  const std::size_t h = 32, w = 32;
  rng::Engine eng = rng::engine(rng::derive(seed, "gradcheck/fixture"));
  std::vector<double> img(3 * h * w), ts(2 * h * w);
  for (auto& v : img) v = rng::uniform(eng, 0.0, 1.0);
  for (auto& v : ts) v = rng::uniform(eng, 0.0, 1.0) < 0.3 ? rng::uniform(eng, 0.0, 1.0) : 0.0;
  f.image = ad::Var<double>::constant({3, h, w}, img);
  f.surface = ad::Var<double>::constant({2, h, w}, ts);
  f.mask.resize(h * w);
  for (std::size_t i = 0; i < f.mask.size(); ++i)
    f.mask[i] = rng::uniform(eng, 0.0, 1.0) < 0.05 ? synth::kIgnoreLabel
                                                     : static_cast<std::uint8_t>(rng::index_below(eng, 4));
  f.boxes = {{1, 2.0, 3.0, 14.0, 12.0}, {2, 18.0, 17.0, 30.0, 31.0}};
  f.locations = {{0, 1}, {1, 0}};
  return f;
}

struct Composite {
  std::string name;
  Store store;
  LossFn loss;
};

inline Composite linear_probe(std::uint64_t seed) {
  Composite c;
  c.name = "linear_probe";
  rng::Engine eng = rng::engine(rng::derive(seed, "gradcheck/probe"));
  std::vector<double> w(8 * 3), x(5 * 8);
  for (auto& v : w) v = rng::uniform(eng, -1.0, 1.0);
  for (auto& v : x) v = rng::uniform(eng, -1.0, 1.0);
  c.store.add("probe.weight", {8, 3}, w, ParamKind::weight);
  c.store.add("probe.bias", {3}, {0.1, -0.2, 0.3}, ParamKind::bias);
  std::vector<double> r(15);
  for (auto& v : r) v = rng::uniform(eng, -1.0, 1.0);
  const auto input = ad::Var<double>::constant({5, 8}, x);
  const auto readout = ad::Var<double>::constant({15, 1}, r);
  c.loss = [input, readout](const Store& s) {
    const auto y = ad::add_row_bias(ad::matmul(input, s.get("probe.weight")), s.get("probe.bias"));
    return ad::reshape(ad::matmul(ad::reshape(y, {1, 15}), readout), {1});
  };
  return c;
}

// The model composites: each encoder and head, the predictor, and the full
// objectives of both feature-regularized methods.
inline std::vector<Composite> model_composites(std::uint64_t seed) {
  const Fixture fx = make_fixture(seed);
  const ModelConfig cfg = fx.cfg;
  std::vector<Composite> out;

  {
    Composite c{"rgb_encoder+seg_head", init_parameters<double>(cfg, Task::segmentation, {}, seed), {}};
    c.loss = [fx, cfg](const Store& s) { return seg_task_loss(seg_head_forward(rgb_encode(fx.image, s, cfg), s), fx.mask); };
    out.push_back(std::move(c));
  }
  {
    Composite c{"rgb_encoder+det_head", init_parameters<double>(cfg, Task::detection, {}, seed), {}};
    c.loss = [fx, cfg](const Store& s) {
      return det_task_loss(det_head_forward(rgb_encode(fx.image, s, cfg), s), fx.boxes);
    };
    out.push_back(std::move(c));
  }
  {
    Components comp;
    comp.rgb_encoder = false;
    comp.head = false;
    comp.event_encoder = true;
    Composite c{"event_encoder", init_parameters<double>(cfg, Task::segmentation, comp, seed), {}};
    std::vector<double> target(static_cast<std::size_t>(cfg.grid_height() * cfg.grid_width() * cfg.feature_dim()));
    rng::Engine eng = rng::engine(rng::derive(seed, "gradcheck/event_target"));
    for (auto& v : target) v = rng::uniform(eng, -1.0, 1.0);
    const auto t = ad::Var<double>::constant({target.size() / cfg.feature_dim(), std::size_t(cfg.feature_dim())}, target);
    c.loss = [fx, cfg, t](const Store& s) { return mean_squared_difference(event_encode(fx.surface, s, cfg).tokens, t); };
    out.push_back(std::move(c));
  }
  {
    Components comp;
    comp.event_encoder = true;
    comp.predictor = true;
    comp.head = false;
    Composite c{"predictor", init_parameters<double>(cfg, Task::segmentation, comp, seed), {}};
    c.loss = [fx, cfg](const Store& s) {
      const auto rgb = rgb_encode(fx.image, s, cfg);
      const auto ev = event_encode(fx.surface, s, cfg);
      return predictive_loss(extract_target_patches(ev, fx.locations, fx.patch_size),
                             predict_patches(rgb, fx.locations, s, cfg));
    };
    out.push_back(std::move(c));
  }
  {
    Components comp;
    comp.event_encoder = true;
    comp.predictor = true;
    Composite c{"pepr_total", init_parameters<double>(cfg, Task::segmentation, comp, seed), {}};
    c.loss = [fx, cfg](const Store& s) {
      const auto rgb = rgb_encode(fx.image, s, cfg);
      const auto ev = event_encode(fx.surface, s, cfg);
      const auto task = seg_task_loss(seg_head_forward(rgb, s), fx.mask);
      const auto feat = predictive_loss(extract_target_patches(ev, fx.locations, fx.patch_size),
                                        predict_patches(rgb, fx.locations, s, cfg));
      return total_loss(task, feat, LossWeights{1.0, 0.5});
    };
    out.push_back(std::move(c));
  }
  {
    Components comp;
    comp.event_encoder = true;
    Composite c{"l2_align_total", init_parameters<double>(cfg, Task::segmentation, comp, seed), {}};
    c.loss = [fx, cfg](const Store& s) {
      const auto rgb = rgb_encode(fx.image, s, cfg);
      const auto ev = event_encode(fx.surface, s, cfg);
      return total_loss(seg_task_loss(seg_head_forward(rgb, s), fx.mask), l2_alignment_loss(rgb, ev), LossWeights{});
    };
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace pepr::gradcheck
