#pragma once

// Activity-guided patch sampling, event-latent targets, the predictive patch
// loss, the L2 alignment baseline, task losses and their weighted total.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pepr/autodiff.hpp"
#include "pepr/events.hpp"
#include "pepr/model.hpp"
#include "pepr/rng.hpp"
#include "pepr/synth.hpp"

namespace pepr {

struct PatchSamplerConfig {
  int num_patches = 2;     // M
  int patch_size = 4;      // window side in grid cells
  double mix_ratio = 0.5;  // fraction drawn from high-activity anchors
  double high_quantile = 0.7;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_patches >= 1, "sampler: M must be >= 1");
    require(patch_size >= 1, "sampler: patch size must be >= 1");
    require(mix_ratio >= 0.0 && mix_ratio <= 1.0, "sampler: mix ratio must lie in [0, 1]");
    require(high_quantile > 0.0 && high_quantile < 1.0, "sampler: high quantile must lie in (0, 1)");
  }
};

struct PatchSample {
  std::vector<GridCoord> locations;  // HIGH draws first, then LOW, then any top-up
  std::vector<bool> from_high;
  std::size_t high_pool = 0;
  std::size_t low_pool = 0;
  std::size_t n_high = 0;    // drawn from HIGH
  std::size_t n_low = 0;     // drawn from LOW
  std::size_t n_other = 0;   // drawn from anchors in neither pool
  std::size_t requested_high = 0;
};

// Block-sum pooling of the pixel activity onto the feature grid.
inline Grid<double> pool_activity(const ActivityMap& activity, int grid_h, int grid_w) {
  const Resolution r = activity.resolution;
  require(grid_h > 0 && grid_w > 0 && r.height % grid_h == 0 && r.width % grid_w == 0,
          "pool_activity: activity resolution does not tile the feature grid");
  const int sy = r.height / grid_h, sx = r.width / grid_w;
  Grid<double> out(grid_h, grid_w, 0.0);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) out(y / sy, x / sx) += activity.at(y, x);
  return out;
}

// Linear-interpolated quantile of an unsorted sample.
inline double quantile(std::vector<double> v, double q) {
  require(!v.empty(), "quantile: empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct AnchorScores {
  std::vector<GridCoord> anchors;  // row-major over valid top-left corners
  std::vector<double> scores;
};

inline AnchorScores score_anchors(const Grid<double>& pooled, int patch_size) {
  require(patch_size <= std::min(pooled.height, pooled.width), "sampler: patch size exceeds feature grid");
  AnchorScores a;
  for (int r = 0; r + patch_size <= pooled.height; ++r)
    for (int c = 0; c + patch_size <= pooled.width; ++c) {
      double s = 0.0;
      for (int dy = 0; dy < patch_size; ++dy)
        for (int dx = 0; dx < patch_size; ++dx) s += pooled(r + dy, c + dx);
      a.anchors.push_back({r, c});
      a.scores.push_back(s);
    }
  return a;
}

// HIGH: score >= q_hi quantile and nonzero. LOW: score == 0, or the bottom
// (1 - q_hi) quantile when no anchor is silent. The pools are disjoint.
inline PatchSample sample_patch_locations(const ActivityMap& activity, int grid_h, int grid_w,
                                          const PatchSamplerConfig& cfg) {
  cfg.validate();
  const AnchorScores a = score_anchors(pool_activity(activity, grid_h, grid_w), cfg.patch_size);
  const std::size_t n = a.anchors.size();
  require(static_cast<std::size_t>(cfg.num_patches) <= n, "sampler: M exceeds the number of valid anchors");

  const double hi_cut = quantile(a.scores, cfg.high_quantile);
  const bool any_zero = std::any_of(a.scores.begin(), a.scores.end(), [](double s) { return s == 0.0; });
  const double lo_cut = any_zero ? 0.0 : quantile(a.scores, 1.0 - cfg.high_quantile);
  std::vector<std::size_t> high, low, other;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = a.scores[i];
    if (s > 0.0 && s >= hi_cut)
      high.push_back(i);
    else if (s <= lo_cut)
      low.push_back(i);
    else
      other.push_back(i);
  }

  rng::Engine eng = rng::engine(cfg.seed);
  auto draw = [&](std::vector<std::size_t>& pool, std::size_t k) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < k && !pool.empty(); ++j) {
      const std::size_t pick = rng::index_below(eng, pool.size());
      out.push_back(pool[pick]);
      pool[pick] = pool.back();
      pool.pop_back();
    }
    return out;
  };

  PatchSample out;
  out.high_pool = high.size();
  out.low_pool = low.size();
  const std::size_t m = static_cast<std::size_t>(cfg.num_patches);
  out.requested_high = static_cast<std::size_t>(std::ceil(cfg.mix_ratio * static_cast<double>(m) - 1e-12));
  std::size_t want_high = out.requested_high;
  std::size_t want_low = m - want_high;
  if (high.size() < want_high) {
    want_low += want_high - high.size();
    want_high = high.size();
  } else if (low.size() < want_low) {
    want_high = std::min(high.size(), want_high + (want_low - low.size()));
    want_low = low.size();
  }
  const auto hi = draw(high, want_high);
  const auto lo = draw(low, want_low);
  const auto rest = draw(other, m - hi.size() - lo.size());
  for (auto i : hi) {
    out.locations.push_back(a.anchors[i]);
    out.from_high.push_back(true);
  }
  for (auto i : lo) {
    out.locations.push_back(a.anchors[i]);
    out.from_high.push_back(false);
  }
  for (auto i : rest) {
    out.locations.push_back(a.anchors[i]);
    out.from_high.push_back(false);
  }
  out.n_high = hi.size();
  out.n_low = lo.size();
  out.n_other = rest.size();
  return out;
}

// Mean over each s x s window anchored (top-left) at a location -> [M, D].
template <class T>
ad::Var<T> extract_target_patches(const FeatureMap<T>& f, std::span<const GridCoord> locations, int patch_size) {
  const std::size_t d = static_cast<std::size_t>(f.dim);
  const std::size_t m = locations.size();
  for (const auto& p : locations)
    require(patch_size >= 1 && p.row >= 0 && p.col >= 0 && p.row + patch_size <= f.height &&
                p.col + patch_size <= f.width,
            "extract_target_patches: window out of bounds");
  std::vector<GridCoord> locs(locations.begin(), locations.end());
  const std::size_t w = static_cast<std::size_t>(f.width);
  const T inv = T(1) / static_cast<T>(patch_size * patch_size);
  std::vector<T> out(m * d, T(0));
  const T* src = f.tokens.data();
  for (std::size_t i = 0; i < m; ++i)
    for (int dy = 0; dy < patch_size; ++dy)
      for (int dx = 0; dx < patch_size; ++dx) {
        const T* v = src + (static_cast<std::size_t>(locs[i].row + dy) * w + static_cast<std::size_t>(locs[i].col + dx)) * d;
        for (std::size_t k = 0; k < d; ++k) out[i * d + k] += v[k] * inv;
      }
  ad::Node<T>* fn = f.tokens.node();
  return ad::make_result<T>({m, d}, std::move(out), {f.tokens}, [fn, locs, patch_size, w, d, inv](const T* g) {
    T* gf = ad::grad_target(fn);
    if (!gf) return;
    for (std::size_t i = 0; i < locs.size(); ++i)
      for (int dy = 0; dy < patch_size; ++dy)
        for (int dx = 0; dx < patch_size; ++dx) {
          T* v = gf + (static_cast<std::size_t>(locs[i].row + dy) * w + static_cast<std::size_t>(locs[i].col + dx)) * d;
          for (std::size_t k = 0; k < d; ++k) v[k] += g[i * d + k] * inv;
        }
  });
}

// (1/M) * sum_m ||pred_m - target_m||^2 over [M, D] arrays.
template <class T>
ad::Var<T> predictive_loss(const ad::Var<T>& targets, const ad::Var<T>& predictions) {
  require(targets.shape().size() == 2 && targets.shape() == predictions.shape(),
          "predictive_loss: shape mismatch " + ad::shape_str(targets.shape()) + " vs " +
              ad::shape_str(predictions.shape()));
  const std::size_t m = targets.dim(0);
  require(m >= 1, "predictive_loss: need at least one patch");
  const std::size_t n = targets.size();
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T diff = predictions.data()[i] - targets.data()[i];
    sum += diff * diff;
  }
  const T inv_m = T(1) / static_cast<T>(m);
  ad::Node<T>*tn = targets.node(), *pn = predictions.node();
  return ad::make_result<T>({1}, {sum * inv_m}, {targets, predictions}, [tn, pn, n, inv_m](const T* g) {
    T* gt = ad::grad_target(tn);
    T* gp = ad::grad_target(pn);
    for (std::size_t i = 0; i < n; ++i) {
      const T dd = T(2) * (pn->value[i] - tn->value[i]) * inv_m * g[0];
      if (gp) gp[i] += dd;
      if (gt) gt[i] -= dd;
    }
  });
}

// Mean over all coordinates of the squared difference.
template <class T>
ad::Var<T> mean_squared_difference(const ad::Var<T>& a, const ad::Var<T>& b) {
  require(a.shape() == b.shape() && a.size() > 0, "mean_squared_difference: shape mismatch");
  const std::size_t n = a.size();
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.data()[i] - b.data()[i];
    sum += d * d;
  }
  const T inv = T(1) / static_cast<T>(n);
  ad::Node<T>*an = a.node(), *bn = b.node();
  return ad::make_result<T>({1}, {sum * inv}, {a, b}, [an, bn, n, inv](const T* g) {
    T* ga = ad::grad_target(an);
    T* gb = ad::grad_target(bn);
    for (std::size_t i = 0; i < n; ++i) {
      const T dd = T(2) * (an->value[i] - bn->value[i]) * inv * g[0];
      if (ga) ga[i] += dd;
      if (gb) gb[i] -= dd;
    }
  });
}

template <class T>
ad::Var<T> l2_alignment_loss(const FeatureMap<T>& rgb, const FeatureMap<T>& event) {
  require(rgb.height == event.height && rgb.width == event.width && rgb.dim == event.dim,
          "l2_alignment_loss: feature map shape mismatch");
  return mean_squared_difference(rgb.tokens, event.tokens);
}

// Mean softmax cross-entropy over pixels whose label is not `ignore`.
template <class T>
ad::Var<T> seg_task_loss(const ad::Var<T>& logits, std::span<const std::uint8_t> labels,
                         std::uint8_t ignore = synth::kIgnoreLabel) {
  require(logits.shape().size() == 2 && logits.dim(0) == labels.size(), "seg_task_loss: logits/labels mismatch");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<T> probs(n * c);
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  std::size_t valid = 0;
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T sum = 0;
    for (std::size_t k = 0; k < c; ++k) sum += probs[i * c + k] = std::exp(row[k] - mx);
    for (std::size_t k = 0; k < c; ++k) probs[i * c + k] /= sum;
    if (lab[i] == ignore) continue;
    require(lab[i] < c, "seg_task_loss: label out of range");
    ++valid;
    total += -(row[lab[i]] - mx - std::log(sum));
  }
  require(valid > 0, "seg_task_loss: every pixel is ignored");
  const T inv = T(1) / static_cast<T>(valid);
  ad::Node<T>* ln = logits.node();
  return ad::make_result<T>({1}, {total * inv}, {logits},
                            [ln, probs = std::move(probs), lab = std::move(lab), n, c, inv, ignore](const T* g) {
                              T* gl = ad::grad_target(ln);
                              if (!gl) return;
                              for (std::size_t i = 0; i < n; ++i) {
                                if (lab[i] == ignore) continue;
                                for (std::size_t k = 0; k < c; ++k)
                                  gl[i * c + k] += (probs[i * c + k] - (k == lab[i] ? T(1) : T(0))) * inv * g[0];
                              }
                            });
}

struct DetTargets {
  std::vector<double> objectness;  // [h*w]
  std::vector<double> sizes;       // [h*w*2]
  std::size_t positives = 0;
};

// One positive per cell containing a box center; the larger box wins a tie.
inline DetTargets det_targets(std::span<const synth::Box> boxes, int height, int width,
                              double cell = ModelConfig::kStride) {
  DetTargets t;
  t.objectness.assign(static_cast<std::size_t>(height * width), 0.0);
  t.sizes.assign(t.objectness.size() * 2, 0.0);
  for (const auto& b : boxes) {
    const int gx = std::clamp(static_cast<int>(std::floor(0.5 * (b.xmin + b.xmax) / cell)), 0, width - 1);
    const int gy = std::clamp(static_cast<int>(std::floor(0.5 * (b.ymin + b.ymax) / cell)), 0, height - 1);
    const std::size_t i = static_cast<std::size_t>(gy * width + gx);
    if (t.objectness[i] > 0.0 && t.sizes[2 * i] * t.sizes[2 * i + 1] >= b.width() * b.height()) continue;
    t.objectness[i] = 1.0;
    t.sizes[2 * i] = b.width();
    t.sizes[2 * i + 1] = b.height();
  }
  for (double o : t.objectness) t.positives += o > 0.0;
  return t;
}

inline constexpr double kDetSizeWeight = 0.1;

// Mean per-cell BCE (computed from logits) + 0.1 * mean |size error| over
// positive cells and both size components.
template <class T>
ad::Var<T> det_task_loss(const DetHeadOutput<T>& head, std::span<const synth::Box> gt) {
  const DetTargets tg = det_targets(gt, head.height, head.width);
  const std::size_t n = tg.objectness.size();
  require(head.logits.size() == n && head.sizes.size() == 2 * n, "det_task_loss: head shape mismatch");
  T bce = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = head.logits.data()[i];
    bce += ad::softplus_value(z) - static_cast<T>(tg.objectness[i]) * z;
  }
  const T inv_n = T(1) / static_cast<T>(n);
  T l1 = 0;
  const T inv_p = tg.positives ? T(1) / static_cast<T>(2 * tg.positives) : T(0);
  for (std::size_t i = 0; i < n; ++i)
    if (tg.objectness[i] > 0.0)
      for (int k = 0; k < 2; ++k) l1 += std::abs(head.sizes.data()[2 * i + k] - static_cast<T>(tg.sizes[2 * i + k]));
  const T w = static_cast<T>(kDetSizeWeight);
  ad::Node<T>*ln = head.logits.node(), *sn = head.sizes.node();
  return ad::make_result<T>({1}, {bce * inv_n + w * l1 * inv_p}, {head.logits, head.sizes},
                            [ln, sn, tg, n, inv_n, inv_p, w](const T* g) {
                              if (T* gl = ad::grad_target(ln))
                                for (std::size_t i = 0; i < n; ++i)
                                  gl[i] += (ad::sigmoid_value(ln->value[i]) - static_cast<T>(tg.objectness[i])) * inv_n * g[0];
                              if (T* gs = ad::grad_target(sn))
                                for (std::size_t i = 0; i < n; ++i)
                                  if (tg.objectness[i] > 0.0)
                                    for (int k = 0; k < 2; ++k) {
                                      const T diff = sn->value[2 * i + k] - static_cast<T>(tg.sizes[2 * i + k]);
                                      const T sign = diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0));
                                      gs[2 * i + k] += w * sign * inv_p * g[0];
                                    }
                            });
}

struct LossWeights {
  double task = 1.0;
  double feat = 1.0;

  void validate() const {
    require(task >= 0.0 && feat >= 0.0, "loss weights must be >= 0");
    require(task > 0.0 || feat > 0.0, "loss weights must not both be zero");
  }
};

// task * L_task + feat * L_feat. A missing feature term (undefined Var) means
// the RGB-only objective.
template <class T>
ad::Var<T> total_loss(const ad::Var<T>& task, const ad::Var<T>& feat, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(static_cast<double>(task.item())))
    throw DivergenceError("total_loss: non-finite task loss");
  if (!feat.defined()) return ad::weighted_sum<T>({task}, {static_cast<T>(w.task)});
  if (!std::isfinite(static_cast<double>(feat.item())))
    throw DivergenceError("total_loss: non-finite feature loss");
  return ad::weighted_sum<T>({task, feat}, {static_cast<T>(w.task), static_cast<T>(w.feat)});
}

}  // namespace pepr
