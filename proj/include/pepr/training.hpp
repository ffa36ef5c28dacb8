#pragma once

// Training loop for the three methods (RGB-only, L2 feature alignment and the
// predictive patch objective), plus collapse statistics.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/dataset.hpp"
#include "pepr/model.hpp"
#include "pepr/objective.hpp"
#include "pepr/optim.hpp"
#include "pepr/params.hpp"

namespace pepr {

enum class Method { rgb_only, l2_align, pepr };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::rgb_only:
      return "rgb_only";
    case Method::l2_align:
      return "l2_align";
    default:
      return "pepr";
  }
}

inline Method method_from_string(const std::string& s) {
  if (s == "rgb_only") return Method::rgb_only;
  if (s == "l2_align") return Method::l2_align;
  if (s == "pepr") return Method::pepr;
  throw ValidationError("unknown method: " + s + " (expected rgb_only, l2_align or pepr)");
}

struct TrainConfig {
  Method method = Method::pepr;
  Task task = Task::segmentation;
  LossWeights loss;
  PatchSamplerConfig sampler;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  double warmup_fraction = 0.05;  // used when schedule.warmup_iters < 0
  int epochs = 15;
  int batch_size = 8;
  std::uint64_t seed = 0;
  bool stop_gradient_targets = false;
  bool log_locations = false;
  std::size_t max_steps = 0;  // 0 = run the full schedule

  // Applies the method invariants: no feature term for rgb_only.
  TrainConfig resolved() const {
    TrainConfig c = *this;
    if (c.method == Method::rgb_only) c.loss.feat = 0.0;
    return c;
  }

  void validate() const {
    loss.validate();
    sampler.validate();
    optimizer.validate();
    require(schedule.power > 0.0, "schedule: poly power must be > 0");
    require(epochs >= 1 && batch_size >= 1, "train: epochs and batch_size must be >= 1");
    require(method != Method::rgb_only || loss.feat == 0.0, "train: rgb_only requires feat weight 0");
  }
};

struct CollapseStats {
  std::vector<double> per_dim_std;
  double cosine_mean = 0.0;

  double std_min() const { return per_dim_std.empty() ? 0.0 : *std::min_element(per_dim_std.begin(), per_dim_std.end()); }
  double std_mean() const {
    return per_dim_std.empty() ? 0.0
                               : std::accumulate(per_dim_std.begin(), per_dim_std.end(), 0.0) / per_dim_std.size();
  }
};

// `batch[b]` is one flattened [positions, dim] feature map.
inline CollapseStats collapse_stats(const std::vector<std::vector<double>>& batch, std::size_t dim) {
  require(batch.size() >= 2, "collapse_stats: need a batch of at least 2");
  require(dim > 0, "collapse_stats: dim must be > 0");
  const std::size_t len = batch[0].size();
  for (const auto& f : batch) require(f.size() == len && len % dim == 0, "collapse_stats: inconsistent feature sizes");
  CollapseStats s;
  s.per_dim_std.assign(dim, 0.0);
  const double count = static_cast<double>(batch.size() * (len / dim));
  for (std::size_t k = 0; k < dim; ++k) {
    double mean = 0.0;
    for (const auto& f : batch)
      for (std::size_t i = k; i < len; i += dim) mean += f[i];
    mean /= count;
    double var = 0.0;
    for (const auto& f : batch)
      for (std::size_t i = k; i < len; i += dim) var += (f[i] - mean) * (f[i] - mean);
    s.per_dim_std[k] = std::sqrt(var / count);
  }
  double total = 0.0;
  std::size_t pairs = 0;
  std::vector<double> norms;
  for (const auto& f : batch) norms.push_back(std::sqrt(std::inner_product(f.begin(), f.end(), f.begin(), 0.0)));
  for (std::size_t a = 0; a < batch.size(); ++a)
    for (std::size_t b = a + 1; b < batch.size(); ++b) {
      const double denom = norms[a] * norms[b];
      const double dot = std::inner_product(batch[a].begin(), batch[a].end(), batch[b].begin(), 0.0);
      total += denom > 0.0 ? dot / denom : 0.0;
      ++pairs;
    }
  s.cosine_mean = total / static_cast<double>(pairs);
  return s;
}

template <class T>
std::vector<double> flatten(const FeatureMap<T>& f) {
  return std::vector<double>(f.tokens.value().begin(), f.tokens.value().end());
}

struct TrainRun {
  TrainConfig config;
  ModelConfig model;
  ParameterStore<float> params;
  std::vector<nlohmann::json> log;
  double wall_seconds = 0.0;
  bool diverged = false;
  std::string diagnostic;
  int total_steps = 0;
  int warmup_iters = 0;
};

inline nlohmann::json checkpoint_header(const ModelConfig& model, const TrainConfig& cfg, const std::string& kind) {
  return {{"model", model.to_json()}, {"task", to_string(cfg.task)}, {"method", to_string(cfg.method)},
          {"seed", cfg.seed},         {"kind", kind}};
}

// Inference checkpoint: RGB encoder and task head only.
inline ParameterStore<float> inference_params(const ParameterStore<float>& full) {
  return full.filtered([](const std::string& n) { return !is_training_only(n); });
}

template <class T>
std::uint64_t params_checksum(const ParameterStore<T>& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : s.params()) {
    h = rng::splitmix64(h ^ rng::hash_tag(p.name));
    for (T v : p.var.value()) {
      const auto f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
  }
  return h;
}

struct TrainSample {
  ad::Var<float> image;
  std::vector<std::uint8_t> mask;
  std::vector<synth::Box> boxes;
  std::optional<ad::Var<float>> surface;
  std::optional<ActivityMap> activity;
};

inline std::vector<TrainSample> load_train_samples(const data::Manifest& m, bool with_events) {
  const auto entries = m.select("train");
  require(!entries.empty(), "train: manifest train split is empty");
  std::vector<TrainSample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    data::LoadedSample s = data::load_sample(m, e, with_events);
    TrainSample t;
    t.image = image_input<float>(s.rgb);
    t.mask = s.mask.data;
    t.boxes = s.boxes;
    if (with_events) {
      t.surface = time_surface_input<float>(*s.time_surface);
      t.activity = std::move(s.activity);
    }
    out.push_back(std::move(t));
  }
  return out;
}

struct StepObserver {
  // Called after every optimizer step with the step's log record.
  std::function<void(const nlohmann::json&, const ParameterStore<float>&)> on_step;
};

struct SampleLosses {
  ad::Var<float> total;
  double task = 0.0;
  std::optional<double> feat;
  std::vector<double> collapse_features;  // event features when present, else RGB
  std::vector<GridCoord> locations;
};

inline SampleLosses sample_forward(const TrainSample& s, const ParameterStore<float>& ps, const ModelConfig& model,
                                   const TrainConfig& cfg, std::uint64_t sampler_seed) {
  SampleLosses out;
  const FeatureMap<float> rgb = rgb_encode(s.image, ps, model);
  ad::Var<float> task;
  if (cfg.task == Task::segmentation)
    task = seg_task_loss(seg_head_forward(rgb, ps), s.mask);
  else
    task = det_task_loss(det_head_forward(rgb, ps), s.boxes);
  out.task = task.item();

  ad::Var<float> feat;
  if (cfg.method != Method::rgb_only) {
    require(s.surface.has_value(), "train: missing event modality for " + to_string(cfg.method));
    const FeatureMap<float> ev = event_encode(*s.surface, ps, model);
    if (cfg.method == Method::l2_align) {
      feat = l2_alignment_loss(rgb, ev);
    } else {
      PatchSamplerConfig sc = cfg.sampler;
      sc.seed = sampler_seed;
      const PatchSample ps_loc = sample_patch_locations(*s.activity, rgb.height, rgb.width, sc);
      FeatureMap<float> target_src = ev;
      if (cfg.stop_gradient_targets) target_src.tokens = ad::stop_gradient(ev.tokens);
      const auto targets = extract_target_patches(target_src, ps_loc.locations, sc.patch_size);
      const auto preds = predict_patches(rgb, ps_loc.locations, ps, model);
      feat = predictive_loss(targets, preds);
      out.locations = ps_loc.locations;
    }
    out.feat = feat.item();
    out.collapse_features = flatten(ev);
  } else {
    out.collapse_features = flatten(rgb);
  }
  out.total = total_loss(task, feat, cfg.loss);
  return out;
}

inline TrainRun train_run(const std::vector<TrainSample>& samples, const TrainConfig& config, const ModelConfig& model,
                          const StepObserver& observer = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainRun run;
  run.config = config.resolved();
  run.model = model;
  const TrainConfig& cfg = run.config;
  cfg.validate();
  model.validate();
  require(!samples.empty(), "train: no training samples");

  Components comp;
  comp.event_encoder = cfg.method != Method::rgb_only;
  comp.predictor = cfg.method == Method::pepr;
  run.params = init_parameters<float>(model, cfg.task, comp, cfg.seed);

  const std::size_t n = samples.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  run.total_steps = static_cast<int>(steps_per_epoch * static_cast<std::size_t>(cfg.epochs));
  ScheduleConfig sched = cfg.schedule;
  if (sched.warmup_iters < 0 || sched.warmup_iters >= run.total_steps)
    sched.warmup_iters = static_cast<int>(std::round(cfg.warmup_fraction * run.total_steps));
  run.warmup_iters = sched.warmup_iters;

  AdamState adam;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs && !run.diverged; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng::Engine eng = rng::engine(rng::derive(cfg.seed, "data_order", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng::index_below(eng, i)]);

    for (std::size_t b0 = 0; b0 < n && !run.diverged; b0 += bs) {
      if (cfg.max_steps && static_cast<std::size_t>(step) >= cfg.max_steps) break;
      const std::size_t b1 = std::min(n, b0 + bs);
      const double inv_b = 1.0 / static_cast<double>(b1 - b0);
      run.params.zero_grad();
      double task_sum = 0.0, feat_sum = 0.0;
      std::vector<std::vector<double>> feats;
      nlohmann::json locations = nlohmann::json::array();
      try {
        for (std::size_t k = b0; k < b1; ++k) {
          const std::uint64_t sampler_seed =
              rng::derive(cfg.seed, "sampler", static_cast<std::uint64_t>(step) * 1024 + (k - b0));
          SampleLosses sl = sample_forward(samples[order[k]], run.params, model, cfg, sampler_seed);
          ad::backward(sl.total, static_cast<float>(inv_b));
          task_sum += sl.task;
          if (sl.feat) feat_sum += *sl.feat;
          feats.push_back(std::move(sl.collapse_features));
          if (cfg.log_locations) {
            nlohmann::json l = nlohmann::json::array();
            for (const auto& p : sl.locations) l.push_back({p.row, p.col});
            locations.push_back(l);
          }
        }
      } catch (const DivergenceError& e) {
        run.diverged = true;
        run.diagnostic = "step " + std::to_string(step) + ": " + e.what();
        break;
      }
      const double lr = lr_at(step, run.total_steps, cfg.optimizer.base_lr, sched);
      const bool applied = optimizer_step(run.params, adam, lr, cfg.optimizer);

      nlohmann::json rec;
      rec["step"] = step;
      rec["lr"] = lr;
      rec["loss_task"] = task_sum * inv_b;
      if (cfg.method != Method::rgb_only) rec["loss_feat"] = feat_sum * inv_b;
      rec["loss_total"] = cfg.loss.task * task_sum * inv_b + cfg.loss.feat * feat_sum * inv_b;
      if (feats.size() >= 2) {
        const CollapseStats cs = collapse_stats(feats, static_cast<std::size_t>(model.feature_dim()));
        rec["feat_std_min"] = cs.std_min();
        rec["feat_std_mean"] = cs.std_mean();
        rec["cosine_mean"] = cs.cosine_mean;
      }
      if (!applied) rec["skipped_non_finite_grad"] = true;
      if (cfg.log_locations) rec["locations"] = locations;
      run.log.push_back(rec);
      if (observer.on_step) observer.on_step(rec, run.params);
      ++step;
    }
  }
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

inline TrainRun train_run(const data::Manifest& manifest, const TrainConfig& config, const ModelConfig& model,
                          const StepObserver& observer = {}) {
  const bool with_events = config.method != Method::rgb_only;
  return train_run(load_train_samples(manifest, with_events), config, model, observer);
}

}  // namespace pepr
