#pragma once

// Run configuration: one strict JSON document. Every field has a default;
// unknown keys anywhere are rejected.

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/dataset.hpp"
#include "pepr/eval.hpp"
#include "pepr/model.hpp"
#include "pepr/training.hpp"

namespace pepr::config {

using nlohmann::json;

struct RunConfig {
  std::uint64_t seed = 0;  // dataset master seed; also the training seed unless train.seed is given
  std::string data_dir;
  std::string output_dir;
  data::GenerateOptions data;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::string> eval_domains = {"day", "dusk", "night"};
  EvalOptions eval;

  RunConfig() {
    // Desk-scale defaults. 6e-5 suits pretrained backbones and
    // tens of thousands of steps; see README for the tuned value.
    train.optimizer.base_lr = 3e-3;
    train.schedule.warmup_iters = -1;
  }
};

namespace detail {

// Reads fields from one JSON object and rejects any key not consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + path_ + "' must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ValidationError("config: bad value for '" + path_ + "." + key + "'");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError("config: unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse(const json& j) {
  RunConfig c;
  detail::Section root(j, "");
  root.get("seed", c.seed);
  root.get("data_dir", c.data_dir);
  root.get("output_dir", c.output_dir);
  bool train_seed_set = false;

  auto& sc = c.data.scene;
  {
    auto s = root.sub("scene");
    s.get("height", sc.height);
    s.get("width", sc.width);
    s.get("num_shapes", sc.num_shapes);
    s.get("min_half_size", sc.min_half_size);
    s.get("max_half_size", sc.max_half_size);
    s.get("min_speed", sc.min_speed);
    s.get("max_speed", sc.max_speed);
    s.get("frames_per_sample", sc.frames_per_sample);
    s.get("subframes", sc.subframes);
    s.get("frame_interval", sc.frame_interval);
    s.get("luminance_min", sc.luminance_min);
    s.get("luminance_max", sc.luminance_max);
    s.get("min_contrast", sc.min_contrast);
    s.finish();
  }
  {
    auto s = root.sub("simulator");
    s.get("contrast_threshold", c.data.simulator.contrast_threshold);
    s.get("log_eps", c.data.simulator.log_eps);
    s.get("refractory", c.data.simulator.refractory);
    s.finish();
  }
  {
    auto s = root.sub("representation");
    s.get("tau_frames", c.data.representation.tau_frames);
    s.get("window_frames", c.data.representation.window_frames);
    s.finish();
  }
  {
    auto s = root.sub("dataset");
    s.get("n_train", c.data.n_train);
    s.get("n_eval_per_domain", c.data.n_eval_per_domain);
    s.get("domains", c.data.domains);
    s.finish();
  }
  {
    auto s = root.sub("model");
    s.get("channels", c.model.channels);
    s.get("norm_groups", c.model.norm_groups);
    s.get("predictor_depth", c.model.predictor_depth);
    s.get("predictor_heads", c.model.predictor_heads);
    s.get("ffn_multiplier", c.model.ffn_multiplier);
    s.finish();
    c.model.image_height = sc.height;
    c.model.image_width = sc.width;
  }
  {
    auto s = root.sub("sampler");
    s.get("num_patches", c.train.sampler.num_patches);
    s.get("patch_size", c.train.sampler.patch_size);
    s.get("mix_ratio", c.train.sampler.mix_ratio);
    s.get("high_quantile", c.train.sampler.high_quantile);
    s.finish();
  }
  {
    auto s = root.sub("loss");
    s.get("task", c.train.loss.task);
    s.get("feat", c.train.loss.feat);
    s.finish();
  }
  {
    auto s = root.sub("train");
    std::string task = to_string(c.train.task);
    s.get("task", task);
    c.train.task = task_from_string(task);
    std::string method = to_string(c.train.method);
    s.get("method", method);
    c.train.method = method_from_string(method);
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("base_lr", c.train.optimizer.base_lr);
    s.get("weight_decay", c.train.optimizer.weight_decay);
    s.get("beta1", c.train.optimizer.beta1);
    s.get("beta2", c.train.optimizer.beta2);
    s.get("epsilon", c.train.optimizer.epsilon);
    s.get("poly_power", c.train.schedule.power);
    s.get("warmup_ratio", c.train.schedule.warmup_ratio);
    s.get("warmup_iters", c.train.schedule.warmup_iters);
    s.get("warmup_fraction", c.train.warmup_fraction);
    s.get("stop_gradient_targets", c.train.stop_gradient_targets);
    s.get("log_locations", c.train.log_locations);
    s.get("max_steps", c.train.max_steps);
    train_seed_set = s.has("seed");
    s.get("seed", c.train.seed);
    s.finish();
  }
  {
    auto s = root.sub("eval");
    s.get("domains", c.eval_domains);
    s.get("score_threshold", c.eval.score_threshold);
    s.get("max_detections", c.eval.max_detections);
    s.finish();
  }
  root.finish();

  c.data.master_seed = c.seed;
  if (!train_seed_set) c.train.seed = c.seed;
  c.data.scene.validate();
  c.data.simulator.validate();
  c.model.validate();
  c.train.resolved().validate();
  require(c.data.representation.tau_frames > 0.0 && c.data.representation.window_frames > 0.0,
          "config: representation tau_frames and window_frames must be > 0");
  require(c.train.warmup_fraction >= 0.0 && c.train.warmup_fraction < 1.0, "config: warmup_fraction must lie in [0, 1)");
  require(!c.eval_domains.empty(), "config: eval.domains must not be empty");
  for (const auto& d : c.eval_domains) synth::domain_preset(d);
  for (const auto& d : c.data.domains) synth::domain_preset(d);
  return c;
}

inline RunConfig load(const std::filesystem::path& path) {
  const std::string text = data::read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return parse(j);
}

// Fully resolved configuration; parse(resolved(c)) reproduces c.
inline json resolved(const RunConfig& c) {
  const auto& sc = c.data.scene;
  const auto& t = c.train;
  return json{
      {"seed", c.seed},
      {"data_dir", c.data_dir},
      {"output_dir", c.output_dir},
      {"scene",
       {{"height", sc.height},
        {"width", sc.width},
        {"num_shapes", sc.num_shapes},
        {"min_half_size", sc.min_half_size},
        {"max_half_size", sc.max_half_size},
        {"min_speed", sc.min_speed},
        {"max_speed", sc.max_speed},
        {"frames_per_sample", sc.frames_per_sample},
        {"subframes", sc.subframes},
        {"frame_interval", sc.frame_interval},
        {"luminance_min", sc.luminance_min},
        {"luminance_max", sc.luminance_max},
        {"min_contrast", sc.min_contrast}}},
      {"simulator",
       {{"contrast_threshold", c.data.simulator.contrast_threshold},
        {"log_eps", c.data.simulator.log_eps},
        {"refractory", c.data.simulator.refractory}}},
      {"representation",
       {{"tau_frames", c.data.representation.tau_frames}, {"window_frames", c.data.representation.window_frames}}},
      {"dataset",
       {{"n_train", c.data.n_train}, {"n_eval_per_domain", c.data.n_eval_per_domain}, {"domains", c.data.domains}}},
      {"model",
       {{"channels", c.model.channels},
        {"norm_groups", c.model.norm_groups},
        {"predictor_depth", c.model.predictor_depth},
        {"predictor_heads", c.model.predictor_heads},
        {"ffn_multiplier", c.model.ffn_multiplier}}},
      {"sampler",
       {{"num_patches", t.sampler.num_patches},
        {"patch_size", t.sampler.patch_size},
        {"mix_ratio", t.sampler.mix_ratio},
        {"high_quantile", t.sampler.high_quantile}}},
      {"loss", {{"task", t.loss.task}, {"feat", t.loss.feat}}},
      {"train",
       {{"task", to_string(t.task)},
        {"method", to_string(t.method)},
        {"seed", t.seed},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"base_lr", t.optimizer.base_lr},
        {"weight_decay", t.optimizer.weight_decay},
        {"beta1", t.optimizer.beta1},
        {"beta2", t.optimizer.beta2},
        {"epsilon", t.optimizer.epsilon},
        {"poly_power", t.schedule.power},
        {"warmup_ratio", t.schedule.warmup_ratio},
        {"warmup_iters", t.schedule.warmup_iters},
        {"warmup_fraction", t.warmup_fraction},
        {"stop_gradient_targets", t.stop_gradient_targets},
        {"log_locations", t.log_locations},
        {"max_steps", t.max_steps}}},
      {"eval",
       {{"domains", c.eval_domains},
        {"score_threshold", c.eval.score_threshold},
        {"max_detections", c.eval.max_detections}}}};
}

}  // namespace pepr::config
