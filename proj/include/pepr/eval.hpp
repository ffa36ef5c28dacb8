#pragma once

// Multi-domain evaluation of an inference checkpoint. Only RGB inputs are
// read; event files in the eval splits are never opened.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/dataset.hpp"
#include "pepr/metrics.hpp"
#include "pepr/model.hpp"
#include "pepr/params.hpp"

namespace pepr {

struct DomainResult {
  std::string domain;
  Task task = Task::segmentation;
  std::size_t samples = 0;
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  std::vector<double> per_class_iou;  // NaN entries for absent classes
  double map_50_95 = 0.0;
  double map_50 = 0.0;
  std::vector<double> ap_per_threshold;
  std::optional<std::string> error;

  // Headline metric for tables: mIoU or mAP50:95.
  double primary() const { return task == Task::segmentation ? miou : map_50_95; }
};

inline nlohmann::json to_json(const DomainResult& r) {
  nlohmann::json j{{"domain", r.domain}, {"task", to_string(r.task)}, {"samples", r.samples}};
  if (r.error) {
    j["error"] = *r.error;
    return j;
  }
  if (r.task == Task::segmentation) {
    j["miou"] = r.miou;
    j["pixel_accuracy"] = r.pixel_accuracy;
    nlohmann::json pc = nlohmann::json::array();
    for (double v : r.per_class_iou) pc.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    j["per_class_iou"] = pc;
  } else {
    j["map_50_95"] = r.map_50_95;
    j["map_50"] = r.map_50;
    j["ap_per_threshold"] = r.ap_per_threshold;
  }
  return j;
}

inline DomainResult domain_result_from_json(const nlohmann::json& j) {
  DomainResult r;
  r.domain = j.at("domain").get<std::string>();
  r.task = task_from_string(j.at("task").get<std::string>());
  r.samples = j.at("samples").get<std::size_t>();
  if (j.contains("error")) {
    r.error = j["error"].get<std::string>();
    return r;
  }
  if (r.task == Task::segmentation) {
    r.miou = j.at("miou").get<double>();
    r.pixel_accuracy = j.value("pixel_accuracy", 0.0);
    if (j.contains("per_class_iou"))
      for (const auto& v : j["per_class_iou"]) r.per_class_iou.push_back(v.is_null() ? std::nan("") : v.get<double>());
  } else {
    r.map_50_95 = j.at("map_50_95").get<double>();
    r.map_50 = j.at("map_50").get<double>();
    if (j.contains("ap_per_threshold")) r.ap_per_threshold = j["ap_per_threshold"].get<std::vector<double>>();
  }
  return r;
}

struct EvalOptions {
  double score_threshold = 0.05;
  std::size_t max_detections = 100;
};

// What a predictor returns for one RGB sample.
struct Prediction {
  std::vector<std::uint8_t> mask;             // segmentation
  std::vector<metrics::ScoredBox> detections;  // detection
};

using Predictor = std::function<Prediction(const data::LoadedSample&)>;

// Runs `predict` over each requested domain. A domain that fails (missing
// split, unreadable sample) gets an error entry; the others are still scored.
inline std::vector<DomainResult> evaluate_domains(const Predictor& predict, Task task, const data::Manifest& manifest,
                                                  const std::vector<std::string>& domains,
                                                  int num_classes = synth::kNumClasses) {
  require(!domains.empty(), "eval: no domains requested");
  std::vector<DomainResult> out;
  for (const auto& d : domains) {
    DomainResult r;
    r.domain = d;
    r.task = task;
    try {
      const auto entries = manifest.select("eval", d);
      if (entries.empty()) throw ValidationError("missing eval split for domain '" + d + "'");
      metrics::ConfusionMatrix cm(num_classes);
      std::vector<std::vector<metrics::ScoredBox>> dets;
      std::vector<std::vector<synth::Box>> gts;
      for (const auto& e : entries) {
        const data::LoadedSample s = data::load_sample(manifest, e, false);
        const Prediction p = predict(s);
        if (task == Task::segmentation) {
          cm.add(p.mask, s.mask.data);
        } else {
          dets.push_back(p.detections);
          gts.push_back(s.boxes);
        }
      }
      r.samples = entries.size();
      if (task == Task::segmentation) {
        const auto m = metrics::miou_from_confusion(cm);
        r.miou = m.miou;
        r.pixel_accuracy = m.pixel_accuracy;
        r.per_class_iou = m.per_class;
      } else {
        const auto m = metrics::compute_map(dets, gts);
        r.map_50_95 = m.map_50_95;
        r.map_50 = m.map_50;
        r.ap_per_threshold = m.ap;
      }
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Rejects any checkpoint carrying event-encoder or predictor arrays.
template <class T>
void require_inference_only(const ParameterStore<T>& store) {
  for (const auto& p : store.params())
    if (is_training_only(p.name))
      throw ValidationError("checkpoint contains training-only parameter '" + p.name +
                            "'; evaluation accepts inference checkpoints only");
}

inline Predictor model_predictor(const ParameterStore<float>& params, const ModelConfig& cfg, Task task,
                                 const EvalOptions& opts = {}) {
  return [&params, cfg, task, opts](const data::LoadedSample& s) {
    ad::NoGradGuard no_grad;
    Prediction p;
    const FeatureMap<float> f = rgb_encode(image_input<float>(s.rgb), params, cfg);
    if (task == Task::segmentation) {
      const ad::Var<float> logits = seg_head_forward(f, params);
      const std::size_t k = logits.dim(1);
      const auto v = logits.value();
      p.mask.resize(logits.dim(0));
      for (std::size_t i = 0; i < p.mask.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
          if (v[i * k + c] > v[i * k + best]) best = c;
        p.mask[i] = static_cast<std::uint8_t>(best);
      }
    } else {
      for (const auto& d : decode_detections(det_head_forward(f, params), opts.score_threshold, opts.max_detections))
        p.detections.push_back({d.score, d.box});
    }
    return p;
  };
}

inline std::vector<DomainResult> evaluate_domains(const checkpoint::Archive<float>& ckpt,
                                                  const data::Manifest& manifest,
                                                  const std::vector<std::string>& domains,
                                                  const EvalOptions& opts = {}) {
  require_inference_only(ckpt.store);
  require(ckpt.header.contains("model") && ckpt.header.contains("task"), "checkpoint header lacks model/task");
  const ModelConfig cfg = ModelConfig::from_json(ckpt.header["model"]);
  const Task task = task_from_string(ckpt.header["task"].get<std::string>());
  return evaluate_domains(model_predictor(ckpt.store, cfg, task, opts), task, manifest, domains, cfg.num_classes);
}

}  // namespace pepr
