#pragma once

// On-disk paired RGB/event/label dataset: generation, manifest, loading.
//
// Layout under the dataset root:
//   manifest.json
//   train/<index>/{rgb.png, events.txt, mask.png, boxes.csv, meta.json}
//   eval/<domain>/<index>/...   (same scene seeds for every domain)

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "pepr/event_io.hpp"
#include "pepr/events.hpp"
#include "pepr/file_audit.hpp"
#include "pepr/image_io.hpp"
#include "pepr/synth.hpp"

namespace pepr::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kManifestFormat = "pepr-dataset/1";

// Time-surface decay and activity window, both in units of the frame interval.
struct RepresentationConfig {
  double tau_frames = 0.5;
  double window_frames = 1.0;
};

struct SampleMeta {
  std::string id;
  std::uint64_t seed = 0;
  std::string domain;
  std::vector<double> timestamps;  // key frames
  double t_ref = 0.0;
  double tau = 0.0;
  double window_t0 = 0.0;
  double window_t1 = 0.0;
};

inline json to_json(const SampleMeta& m) {
  return json{{"id", m.id},       {"seed", m.seed},           {"domain", m.domain},
              {"timestamps", m.timestamps}, {"t_ref", m.t_ref}, {"tau", m.tau},
              {"activity_window", {m.window_t0, m.window_t1}}};
}

inline SampleMeta meta_from_json(const json& j) {
  SampleMeta m;
  m.id = j.at("id").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.domain = j.at("domain").get<std::string>();
  m.timestamps = j.at("timestamps").get<std::vector<double>>();
  m.t_ref = j.at("t_ref").get<double>();
  m.tau = j.at("tau").get<double>();
  m.window_t0 = j.at("activity_window").at(0).get<double>();
  m.window_t1 = j.at("activity_window").at(1).get<double>();
  return m;
}

struct ManifestEntry {
  std::string id;
  std::string split;  // "train" or "eval"
  std::string domain;
  std::uint64_t seed = 0;
  std::string path;  // relative to the dataset root
};

struct Manifest {
  fs::path root;
  std::uint64_t master_seed = 0;
  json generator;  // resolved generation settings
  std::vector<ManifestEntry> samples;

  std::vector<ManifestEntry> select(const std::string& split, const std::string& domain = "") const {
    std::vector<ManifestEntry> out;
    for (const auto& s : samples)
      if (s.split == split && (domain.empty() || s.domain == domain)) out.push_back(s);
    return out;
  }

  json to_json() const {
    json samples_j = json::array();
    json splits = json::object();
    for (const auto& s : samples) {
      samples_j.push_back({{"id", s.id}, {"split", s.split}, {"domain", s.domain}, {"seed", s.seed}, {"path", s.path}});
      const std::string key = s.split == "train" ? "train" : "eval/" + s.domain;
      splits[key].push_back(s.path);
    }
    if (!splits.contains("train")) splits["train"] = json::array();
    return json{{"format", kManifestFormat}, {"master_seed", master_seed}, {"generator", generator},
                {"splits", splits},          {"samples", samples_j}};
  }
};

inline std::string read_file(const fs::path& path) {
  audit::record_open(path.string());
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open", path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing", path.string());
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("write failed", path.string());
}

inline Manifest load_manifest(const fs::path& root) {
  const fs::path file = root / "manifest.json";
  if (!fs::exists(file)) throw ValidationError("no manifest.json in " + root.string());
  if (fs::exists(root / "INVALID")) throw ValidationError("dataset marked invalid: " + root.string());
  const json j = json::parse(read_file(file));
  if (j.value("format", "") != kManifestFormat) throw ValidationError("unsupported manifest format in " + file.string());
  Manifest m;
  m.root = root;
  m.master_seed = j.at("master_seed").get<std::uint64_t>();
  m.generator = j.value("generator", json::object());
  for (const auto& s : j.at("samples"))
    m.samples.push_back({s.at("id").get<std::string>(), s.at("split").get<std::string>(),
                         s.at("domain").get<std::string>(), s.at("seed").get<std::uint64_t>(),
                         s.at("path").get<std::string>()});
  return m;
}

inline std::string format_boxes_csv(const std::vector<synth::Box>& boxes) {
  std::string out = "class,xmin,ymin,xmax,ymax\n";
  char line[128];
  for (const auto& b : boxes) {
    std::snprintf(line, sizeof line, "%d,%.0f,%.0f,%.0f,%.0f\n", b.class_id, b.xmin, b.ymin, b.xmax, b.ymax);
    out += line;
  }
  return out;
}

inline std::vector<synth::Box> parse_boxes_csv(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "class,xmin,ymin,xmax,ymax")
    throw ValidationError("boxes.csv: bad header in " + origin);
  std::vector<synth::Box> boxes;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    synth::Box b;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &b.class_id, &b.xmin, &b.ymin, &b.xmax, &b.ymax) != 5)
      throw ValidationError("boxes.csv: malformed row in " + origin);
    boxes.push_back(b);
  }
  return boxes;
}

// Everything needed to persist one paired sample.
struct SampleArtifacts {
  Image8 rgb;
  EventStream events;
  Grid<std::uint8_t> mask;
  std::vector<synth::Box> boxes;
  SampleMeta meta;
};

inline SampleArtifacts make_sample(const synth::SceneConfig& base, const SimulatorConfig& sim,
                                   const RepresentationConfig& rep, std::uint64_t scene_seed,
                                   const synth::DomainTransform& domain, const std::string& id) {
  synth::SceneConfig cfg = base;
  cfg.seed = scene_seed;
  const synth::SceneSequence seq = synth::render_scene_sequence(cfg);
  SampleArtifacts s;
  // Events come from HDR luminance, before any exposure model is applied.
  s.events = simulate_events(seq.frames, seq.timestamps, sim);
  rng::Engine noise = rng::engine(rng::derive(scene_seed, "tone_map/" + domain.name));
  s.rgb = synth::tone_map(seq.frames.back(), seq.seg_mask, domain, noise);
  s.mask = seq.seg_mask;
  s.boxes = seq.boxes;
  s.meta.id = id;
  s.meta.seed = scene_seed;
  s.meta.domain = domain.name;
  for (std::size_t k = 0; k < seq.timestamps.size(); k += static_cast<std::size_t>(cfg.subframes))
    s.meta.timestamps.push_back(seq.timestamps[k]);
  s.meta.t_ref = seq.t_ref;
  s.meta.tau = rep.tau_frames * cfg.frame_interval;
  s.meta.window_t0 = seq.t_ref - rep.window_frames * cfg.frame_interval;
  s.meta.window_t1 = seq.t_ref;
  return s;
}

inline void write_sample(const SampleArtifacts& s, const fs::path& dir) {
  fs::create_directories(dir);
  png_io::write(s.rgb, (dir / "rgb.png").string());
  event_io::write_text(s.events, (dir / "events.txt").string());
  Image8 mask(s.mask.height, s.mask.width, 1);
  mask.data = s.mask.data;
  png_io::write(mask, (dir / "mask.png").string());
  write_file(dir / "boxes.csv", format_boxes_csv(s.boxes));
  write_file(dir / "meta.json", to_json(s.meta).dump(2) + "\n");
}

struct GenerateOptions {
  synth::SceneConfig scene;
  SimulatorConfig simulator;
  RepresentationConfig representation;
  std::size_t n_train = 200;
  std::size_t n_eval_per_domain = 50;
  std::vector<std::string> domains = {"day", "dusk", "night"};
  std::uint64_t master_seed = 0;
  unsigned workers = 1;
};

inline json generator_json(const GenerateOptions& o);

// Samples are keyed by index and derive their seeds from the master seed, so
// the output is identical for any worker count or completion order.
inline Manifest generate_dataset(const GenerateOptions& opts, const fs::path& out_dir) {
  opts.scene.validate();
  opts.simulator.validate();
  require(!opts.domains.empty() || opts.n_eval_per_domain == 0, "generate_dataset: no eval domains");
  for (const auto& d : opts.domains) synth::domain_preset(d);

  struct Job {
    ManifestEntry entry;
    synth::DomainTransform domain;
  };
  std::vector<Job> jobs;
  auto seed53 = [](std::uint64_t s) { return s & ((1ULL << 53) - 1); };
  for (std::size_t i = 0; i < opts.n_train; ++i) {
    char idx[16];
    std::snprintf(idx, sizeof idx, "%06zu", i);
    const std::string path = std::string("train/") + idx;
    jobs.push_back({{path, "train", "day", seed53(rng::derive(opts.master_seed, "train", i)), path},
                    synth::domain_preset("day")});
  }
  for (const auto& d : opts.domains) {
    for (std::size_t i = 0; i < opts.n_eval_per_domain; ++i) {
      char idx[16];
      std::snprintf(idx, sizeof idx, "%06zu", i);
      const std::string path = "eval/" + d + "/" + idx;
      jobs.push_back({{path, "eval", d, seed53(rng::derive(opts.master_seed, "eval", i)), path},
                      synth::domain_preset(d)});
    }
  }

  try {
    fs::create_directories(out_dir);
    fs::remove(out_dir / "INVALID");
    fs::remove(out_dir / "manifest.json");
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot prepare output directory (") + e.what() + ")", out_dir.string());
  }

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::optional<std::string> first_error;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      {
        std::lock_guard lock(err_mu);
        if (first_error) return;
      }
      try {
        const auto& job = jobs[j];
        write_sample(make_sample(opts.scene, opts.simulator, opts.representation, job.entry.seed, job.domain,
                                 job.entry.id),
                     out_dir / job.entry.path);
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = e.what();
      }
    }
  };
  const unsigned n_workers = std::max(1u, opts.workers);
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) {
    std::ofstream(out_dir / "INVALID") << *first_error << "\n";
    throw IoError("dataset generation failed (" + *first_error + ")", out_dir.string());
  }

  Manifest m;
  m.root = out_dir;
  m.master_seed = opts.master_seed;
  m.generator = generator_json(opts);
  for (const auto& job : jobs) m.samples.push_back(job.entry);
  write_file(out_dir / "manifest.json", m.to_json().dump(2) + "\n");
  return m;
}

inline json generator_json(const GenerateOptions& o) {
  const auto& s = o.scene;
  return json{{"scene",
               {{"height", s.height},
                {"width", s.width},
                {"num_shapes", s.num_shapes},
                {"min_half_size", s.min_half_size},
                {"max_half_size", s.max_half_size},
                {"min_speed", s.min_speed},
                {"max_speed", s.max_speed},
                {"frames_per_sample", s.frames_per_sample},
                {"subframes", s.subframes},
                {"frame_interval", s.frame_interval},
                {"luminance_min", s.luminance_min},
                {"luminance_max", s.luminance_max},
                {"min_contrast", s.min_contrast}}},
              {"simulator",
               {{"contrast_threshold", o.simulator.contrast_threshold},
                {"log_eps", o.simulator.log_eps},
                {"refractory", o.simulator.refractory}}},
              {"representation",
               {{"tau_frames", o.representation.tau_frames}, {"window_frames", o.representation.window_frames}}},
              {"n_train", o.n_train},
              {"n_eval_per_domain", o.n_eval_per_domain},
              {"domains", o.domains}};
}

struct LoadedSample {
  std::string id;
  SampleMeta meta;
  Image8 rgb;
  Grid<std::uint8_t> mask;
  std::vector<synth::Box> boxes;
  std::optional<TimeSurface> time_surface;
  std::optional<ActivityMap> activity;
};

// Event-derived representations are built here, once per sample, and only
// when `with_events` is set; otherwise events.txt is never opened.
inline LoadedSample load_sample(const Manifest& m, const ManifestEntry& e, bool with_events) {
  const fs::path dir = m.root / e.path;
  LoadedSample s;
  s.id = e.id;
  s.meta = meta_from_json(json::parse(read_file(dir / "meta.json")));
  s.rgb = png_io::read((dir / "rgb.png").string());
  require(s.rgb.channels == 3, "rgb.png must have 3 channels: " + dir.string());
  const Image8 mask = png_io::read((dir / "mask.png").string());
  require(mask.channels == 1 && mask.height == s.rgb.height && mask.width == s.rgb.width,
          "mask.png shape mismatch: " + dir.string());
  s.mask = Grid<std::uint8_t>(mask.height, mask.width);
  s.mask.data = mask.data;
  s.boxes = parse_boxes_csv(read_file(dir / "boxes.csv"), (dir / "boxes.csv").string());
  if (with_events) {
    const fs::path ev = dir / "events.txt";
    if (!fs::exists(ev)) throw ValidationError("missing event modality: " + ev.string());
    const EventStream stream = event_io::read_text(ev.string());
    s.time_surface = build_time_surface(stream, s.meta.t_ref, s.meta.tau);
    s.activity = build_activity_map(stream, s.meta.window_t0, s.meta.window_t1);
  }
  return s;
}

}  // namespace pepr::data
