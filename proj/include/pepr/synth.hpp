#pragma once

// Moving-shape scenes rendered in HDR luminance, plus the tone-mapping model
// that turns luminance into 8-bit RGB under day/dusk/night exposure.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pepr/error.hpp"
#include "pepr/events.hpp"
#include "pepr/image_io.hpp"
#include "pepr/rng.hpp"

namespace pepr::synth {

inline constexpr int kBackground = 0;
inline constexpr int kCircle = 1;
inline constexpr int kSquare = 2;
inline constexpr int kTriangle = 3;
inline constexpr int kNumClasses = 4;
inline constexpr std::uint8_t kIgnoreLabel = 255;

struct ShapeSpec {
  int class_id = kCircle;
  double cx = 0.0;  // center at frame 0, pixels
  double cy = 0.0;
  double half_size = 10.0;
  double vx = 0.0;  // pixels per frame
  double vy = 0.0;
  double luminance = 0.5;
};

struct Box {
  int class_id = 0;
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct SceneConfig {
  int height = 128;
  int width = 128;
  int num_shapes = 3;
  double min_half_size = 10.0;
  double max_half_size = 20.0;
  double min_speed = 1.0;  // pixels per frame
  double max_speed = 3.0;
  int frames_per_sample = 6;
  int subframes = 4;  // rendered steps per frame interval, fed to the simulator
  double frame_interval = 0.04;
  double luminance_min = 0.05;
  double luminance_max = 1.0;
  double min_contrast = 0.1;
  std::uint64_t seed = 0;
  // When set, these replace the random draw (background and shapes).
  std::optional<double> background;
  std::vector<ShapeSpec> shapes;

  void validate() const {
    require(height >= 16 && width >= 16, "scene: resolution too small");
    require(shapes.empty() ? num_shapes >= 1 : true, "scene: num_shapes must be >= 1");
    require(frames_per_sample >= 2, "scene: frames_per_sample must be >= 2");
    require(subframes >= 1, "scene: subframes must be >= 1");
    require(frame_interval > 0.0, "scene: frame_interval must be > 0");
    require(min_half_size > 0.0 && min_half_size <= max_half_size, "scene: bad shape size range");
    require(2.0 * max_half_size <= std::min(height, width), "scene: shapes larger than frame");
    require(min_speed >= 0.0 && min_speed <= max_speed, "scene: bad speed range");
    require(luminance_min >= 0.0 && luminance_max <= 1.0 && luminance_min < luminance_max,
            "scene: luminance range must lie in [0, 1]");
    require(min_contrast >= 0.1, "scene: min_contrast must be >= 0.1");
    require(luminance_max - luminance_min >= min_contrast, "scene: luminance range narrower than min_contrast");
    for (const auto& s : shapes) {
      require(s.class_id >= 1 && s.class_id <= 3, "scene: shape class must be 1..3");
      require(2.0 * s.half_size <= std::min(height, width), "scene: shapes larger than frame");
    }
  }
};

struct SceneSequence {
  std::vector<LuminanceFrame> frames;  // all rendered steps, key frames every `subframes`
  std::vector<double> timestamps;
  double t_ref = 0.0;                  // time of the final key frame
  Grid<std::uint8_t> seg_mask;         // at t_ref
  std::vector<Box> boxes;              // at t_ref, one per visible shape
  double background = 0.0;
  std::vector<ShapeSpec> shapes;
};

namespace detail {

inline bool inside(const ShapeSpec& s, double frame, double px, double py) {
  const double cx = s.cx + s.vx * frame;
  const double cy = s.cy + s.vy * frame;
  const double dx = px - cx;
  const double dy = py - cy;
  const double r = s.half_size;
  switch (s.class_id) {
    case kCircle:
      return dx * dx + dy * dy <= r * r;
    case kSquare:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    default: {
      // Upward-pointing triangle with apex (0,-r) and base corners (+-r, r).
      if (dy < -r || dy > r) return false;
      const double half_width = 0.5 * (dy + r);
      return std::abs(dx) <= half_width;
    }
  }
}

inline std::vector<ShapeSpec> draw_shapes(const SceneConfig& cfg, double background, rng::Engine& eng) {
  std::vector<ShapeSpec> out;
  const double span = static_cast<double>(cfg.frames_per_sample - 1);
  for (int i = 0; i < cfg.num_shapes; ++i) {
    ShapeSpec s;
    s.class_id = 1 + static_cast<int>(rng::index_below(eng, 3));
    s.half_size = rng::uniform(eng, cfg.min_half_size, cfg.max_half_size);
    const double speed = rng::uniform(eng, cfg.min_speed, cfg.max_speed);
    const double angle = rng::uniform(eng, 0.0, 6.283185307179586);
    s.vx = speed * std::cos(angle);
    s.vy = speed * std::sin(angle);
    for (int tries = 0;; ++tries) {
      s.luminance = rng::uniform(eng, cfg.luminance_min, cfg.luminance_max);
      if (std::abs(s.luminance - background) >= cfg.min_contrast) break;
      if (tries > 1000) {
        s.luminance = background + cfg.min_contrast <= cfg.luminance_max ? background + cfg.min_contrast
                                                                          : background - cfg.min_contrast;
        break;
      }
    }
    auto place = [&](double v, double extent) {
      const double lo = s.half_size - std::min(0.0, v * span);
      const double hi = extent - s.half_size - std::max(0.0, v * span);
      require(lo <= hi, "scene: shape cannot stay in frame at this speed");
      return rng::uniform(eng, lo, hi);
    };
    s.cx = place(s.vx, cfg.width);
    s.cy = place(s.vy, cfg.height);
    out.push_back(s);
  }
  return out;
}

inline LuminanceFrame render_luminance(const SceneConfig& cfg, const std::vector<ShapeSpec>& shapes,
                                       double background, double frame) {
  constexpr int kSuper = 4;
  LuminanceFrame img(cfg.height, cfg.width, background);
  for (const auto& s : shapes) {
    const double cx = s.cx + s.vx * frame;
    const double cy = s.cy + s.vy * frame;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - s.half_size)) - 1);
    const int x1 = std::min(cfg.width - 1, static_cast<int>(std::ceil(cx + s.half_size)) + 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - s.half_size)) - 1);
    const int y1 = std::min(cfg.height - 1, static_cast<int>(std::ceil(cy + s.half_size)) + 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx)
            hits += inside(s, frame, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper);
        if (hits == 0) continue;
        const double cov = static_cast<double>(hits) / (kSuper * kSuper);
        img(y, x) = img(y, x) * (1.0 - cov) + s.luminance * cov;
      }
    }
  }
  return img;
}

}  // namespace detail

struct Labels {
  Grid<std::uint8_t> seg_mask;
  std::vector<Box> boxes;
};

// Mask and tight boxes at a (possibly fractional) key-frame index. A pixel
// belongs to the last-drawn shape containing its center.
inline Labels render_labels(const SceneConfig& cfg, const std::vector<ShapeSpec>& shapes, double frame) {
  Labels out;
  out.seg_mask = Grid<std::uint8_t>(cfg.height, cfg.width, kBackground);
  Grid<int> owner(cfg.height, cfg.width, -1);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x)
      for (std::size_t i = 0; i < shapes.size(); ++i)
        if (detail::inside(shapes[i], frame, x + 0.5, y + 0.5)) owner(y, x) = static_cast<int>(i);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    int xmin = cfg.width, ymin = cfg.height, xmax = -1, ymax = -1;
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x)
        if (owner(y, x) == static_cast<int>(i)) {
          out.seg_mask(y, x) = static_cast<std::uint8_t>(shapes[i].class_id);
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
        }
    if (xmax >= 0)
      out.boxes.push_back({shapes[i].class_id, static_cast<double>(xmin), static_cast<double>(ymin),
                           static_cast<double>(xmax + 1), static_cast<double>(ymax + 1)});
  }
  return out;
}

inline SceneSequence render_scene_sequence(const SceneConfig& cfg) {
  cfg.validate();
  rng::Engine eng = rng::engine(rng::derive(cfg.seed, "scene"));
  SceneSequence seq;
  seq.background = cfg.background ? *cfg.background : rng::uniform(eng, cfg.luminance_min, cfg.luminance_max);
  seq.shapes = cfg.shapes.empty() ? detail::draw_shapes(cfg, seq.background, eng) : cfg.shapes;

  const int steps = (cfg.frames_per_sample - 1) * cfg.subframes;
  for (int k = 0; k <= steps; ++k) {
    const double frame = static_cast<double>(k) / cfg.subframes;
    seq.frames.push_back(detail::render_luminance(cfg, seq.shapes, seq.background, frame));
    seq.timestamps.push_back(frame * cfg.frame_interval);
  }
  seq.t_ref = seq.timestamps.back();
  Labels labels = render_labels(cfg, seq.shapes, cfg.frames_per_sample - 1);
  seq.seg_mask = std::move(labels.seg_mask);
  seq.boxes = std::move(labels.boxes);
  return seq;
}

struct DomainTransform {
  std::string name = "day";
  double gain = 1.0;
  double gamma = 2.2;
  double noise_sigma = 1.0;

  void validate() const {
    require(gain > 0.0 && gain <= 1.0, "domain: gain must lie in (0, 1]");
    require(gamma > 0.0, "domain: gamma must be > 0");
    require(noise_sigma >= 0.0, "domain: noise_sigma must be >= 0");
  }
};

inline DomainTransform domain_preset(const std::string& name) {
  if (name == "day") return {"day", 1.0, 2.2, 1.0};
  if (name == "dusk") return {"dusk", 0.15, 2.2, 4.0};
  if (name == "night") return {"night", 0.02, 2.2, 10.0};
  if (name == "pitch_black") return {"pitch_black", 0.005, 2.2, 10.0};
  throw ValidationError("unknown domain: " + name);
}

// Per-class chroma tint applied on top of the tone-mapped luminance.
inline constexpr std::array<std::array<double, 3>, kNumClasses> kClassTint = {{
    {1.0, 1.0, 1.0},
    {1.0, 0.75, 0.75},
    {0.75, 1.0, 0.75},
    {0.75, 0.75, 1.0},
}};

// `class_map` selects the tint per pixel; pass an empty grid for no tint.
inline Image8 tone_map(const LuminanceFrame& luminance, const Grid<std::uint8_t>& class_map,
                       const DomainTransform& transform, rng::Engine& eng) {
  transform.validate();
  const bool tinted = class_map.height == luminance.height && class_map.width == luminance.width;
  Image8 out(luminance.height, luminance.width, 3);
  for (int y = 0; y < luminance.height; ++y) {
    for (int x = 0; x < luminance.width; ++x) {
      const double l = luminance(y, x);
      require(l >= 0.0 && l <= 1.0, "tone_map: luminance must lie in [0, 1]");
      const double base = 255.0 * std::pow(transform.gain * l, 1.0 / transform.gamma);
      const auto& tint = kClassTint[tinted ? std::min<int>(class_map(y, x), kNumClasses - 1) : 0];
      for (int c = 0; c < 3; ++c) {
        double v = std::round(base * tint[c]);
        if (transform.noise_sigma > 0.0) v = std::round(v + rng::normal(eng, 0.0, transform.noise_sigma));
        out(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  return out;
}

}  // namespace pepr::synth
