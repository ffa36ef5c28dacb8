#pragma once

// Event-stream data model, frame-to-event simulation and the dense
// representations (time surface, activity map) built from a stream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pepr/error.hpp"

namespace pepr {

struct Resolution {
  int height = 0;
  int width = 0;

  std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

// Row-major dense grid.
template <class T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  T& operator()(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  Resolution resolution() const { return {height, width}; }
};

using LuminanceFrame = Grid<double>;

struct EventRecord {
  int x = 0;
  int y = 0;
  double t = 0.0;
  int polarity = 1;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

inline bool event_time_order(const EventRecord& a, const EventRecord& b) {
  if (a.t != b.t) return a.t < b.t;
  if (a.y != b.y) return a.y < b.y;
  if (a.x != b.x) return a.x < b.x;
  return a.polarity > b.polarity;
}

struct EventStream {
  Resolution resolution;
  std::vector<EventRecord> records;
  double t_start = 0.0;
  double t_end = 0.0;

  void validate() const {
    require(resolution.height > 0 && resolution.width > 0, "event stream: empty resolution");
    require(t_start <= t_end, "event stream: t_start > t_end");
    double prev = -std::numeric_limits<double>::infinity();
    for (const auto& e : records) {
      require(e.x >= 0 && e.x < resolution.width && e.y >= 0 && e.y < resolution.height,
              "event stream: record outside declared resolution");
      require(e.polarity == 1 || e.polarity == -1, "event stream: polarity must be +1 or -1");
      require(e.t >= t_start && e.t <= t_end, "event stream: timestamp outside [t_start, t_end]");
      require(e.t >= prev, "event stream: records not sorted by time");
      prev = e.t;
    }
  }
};

struct SimulatorConfig {
  double contrast_threshold = 0.2;
  double log_eps = 1e-3;
  double refractory = 0.0;

  void validate() const {
    require(contrast_threshold > 0.0, "simulator: contrast threshold must be > 0");
    require(log_eps > 0.0, "simulator: log_eps must be > 0");
    require(refractory >= 0.0, "simulator: refractory must be >= 0");
  }
};

// Level crossings closer than this (log units) to the threshold still fire, so
// a change of exactly C is not lost to rounding in log().
inline constexpr double kCrossingTolerance = 1e-9;

namespace detail {

struct PixelEmitter {
  double last_emit[2] = {-std::numeric_limits<double>::infinity(),
                         -std::numeric_limits<double>::infinity()};

  void emit(std::vector<EventRecord>& out, int x, int y, double t, int polarity, double refractory) {
    double& last = last_emit[polarity > 0 ? 0 : 1];
    if (t - last < refractory) return;
    last = t;
    out.push_back({x, y, t, polarity});
  }
};

}  // namespace detail

// Log intensity is interpolated linearly between frames (ESIM convention); the
// crossing time of each reference level is therefore exact within an interval.
inline EventStream simulate_events(std::span<const LuminanceFrame> frames, std::span<const double> timestamps,
                                   const SimulatorConfig& cfg) {
  cfg.validate();
  require(frames.size() >= 2, "simulate_events: need at least 2 frames");
  require(frames.size() == timestamps.size(), "simulate_events: frame/timestamp count mismatch");
  const Resolution res = frames.front().resolution();
  require(res.height > 0 && res.width > 0, "simulate_events: empty frame");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    require(frames[k].resolution() == res, "simulate_events: resolution mismatch between frames");
    if (k > 0) require(timestamps[k] > timestamps[k - 1], "simulate_events: timestamps must be strictly increasing");
    for (double v : frames[k].data) require(v >= 0.0, "simulate_events: luminance must be >= 0");
  }

  const double c = cfg.contrast_threshold;
  std::vector<EventRecord> out;
  std::vector<double> log_prev(res.pixels());
  std::vector<double> reference(res.pixels());
  std::vector<detail::PixelEmitter> emitters(res.pixels());
  for (std::size_t i = 0; i < res.pixels(); ++i) {
    log_prev[i] = std::log(frames[0].data[i] + cfg.log_eps);
    reference[i] = log_prev[i];
  }

  for (std::size_t k = 1; k < frames.size(); ++k) {
    const double ta = timestamps[k - 1];
    const double tb = timestamps[k];
    for (int y = 0; y < res.height; ++y) {
      for (int x = 0; x < res.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * res.width + x;
        const double la = log_prev[i];
        const double lb = std::log(frames[k].data[i] + cfg.log_eps);
        double& ref = reference[i];
        if (lb != la) {
          const int pol = lb > la ? 1 : -1;
          while (pol * (lb - (ref + pol * c)) >= -kCrossingTolerance) {
            const double level = ref + pol * c;
            const double frac = std::clamp((level - la) / (lb - la), 0.0, 1.0);
            emitters[i].emit(out, x, y, ta + frac * (tb - ta), pol, cfg.refractory);
            ref = level;
          }
        }
        log_prev[i] = lb;
      }
    }
  }

  std::stable_sort(out.begin(), out.end(), event_time_order);
  EventStream stream;
  stream.resolution = res;
  stream.records = std::move(out);
  stream.t_start = timestamps.front();
  stream.t_end = timestamps.back();
  return stream;
}

// Two channels: 0 = positive polarity, 1 = negative polarity.
struct TimeSurface {
  Resolution resolution;
  double t_ref = 0.0;
  double tau = 1.0;
  std::vector<double> values;  // [channel][y][x]

  double at(int channel, int y, int x) const {
    return values[(static_cast<std::size_t>(channel) * resolution.height + y) * resolution.width + x];
  }
};

inline TimeSurface build_time_surface(const EventStream& stream, double t_ref, double tau) {
  require(tau > 0.0, "build_time_surface: tau must be > 0");
  require(t_ref >= stream.t_start, "build_time_surface: t_ref precedes stream start");
  const Resolution res = stream.resolution;
  const double never = -std::numeric_limits<double>::infinity();
  std::vector<double> last(2 * res.pixels(), never);
  for (const auto& e : stream.records) {
    if (e.t > t_ref) continue;
    double& slot = last[(e.polarity > 0 ? 0 : res.pixels()) + static_cast<std::size_t>(e.y) * res.width + e.x];
    slot = std::max(slot, e.t);
  }
  TimeSurface ts;
  ts.resolution = res;
  ts.t_ref = t_ref;
  ts.tau = tau;
  ts.values.resize(last.size());
  for (std::size_t i = 0; i < last.size(); ++i)
    ts.values[i] = last[i] == never ? 0.0 : std::exp(-(t_ref - last[i]) / tau);
  return ts;
}

struct ActivityMap {
  Resolution resolution;
  double t0 = 0.0;
  double t1 = 0.0;
  std::vector<std::uint32_t> counts;  // [y][x]

  std::uint32_t at(int y, int x) const { return counts[static_cast<std::size_t>(y) * resolution.width + x]; }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

inline ActivityMap build_activity_map(const EventStream& stream, double t0, double t1) {
  require(t0 <= t1, "build_activity_map: t0 > t1");
  ActivityMap map;
  map.resolution = stream.resolution;
  map.t0 = t0;
  map.t1 = t1;
  map.counts.assign(stream.resolution.pixels(), 0);
  for (const auto& e : stream.records)
    if (e.t >= t0 && e.t <= t1) ++map.counts[static_cast<std::size_t>(e.y) * stream.resolution.width + e.x];
  return map;
}

}  // namespace pepr
