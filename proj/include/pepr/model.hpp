#pragma once

// Differentiable model components: convolutional RGB and event encoders, the
// transformer-decoder patch predictor with learnable positional queries, and
// the segmentation and detection heads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/autodiff.hpp"
#include "pepr/events.hpp"
#include "pepr/image_io.hpp"
#include "pepr/params.hpp"
#include "pepr/rng.hpp"
#include "pepr/synth.hpp"

namespace pepr {

enum class Task { segmentation, detection };

inline std::string to_string(Task t) { return t == Task::segmentation ? "segmentation" : "detection"; }
inline Task task_from_string(const std::string& s) {
  if (s == "segmentation") return Task::segmentation;
  if (s == "detection") return Task::detection;
  throw ValidationError("unknown task: " + s);
}

struct ModelConfig {
  int image_height = 128;
  int image_width = 128;
  std::vector<int> channels = {16, 32, 64, 64};  // one stride-2 block each; last entry is D
  int norm_groups = 8;
  int predictor_depth = 4;
  int predictor_heads = 8;
  int ffn_multiplier = 2;
  int num_classes = synth::kNumClasses;

  static constexpr int kStride = 16;

  int feature_dim() const { return channels.back(); }
  int grid_height() const { return image_height / kStride; }
  int grid_width() const { return image_width / kStride; }
  int groups_for(int c) const { return std::min(norm_groups, c); }

  void validate() const {
    require(channels.size() == 4, "model: encoder needs exactly 4 stride-2 blocks");
    require(image_height % kStride == 0 && image_width % kStride == 0, "model: image size must be a multiple of 16");
    for (int c : channels) {
      require(c > 0, "model: channel counts must be positive");
      require(c % groups_for(c) == 0, "model: channels not divisible by norm groups");
    }
    require(predictor_depth >= 1 && predictor_heads >= 1, "model: predictor depth/heads must be >= 1");
    require(feature_dim() % predictor_heads == 0, "model: feature dim must be divisible by heads");
    require(ffn_multiplier >= 1, "model: ffn_multiplier must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"image_height", image_height},   {"image_width", image_width},         {"channels", channels},
            {"norm_groups", norm_groups},     {"predictor_depth", predictor_depth}, {"predictor_heads", predictor_heads},
            {"ffn_multiplier", ffn_multiplier}, {"num_classes", num_classes}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_height = j.at("image_height").get<int>();
    c.image_width = j.at("image_width").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.norm_groups = j.at("norm_groups").get<int>();
    c.predictor_depth = j.at("predictor_depth").get<int>();
    c.predictor_heads = j.at("predictor_heads").get<int>();
    c.ffn_multiplier = j.at("ffn_multiplier").get<int>();
    c.num_classes = j.value("num_classes", synth::kNumClasses);
    c.validate();
    return c;
  }
};

namespace prefix {
inline constexpr const char* kRgbEncoder = "rgb_encoder.";
inline constexpr const char* kEventEncoder = "event_encoder.";
inline constexpr const char* kPredictor = "predictor.";
inline constexpr const char* kSegHead = "seg_head.";
inline constexpr const char* kDetHead = "det_head.";
}  // namespace prefix

inline bool is_training_only(const std::string& name) {
  return name.rfind(prefix::kEventEncoder, 0) == 0 || name.rfind(prefix::kPredictor, 0) == 0;
}

enum class Modality { rgb, event };

// Tokens are [grid_h * grid_w, dim], row-major over the grid.
template <class T>
struct FeatureMap {
  ad::Var<T> tokens;
  int height = 0;
  int width = 0;
  int dim = 0;
  Modality source = Modality::rgb;

  std::span<const T> at(int y, int x) const {
    return tokens.value().subspan(static_cast<std::size_t>(y * width + x) * dim, static_cast<std::size_t>(dim));
  }
};

struct GridCoord {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
  friend auto operator<=>(const GridCoord&, const GridCoord&) = default;
};

// ---------------------------------------------------------------- init

namespace init {

template <class T>
void fan_in_uniform(ParameterStore<T>& s, std::uint64_t seed, const std::string& name, ad::Shape shape,
                    std::size_t fan_in, ParamKind kind = ParamKind::weight) {
  rng::Engine eng = rng::engine(rng::derive(seed, name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng::uniform(eng, -bound, bound));
  s.add(name, std::move(shape), std::move(v), kind);
}

template <class T>
void filled(ParameterStore<T>& s, const std::string& name, ad::Shape shape, double value, ParamKind kind) {
  s.add(name, std::move(shape), std::vector<T>(ad::numel(shape), static_cast<T>(value)), kind);
}

template <class T>
void linear(ParameterStore<T>& s, std::uint64_t seed, const std::string& name, int in, int out) {
  fan_in_uniform(s, seed, name + ".weight", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)},
                 static_cast<std::size_t>(in));
  filled(s, name + ".bias", {static_cast<std::size_t>(out)}, 0.0, ParamKind::bias);
}

template <class T>
void norm(ParameterStore<T>& s, const std::string& name, int dim) {
  filled(s, name + ".gain", {static_cast<std::size_t>(dim)}, 1.0, ParamKind::norm);
  filled(s, name + ".bias", {static_cast<std::size_t>(dim)}, 0.0, ParamKind::norm);
}

}  // namespace init

// Every parameter draws from its own stream keyed by (seed, name), so adding
// or removing a component never changes the initial values of the others.
template <class T>
void add_encoder(ParameterStore<T>& s, const ModelConfig& cfg, const std::string& pfx, int in_channels,
                 std::uint64_t seed) {
  int cin = in_channels;
  for (std::size_t b = 0; b < cfg.channels.size(); ++b) {
    const int cout = cfg.channels[b];
    const std::string blk = pfx + "block" + std::to_string(b);
    init::fan_in_uniform(s, seed, blk + ".conv.weight",
                         {static_cast<std::size_t>(cout), static_cast<std::size_t>(cin * 9)},
                         static_cast<std::size_t>(cin * 9));
    init::filled(s, blk + ".conv.bias", {static_cast<std::size_t>(cout)}, 0.0, ParamKind::bias);
    init::norm(s, blk + ".norm", cout);
    cin = cout;
  }
}

template <class T>
void add_predictor(ParameterStore<T>& s, const ModelConfig& cfg, std::uint64_t seed) {
  const int d = cfg.feature_dim();
  const std::string p = prefix::kPredictor;
  {
    rng::Engine eng = rng::engine(rng::derive(seed, p + "query_table"));
    const std::size_t rows = static_cast<std::size_t>(cfg.grid_height() * cfg.grid_width());
    std::vector<T> v(rows * static_cast<std::size_t>(d));
    for (auto& x : v) x = static_cast<T>(rng::normal(eng, 0.0, 0.02));
    s.add(p + "query_table", {rows, static_cast<std::size_t>(d)}, std::move(v), ParamKind::embedding);
  }
  for (int l = 0; l < cfg.predictor_depth; ++l) {
    const std::string lp = p + "layer" + std::to_string(l);
    for (const char* attn : {".self_attn", ".cross_attn"})
      for (const char* proj : {".q", ".k", ".v", ".o"}) init::linear(s, seed, lp + attn + proj, d, d);
    init::linear(s, seed, lp + ".ffn.fc1", d, d * cfg.ffn_multiplier);
    init::linear(s, seed, lp + ".ffn.fc2", d * cfg.ffn_multiplier, d);
    init::norm(s, lp + ".norm1", d);
    init::norm(s, lp + ".norm2", d);
    init::norm(s, lp + ".norm3", d);
  }
  init::linear(s, seed, p + "out", d, d);
}

template <class T>
void add_head(ParameterStore<T>& s, const ModelConfig& cfg, Task task, std::uint64_t seed) {
  if (task == Task::segmentation)
    init::linear(s, seed, std::string(prefix::kSegHead) + "classifier", cfg.feature_dim(), cfg.num_classes);
  else
    init::linear(s, seed, std::string(prefix::kDetHead) + "proj", cfg.feature_dim(), 3);
}

struct Components {
  bool rgb_encoder = true;
  bool event_encoder = false;
  bool predictor = false;
  bool head = true;
};

template <class T>
ParameterStore<T> init_parameters(const ModelConfig& cfg, Task task, Components comp, std::uint64_t seed) {
  cfg.validate();
  ParameterStore<T> s;
  if (comp.rgb_encoder) add_encoder(s, cfg, prefix::kRgbEncoder, 3, seed);
  if (comp.head) add_head(s, cfg, task, seed);
  if (comp.event_encoder) add_encoder(s, cfg, prefix::kEventEncoder, 2, seed);
  if (comp.predictor) add_predictor(s, cfg, seed);
  return s;
}

// ---------------------------------------------------------------- inputs

template <class T>
ad::Var<T> image_input(const Image8& img) {
  require(img.channels == 3, "image_input: need an RGB image");
  const std::size_t hw = static_cast<std::size_t>(img.height) * img.width;
  std::vector<T> v(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) v[c * hw + i] = static_cast<T>(img.data[i * 3 + c]) / T(255);
  return ad::Var<T>::constant({3, static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)},
                              std::move(v));
}

template <class T>
ad::Var<T> time_surface_input(const TimeSurface& ts) {
  std::vector<T> v(ts.values.begin(), ts.values.end());
  return ad::Var<T>::constant(
      {2, static_cast<std::size_t>(ts.resolution.height), static_cast<std::size_t>(ts.resolution.width)},
      std::move(v));
}

// ---------------------------------------------------------------- encoders

template <class T>
FeatureMap<T> encode(const ad::Var<T>& input, const ParameterStore<T>& s, const ModelConfig& cfg,
                     const std::string& pfx, std::size_t in_channels, Modality source) {
  require(input.shape().size() == 3 && input.dim(0) == in_channels &&
              input.dim(1) == static_cast<std::size_t>(cfg.image_height) &&
              input.dim(2) == static_cast<std::size_t>(cfg.image_width),
          "encoder input shape " + ad::shape_str(input.shape()) + " does not match model config");
  ad::Var<T> x = input;
  for (std::size_t b = 0; b < cfg.channels.size(); ++b) {
    const std::string blk = pfx + "block" + std::to_string(b);
    x = ad::conv2d(x, s.get(blk + ".conv.weight"), s.get(blk + ".conv.bias"), 3, 2, 1);
    x = ad::group_norm(x, s.get(blk + ".norm.gain"), s.get(blk + ".norm.bias"),
                       static_cast<std::size_t>(cfg.groups_for(cfg.channels[b])));
    x = ad::silu(x);
  }
  const std::size_t d = x.dim(0), h = x.dim(1), w = x.dim(2);
  FeatureMap<T> f;
  f.tokens = ad::transpose(ad::reshape(x, {d, h * w}));
  f.height = static_cast<int>(h);
  f.width = static_cast<int>(w);
  f.dim = static_cast<int>(d);
  f.source = source;
  return f;
}

template <class T>
FeatureMap<T> rgb_encode(const ad::Var<T>& image, const ParameterStore<T>& s, const ModelConfig& cfg) {
  return encode(image, s, cfg, prefix::kRgbEncoder, 3, Modality::rgb);
}

template <class T>
FeatureMap<T> event_encode(const ad::Var<T>& surface, const ParameterStore<T>& s, const ModelConfig& cfg) {
  return encode(surface, s, cfg, prefix::kEventEncoder, 2, Modality::event);
}

// ---------------------------------------------------------------- predictor

// Fixed 2D sinusoidal code: per grid axis, sin/cos pairs over D/4 frequencies.
template <class T>
ad::Var<T> grid_position_encoding(int h, int w, int d) {
  std::vector<T> v(static_cast<std::size_t>(h * w * d), T(0));
  const int quarter = d / 4;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T* row = v.data() + static_cast<std::size_t>((y * w + x) * d);
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        row[k] = static_cast<T>(std::sin(y * omega));
        row[quarter + k] = static_cast<T>(std::cos(y * omega));
        row[2 * quarter + k] = static_cast<T>(std::sin(x * omega));
        row[3 * quarter + k] = static_cast<T>(std::cos(x * omega));
      }
    }
  return ad::Var<T>::constant({static_cast<std::size_t>(h * w), static_cast<std::size_t>(d)}, std::move(v));
}

template <class T>
ad::Var<T> linear(const ad::Var<T>& x, const ParameterStore<T>& s, const std::string& name) {
  return ad::add_row_bias(ad::matmul(x, s.get(name + ".weight")), s.get(name + ".bias"));
}

template <class T>
ad::Var<T> multi_head_attention(const ad::Var<T>& queries, const ad::Var<T>& context, const ParameterStore<T>& s,
                                const std::string& name, int heads) {
  const ad::Var<T> q = linear(queries, s, name + ".q");
  const ad::Var<T> k = linear(context, s, name + ".k");
  const ad::Var<T> v = linear(context, s, name + ".v");
  const std::size_t d = q.dim(1);
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<ad::Var<T>> outs;
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    const auto qh = ad::slice_cols(q, off, dh);
    const auto kh = ad::slice_cols(k, off, dh);
    const auto vh = ad::slice_cols(v, off, dh);
    const auto attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    outs.push_back(ad::matmul(attn, vh));
  }
  return linear(heads == 1 ? outs[0] : ad::concat_cols(outs), s, name + ".o");
}

template <class T>
ad::Var<T> norm_rows(const ad::Var<T>& x, const ParameterStore<T>& s, const std::string& name) {
  return ad::layer_norm(x, s.get(name + ".gain"), s.get(name + ".bias"));
}

// Returns [M, D] predictions in the order of `locations`. Each location's
// query is its row of the learnable table; RGB tokens carry a fixed position
// code and are attended by cross-attention.
template <class T>
ad::Var<T> predict_patches(const FeatureMap<T>& rgb, std::span<const GridCoord> locations, const ParameterStore<T>& s,
                           const ModelConfig& cfg) {
  const std::size_t d = static_cast<std::size_t>(rgb.dim);
  if (locations.empty()) return ad::Var<T>::constant({0, d});
  std::vector<std::size_t> rows;
  for (const auto& p : locations) {
    require(p.row >= 0 && p.row < rgb.height && p.col >= 0 && p.col < rgb.width,
            "predict_patches: location outside the feature grid");
    rows.push_back(static_cast<std::size_t>(p.row * rgb.width + p.col));
  }
  const std::string pfx = prefix::kPredictor;
  const ad::Var<T> memory = ad::add(rgb.tokens, grid_position_encoding<T>(rgb.height, rgb.width, rgb.dim));
  ad::Var<T> x = ad::gather_rows(s.get(pfx + "query_table"), rows);
  for (int l = 0; l < cfg.predictor_depth; ++l) {
    const std::string lp = pfx + "layer" + std::to_string(l);
    x = norm_rows(ad::add(x, multi_head_attention(x, x, s, lp + ".self_attn", cfg.predictor_heads)), s, lp + ".norm1");
    x = norm_rows(ad::add(x, multi_head_attention(x, memory, s, lp + ".cross_attn", cfg.predictor_heads)), s,
                  lp + ".norm2");
    const auto ff = linear(ad::gelu(linear(x, s, lp + ".ffn.fc1")), s, lp + ".ffn.fc2");
    x = norm_rows(ad::add(x, ff), s, lp + ".norm3");
  }
  return linear(x, s, pfx + "out");
}

// ---------------------------------------------------------------- heads

// Per-pixel class logits [H*W, num_classes]: 1x1 classifier on the grid,
// bilinearly upsampled by the encoder stride.
template <class T>
ad::Var<T> seg_head_forward(const FeatureMap<T>& f, const ParameterStore<T>& s) {
  const auto logits = linear(f.tokens, s, std::string(prefix::kSegHead) + "classifier");
  return ad::upsample_bilinear(logits, static_cast<std::size_t>(f.height), static_cast<std::size_t>(f.width),
                               ModelConfig::kStride);
}

template <class T>
struct DetHeadOutput {
  ad::Var<T> logits;   // [h*w, 1] objectness logits
  ad::Var<T> heatmap;  // [h*w, 1] sigmoid(logits)
  ad::Var<T> sizes;    // [h*w, 2] (width, height) in pixels
  int height = 0;
  int width = 0;
};

// Sizes are softplus outputs scaled by the cell size so that an untrained
// head predicts boxes on the order of one cell.
template <class T>
DetHeadOutput<T> det_head_forward(const FeatureMap<T>& f, const ParameterStore<T>& s) {
  const auto raw = linear(f.tokens, s, std::string(prefix::kDetHead) + "proj");
  DetHeadOutput<T> out;
  out.logits = ad::slice_cols(raw, 0, 1);
  out.heatmap = ad::sigmoid(out.logits);
  out.sizes = ad::scale(ad::softplus(ad::slice_cols(raw, 1, 2)), static_cast<T>(ModelConfig::kStride));
  out.height = f.height;
  out.width = f.width;
  return out;
}

struct Detection {
  double score = 0.0;
  synth::Box box;
};

// Cells that strictly exceed every in-bounds neighbor of their 3x3 window and
// reach the threshold; box centered on the cell center in image pixels.
inline std::vector<Detection> decode_detections(std::span<const double> heatmap, std::span<const double> sizes,
                                                int height, int width, double score_threshold, std::size_t max_dets,
                                                double cell = ModelConfig::kStride) {
  require(heatmap.size() == static_cast<std::size_t>(height * width) && sizes.size() == 2 * heatmap.size(),
          "decode_detections: shape mismatch");
  std::vector<Detection> out;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double v = heatmap[static_cast<std::size_t>(y * width + x)];
      if (v < score_threshold) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1 && peak; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!dy && !dx) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= height || xx < 0 || xx >= width) continue;
          if (heatmap[static_cast<std::size_t>(yy * width + xx)] >= v) {
            peak = false;
            break;
          }
        }
      if (!peak) continue;
      const std::size_t i = static_cast<std::size_t>(y * width + x);
      const double cx = (x + 0.5) * cell, cy = (y + 0.5) * cell;
      const double bw = sizes[2 * i], bh = sizes[2 * i + 1];
      out.push_back({v, {1, cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2}});
    }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (out.size() > max_dets) out.resize(max_dets);
  return out;
}

template <class T>
std::vector<Detection> decode_detections(const DetHeadOutput<T>& head, double score_threshold, std::size_t max_dets) {
  std::vector<double> heat(head.heatmap.value().begin(), head.heatmap.value().end());
  std::vector<double> sizes(head.sizes.value().begin(), head.sizes.value().end());
  return decode_detections(heat, sizes, head.height, head.width, score_threshold, max_dets);
}

}  // namespace pepr
