#pragma once

// Synthetic moving-shape clips on a toroidal G x G grid.
//
// Each clip shows one shape translating with wraparound. In steady mode the
// clip keeps one velocity, so with integer velocities frame t+1 is exactly
// frame t circularly shifted (before noise). Jerky mode resamples the
// velocity every frame. All randomness comes from ssfa::Rng.
//
// With scene_tiles > 1 a clip is instead a G x G view panning across a
// toroidal strip of scene_tiles tiles, one shape per tile, so distant frames
// of a clip show different objects.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "ssfa/datamodel.hpp"
#include "ssfa/error.hpp"
#include "ssfa/rng.hpp"

namespace ssfa {

enum class Shape { Blob = 0, HBar = 1, VBar = 2, Ring = 3 };
inline constexpr std::size_t kShapeCount = 4;

enum class MotionMode { Steady, Jerky };

inline MotionMode parse_motion_mode(const std::string& s) {
  if (s == "steady") return MotionMode::Steady;
  if (s == "jerky") return MotionMode::Jerky;
  throw ConfigError("unknown motion mode '" + s + "'");
}

struct Velocity {
  double dx = 0.0;
  double dy = 0.0;
  friend bool operator==(const Velocity&, const Velocity&) = default;
};

struct SynthConfig {
  std::size_t grid = 16;
  std::size_t clip_len = 20;
  std::size_t num_clips = 40;
  std::size_t num_shapes = 4;
  std::vector<Velocity> velocity_set{{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {-1, -1}, {1, -1}, {-1, 1}};
  MotionMode motion_mode = MotionMode::Steady;
  double noise_sigma = 0.05;
  /// Labeled images are centred on the grid with a uniform integer offset in
  /// [-label_jitter, label_jitter] per axis (object-centred stills, like
  /// cropped photos). A jitter >= grid/2 covers every position.
  std::size_t label_jitter = 2;
  /// 1: one shape on the G x G torus. >1: panning view over a strip of tiles.
  std::size_t scene_tiles = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (grid < 8) throw ConfigError("grid must be >= 8");
    if (clip_len < 5) throw ConfigError("clip_len must be >= 5");
    if (num_shapes < 2 || num_shapes > kShapeCount) throw ConfigError("num_shapes must lie in [2, 4]");
    if (velocity_set.empty()) throw ConfigError("velocity_set is empty");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (scene_tiles < 1) throw ConfigError("scene_tiles must be >= 1");
    if (scene_tiles > 1) {
      for (const auto& v : velocity_set) {
        if (v.dx != std::round(v.dx) || v.dy != std::round(v.dy))
          throw ConfigError("scene clips need integer velocities");
      }
    }
  }
};

namespace synth_detail {

/// Signed toroidal offset of a from b, in [-G/2, G/2).
inline long wrap_offset(long a, long b, long g) {
  long d = ((a - b) % g + g) % g;
  return d >= g / 2 ? d - g : d;
}

/// Intensity of `shape` at integer offset (dx, dy) from its centre.
inline double shape_value(Shape shape, double dx, double dy, double g) {
  switch (shape) {
    case Shape::Blob: {
      const double s = g / 8.0;
      return std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
    }
    case Shape::HBar:
      return (std::abs(dy) <= 1.0 && std::abs(dx) <= g / 4.0) ? 1.0 : 0.0;
    case Shape::VBar:
      return (std::abs(dx) <= 1.0 && std::abs(dy) <= g / 4.0) ? 1.0 : 0.0;
    case Shape::Ring: {
      const double r = std::sqrt(dx * dx + dy * dy);
      const double r0 = g / 5.0;
      return std::exp(-(r - r0) * (r - r0) / (2.0 * 0.6 * 0.6));
    }
  }
  return 0.0;
}

inline void render_integer(Shape shape, long cx, long cy, std::size_t g, double weight, Frame& out) {
  const auto gl = static_cast<long>(g);
  for (long y = 0; y < gl; ++y) {
    for (long x = 0; x < gl; ++x) {
      const auto dx = static_cast<double>(wrap_offset(x, cx, gl));
      const auto dy = static_cast<double>(wrap_offset(y, cy, gl));
      out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) +=
          weight * shape_value(shape, dx, dy, static_cast<double>(g));
    }
  }
}

}  // namespace synth_detail

/// Render a shape centred at (cx, cy); sub-pixel centres blend the four
/// surrounding integer renders bilinearly.
inline Frame render_shape(Shape shape, double cx, double cy, std::size_t g) {
  Frame f(g, g, 0.0);
  const double fx = std::floor(cx), fy = std::floor(cy);
  const double ax = cx - fx, ay = cy - fy;
  const auto ix = static_cast<long>(fx), iy = static_cast<long>(fy);
  const std::array<std::pair<std::pair<long, long>, double>, 4> taps{{{{ix, iy}, (1 - ax) * (1 - ay)},
                                                                      {{ix + 1, iy}, ax * (1 - ay)},
                                                                      {{ix, iy + 1}, (1 - ax) * ay},
                                                                      {{ix + 1, iy + 1}, ax * ay}}};
  for (const auto& [pos, w] : taps) {
    if (w > 0.0) synth_detail::render_integer(shape, pos.first, pos.second, g, w, f);
  }
  return f;
}

inline void add_noise(Frame& f, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  for (double& p : f.pixels) p = std::clamp(p + sigma * rng.normal(), 0.0, 1.0);
}

struct ClipTruth {
  Shape shape;
  std::vector<Shape> tiles;  // scene clips: shape of every tile
  std::vector<std::pair<double, double>> centres;
  std::vector<Velocity> steps;  // displacement from frame t to t+1
};

namespace synth_detail {

inline Clip make_clip(std::size_t index) {
  char id[32];
  std::snprintf(id, sizeof id, "clip%04zu", index);
  return Clip{id, {}, 1.0};
}

/// Panning view over a (tiles*G) x G torus; `centres` records the view origin.
inline std::pair<Clip, ClipTruth> gen_scene_clip(const SynthConfig& cfg, Rng& rng, std::size_t index) {
  const auto g = static_cast<long>(cfg.grid);
  const long wx = g * static_cast<long>(cfg.scene_tiles);
  struct Object {
    Shape shape;
    long x, y;
  };
  std::vector<Object> objects;
  ClipTruth truth;
  for (std::size_t i = 0; i < cfg.scene_tiles; ++i) {
    const auto shape = static_cast<Shape>(rng.below(cfg.num_shapes));
    const long x = static_cast<long>(i) * g + g / 2 + static_cast<long>(rng.below(5)) - 2;
    const long y = g / 2 + static_cast<long>(rng.below(5)) - 2;
    objects.push_back({shape, x, y});
    truth.tiles.push_back(shape);
  }
  truth.shape = truth.tiles.front();
  long ox = static_cast<long>(rng.below(static_cast<std::uint64_t>(wx)));
  long oy = static_cast<long>(rng.below(cfg.grid));
  Velocity v = cfg.velocity_set[rng.below(cfg.velocity_set.size())];

  Clip clip = make_clip(index);
  for (std::size_t t = 0; t < cfg.clip_len; ++t) {
    truth.centres.emplace_back(static_cast<double>(ox), static_cast<double>(oy));
    Frame f(cfg.grid, cfg.grid, 0.0);
    for (long y = 0; y < g; ++y) {
      for (long x = 0; x < g; ++x) {
        double value = 0.0;
        for (const auto& o : objects) {
          const long dx = wrap_offset(ox + x, o.x, wx);
          const long dy = wrap_offset(oy + y, o.y, g);
          if (std::abs(dx) < g) {
            value = std::max(value, shape_value(o.shape, static_cast<double>(dx), static_cast<double>(dy),
                                                static_cast<double>(g)));
          }
        }
        f.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = value;
      }
    }
    add_noise(f, cfg.noise_sigma, rng);
    clip.frames.push_back(std::move(f));
    if (cfg.motion_mode == MotionMode::Jerky) v = cfg.velocity_set[rng.below(cfg.velocity_set.size())];
    truth.steps.push_back(v);
    ox = ((ox + static_cast<long>(v.dx)) % wx + wx) % wx;
    oy = ((oy + static_cast<long>(v.dy)) % g + g) % g;
  }
  truth.steps.pop_back();
  return {std::move(clip), std::move(truth)};
}

}  // namespace synth_detail

/// Generate clip `index` and its ground-truth motion.
inline std::pair<Clip, ClipTruth> gen_clip(const SynthConfig& cfg, std::size_t index) {
  Rng rng(derive_seed(cfg.seed, 0x636c6970ULL + index));
  if (cfg.scene_tiles > 1) return synth_detail::gen_scene_clip(cfg, rng, index);
  const auto g = static_cast<double>(cfg.grid);
  ClipTruth truth;
  truth.shape = static_cast<Shape>(rng.below(cfg.num_shapes));
  double cx = static_cast<double>(rng.below(cfg.grid));
  double cy = static_cast<double>(rng.below(cfg.grid));
  Velocity v = cfg.velocity_set[rng.below(cfg.velocity_set.size())];

  Clip clip = synth_detail::make_clip(index);
  for (std::size_t t = 0; t < cfg.clip_len; ++t) {
    truth.centres.emplace_back(cx, cy);
    Frame f = render_shape(truth.shape, cx, cy, cfg.grid);
    add_noise(f, cfg.noise_sigma, rng);
    clip.frames.push_back(std::move(f));
    if (cfg.motion_mode == MotionMode::Jerky) v = cfg.velocity_set[rng.below(cfg.velocity_set.size())];
    truth.steps.push_back(v);
    cx = std::fmod(cx + v.dx + g, g);
    cy = std::fmod(cy + v.dy + g, g);
  }
  truth.steps.pop_back();
  return {std::move(clip), std::move(truth)};
}

inline UnlabeledSet gen_unlabeled(const SynthConfig& cfg) {
  cfg.validate();
  UnlabeledSet u;
  for (std::size_t i = 0; i < cfg.num_clips; ++i) u.clips.push_back(gen_clip(cfg, i).first);
  return u;
}

inline std::pair<double, double> label_position(const SynthConfig& cfg, Rng& rng) {
  if (2 * cfg.label_jitter >= cfg.grid) {
    const auto x = static_cast<double>(rng.below(cfg.grid));
    return {x, static_cast<double>(rng.below(cfg.grid))};
  }
  const auto span = 2 * cfg.label_jitter + 1;
  const auto centre = static_cast<double>(cfg.grid / 2) - static_cast<double>(cfg.label_jitter);
  const auto x = centre + static_cast<double>(rng.below(span));
  return {x, centre + static_cast<double>(rng.below(span))};
}

/// `per_class` single frames of every shape class at jittered integer
/// positions, interleaved by class; label = shape index.
inline LabeledSet gen_labeled(const SynthConfig& cfg, std::size_t per_class) {
  cfg.validate();
  if (per_class < 1) throw ConfigError("per_class must be >= 1");
  Rng rng(derive_seed(cfg.seed, 0x6c61626cULL));
  LabeledSet s;
  s.num_classes = cfg.num_shapes;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t c = 0; c < cfg.num_shapes; ++c) {
      const auto [cx, cy] = label_position(cfg, rng);
      Frame f = render_shape(static_cast<Shape>(c), cx, cy, cfg.grid);
      add_noise(f, cfg.noise_sigma, rng);
      s.images.push_back(std::move(f));
      s.labels.push_back(c);
    }
  }
  return s;
}

}  // namespace ssfa
