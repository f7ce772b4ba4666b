#pragma once

// Clips, the synthetic moving-shapes generator and clip transforms.
// Frames are float tensors of dims [1, 3, H, W] with values in [0, 1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dmvfn/random.hpp"
#include "dmvfn/tensor.hpp"

namespace dmvfn {

using Frame = Tensor<float>;

struct ClipMeta {
  std::string subset;        // free-form key (manifest tag or motion bin)
  std::string motion_bin;    // "slow" | "medium" | "fast" | "" when unknown
  double max_speed = -1.0;   // pixels per frame, -1 when unknown
  int interval = 1;          // frame stride used to build the record
  std::string source;        // directory or generator description
};

struct ClipRecord {
  std::vector<Frame> frames;
  ClipMeta meta;

  std::int64_t height() const { return frames.at(0).dim(2); }
  std::int64_t width() const { return frames.at(0).dim(3); }
};

inline void validate_clip(const ClipRecord& clip, std::size_t min_frames = 1) {
  if (clip.frames.size() < min_frames)
    throw DataError("clip '" + clip.meta.source + "' has " + std::to_string(clip.frames.size()) +
                    " frames, need >= " + std::to_string(min_frames));
  for (const auto& f : clip.frames)
    if (f.dims() != clip.frames[0].dims())
      throw DataError("clip '" + clip.meta.source + "' mixes frame dims " + shape_str(f.dims()) + " and " +
                      shape_str(clip.frames[0].dims()));
}

inline std::string motion_bin_for(double speed) {
  if (speed <= 2.0) return "slow";
  if (speed >= 4.0) return "fast";
  return "medium";
}

enum class ShapeKind { rectangle, disk };

/// One moving shape. Rectangles span [x, x + w) x [y, y + h); disks are
/// centred at (x, y) with radius w / 2.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  double x = 0, y = 0, w = 8, h = 8;
  double vx = 0, vy = 0;
  std::array<float, 3> color{1.f, 1.f, 1.f};
};

struct SynthConfig {
  std::int64_t height = 64, width = 64;
  int min_shapes = 2, max_shapes = 4;
  bool rectangles = true, disks = true;
  double min_size = 8, max_size = 20;
  double min_speed = 0.0, max_speed = 6.0;
  float min_intensity = 0.1f, max_intensity = 0.9f;
  std::string background = "gradient";  // flat | gradient
  int frames = 3;
  std::uint64_t seed = 0;
  // When set, replaces the random shapes (background is still drawn).
  std::optional<std::vector<ShapeSpec>> shapes;

  void validate() const {
    if (height < 2 || width < 2) throw ConfigError("synthetic canvas must be at least 2x2");
    if (frames < 1) throw ConfigError("synthetic clips need >= 1 frame");
    if (min_shapes < 0 || max_shapes < min_shapes) throw ConfigError("invalid shape count range");
    if (!rectangles && !disks && !shapes) throw ConfigError("no shape kinds enabled");
    if (min_size <= 0 || max_size < min_size) throw ConfigError("invalid shape size range");
    if (max_size > static_cast<double>(std::min(height, width)))
      throw ConfigError("shapes larger than the canvas (max_size " + std::to_string(max_size) + ")");
    if (min_speed < 0 || max_speed < min_speed) throw ConfigError("invalid speed range");
    if (max_speed > static_cast<double>(std::min(height, width)) / 4.0)
      throw ConfigError("max_speed exceeds canvas / 4 pixels per frame");
    if (background != "flat" && background != "gradient")
      throw ConfigError("background must be flat or gradient, got '" + background + "'");
    if (shapes)
      for (const auto& s : *shapes)
        if (s.w > static_cast<double>(width) || s.h > static_cast<double>(height))
          throw ConfigError("shape larger than the canvas");
  }
};

namespace detail {

inline double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// Fraction of pixel (px, py) covered by the shape at the given position.
inline double coverage(const ShapeSpec& s, double x, double y, std::int64_t px, std::int64_t py) {
  if (s.kind == ShapeKind::rectangle) {
    return overlap(x, x + s.w, static_cast<double>(px), px + 1.0) *
           overlap(y, y + s.h, static_cast<double>(py), py + 1.0);
  }
  const double r = s.w / 2.0;
  const double dx = px + 0.5 - x, dy = py + 0.5 - y;
  const double d = std::sqrt(dx * dx + dy * dy);
  if (d <= r - 0.75) return 1.0;
  if (d >= r + 0.75) return 0.0;
  int inside = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const double sx = px + (i + 0.5) / 4.0 - x, sy = py + (j + 0.5) / 4.0 - y;
      inside += (sx * sx + sy * sy <= r * r) ? 1 : 0;
    }
  return inside / 16.0;
}

// Keeps the shape inside the canvas.
inline void clamp_position(const ShapeSpec& s, double& x, double& y, std::int64_t H, std::int64_t W) {
  if (s.kind == ShapeKind::rectangle) {
    x = std::clamp(x, 0.0, static_cast<double>(W) - s.w);
    y = std::clamp(y, 0.0, static_cast<double>(H) - s.h);
  } else {
    const double r = s.w / 2.0;
    x = std::clamp(x, r, static_cast<double>(W) - r);
    y = std::clamp(y, r, static_cast<double>(H) - r);
  }
}

}  // namespace detail

/// Renders a clip of shapes translating at constant velocity; positions are
/// clamped so shapes stay on the canvas. Later shapes occlude earlier ones.
inline ClipRecord render_clip(const SynthConfig& cfg, const std::vector<ShapeSpec>& shapes,
                              const std::array<float, 3>& bg_a, const std::array<float, 3>& bg_b) {
  const auto H = cfg.height, W = cfg.width;
  ClipRecord clip;
  double max_speed = 0.0;
  for (const auto& s : shapes) max_speed = std::max(max_speed, std::hypot(s.vx, s.vy));
  clip.meta.max_speed = max_speed;
  clip.meta.motion_bin = motion_bin_for(max_speed);
  clip.meta.subset = clip.meta.motion_bin;
  clip.meta.source = "synthetic";
  for (int j = 0; j < cfg.frames; ++j) {
    Frame f(Shape{1, 3, H, W});
    auto v = f.mutable_values();
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const float t = cfg.background == "gradient"
                            ? static_cast<float>((x + y) / static_cast<double>(std::max<std::int64_t>(1, H + W - 2)))
                            : 0.f;
        for (int c = 0; c < 3; ++c) v[(c * H + y) * W + x] = bg_a[c] * (1.f - t) + bg_b[c] * t;
      }
    for (const auto& s : shapes) {
      double sx = s.x + j * s.vx, sy = s.y + j * s.vy;
      detail::clamp_position(s, sx, sy, H, W);
      const double ext = s.kind == ShapeKind::rectangle ? std::max(s.w, s.h) : s.w / 2.0 + 1.0;
      const double ox = s.kind == ShapeKind::rectangle ? sx : sx - ext;
      const double oy = s.kind == ShapeKind::rectangle ? sy : sy - ext;
      const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(ox)) - 1);
      const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(oy)) - 1);
      const auto x1 = std::min<std::int64_t>(W - 1, static_cast<std::int64_t>(std::ceil(ox + 2 * ext)) + 1);
      const auto y1 = std::min<std::int64_t>(H - 1, static_cast<std::int64_t>(std::ceil(oy + 2 * ext)) + 1);
      for (auto y = y0; y <= y1; ++y)
        for (auto x = x0; x <= x1; ++x) {
          const auto cov = static_cast<float>(detail::coverage(s, sx, sy, x, y));
          if (cov <= 0.f) continue;
          for (int c = 0; c < 3; ++c) {
            float& p = v[(c * H + y) * W + x];
            p = p * (1.f - cov) + s.color[c] * cov;
          }
        }
    }
    clip.frames.push_back(std::move(f));
  }
  return clip;
}

/// Draws one random clip from `rng`.
inline ClipRecord random_clip(const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  auto color = [&] {
    return std::array<float, 3>{static_cast<float>(rng.uniform(cfg.min_intensity, cfg.max_intensity)),
                                static_cast<float>(rng.uniform(cfg.min_intensity, cfg.max_intensity)),
                                static_cast<float>(rng.uniform(cfg.min_intensity, cfg.max_intensity))};
  };
  const auto bg_a = color(), bg_b = color();
  std::vector<ShapeSpec> shapes;
  if (cfg.shapes) {
    shapes = *cfg.shapes;
  } else {
    const auto count = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
    for (std::int64_t i = 0; i < count; ++i) {
      ShapeSpec s;
      if (cfg.rectangles && cfg.disks)
        s.kind = rng.bernoulli(0.5) ? ShapeKind::rectangle : ShapeKind::disk;
      else
        s.kind = cfg.rectangles ? ShapeKind::rectangle : ShapeKind::disk;
      s.w = rng.uniform(cfg.min_size, cfg.max_size);
      s.h = s.kind == ShapeKind::rectangle ? rng.uniform(cfg.min_size, cfg.max_size) : s.w;
      const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
      const double angle = rng.uniform(0.0, 6.283185307179586);
      s.vx = speed * std::cos(angle);
      s.vy = speed * std::sin(angle);
      if (s.kind == ShapeKind::rectangle) {
        s.x = rng.uniform(0.0, static_cast<double>(cfg.width) - s.w);
        s.y = rng.uniform(0.0, static_cast<double>(cfg.height) - s.h);
      } else {
        s.x = rng.uniform(s.w / 2, static_cast<double>(cfg.width) - s.w / 2);
        s.y = rng.uniform(s.w / 2, static_cast<double>(cfg.height) - s.w / 2);
      }
      s.color = color();
      shapes.push_back(s);
    }
  }
  return render_clip(cfg, shapes, bg_a, cfg.background == "flat" ? bg_a : bg_b);
}

/// `count` clips determined entirely by cfg (including cfg.seed).
inline std::vector<ClipRecord> gen_moving_shapes(const SynthConfig& cfg, std::size_t count) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<ClipRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_clip(cfg, rng));
  return out;
}

/// Crops one uniformly random size x size window, the same for all frames.
inline ClipRecord sample_patch(const ClipRecord& clip, std::int64_t size, Rng& rng) {
  validate_clip(clip);
  const auto H = clip.height(), W = clip.width();
  if (size < 1 || size > std::min(H, W))
    throw DataError("patch size " + std::to_string(size) + " does not fit frames of " + std::to_string(H) + "x" +
                    std::to_string(W));
  const auto oy = rng.uniform_int(0, H - size), ox = rng.uniform_int(0, W - size);
  ClipRecord out;
  out.meta = clip.meta;
  for (const auto& f : clip.frames) {
    const auto C = f.dim(1);
    Frame crop(Shape{1, C, size, size});
    auto v = crop.mutable_values();
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x)
          v[(c * size + y) * size + x] = f.vec()[(c * H + oy + y) * W + ox + x];
    out.frames.push_back(std::move(crop));
  }
  return out;
}

/// Frames 0, interval, 2 * interval: two inputs and one target.
inline ClipRecord interval_subsample(const ClipRecord& clip, int interval) {
  if (interval < 1) throw DataError("interval must be >= 1");
  const auto need = static_cast<std::size_t>(2 * interval + 1);
  if (clip.frames.size() < need)
    throw DataError("clip '" + clip.meta.source + "' has " + std::to_string(clip.frames.size()) + " frames; interval " +
                    std::to_string(interval) + " needs " + std::to_string(need));
  ClipRecord out;
  out.meta = clip.meta;
  out.meta.interval = interval;
  if (interval == 1) {
    out.frames = clip.frames;
    return out;
  }
  for (std::size_t j = 0; j < clip.frames.size(); j += static_cast<std::size_t>(interval))
    out.frames.push_back(clip.frames[j]);
  return out;
}

/// Concatenates [1, C, H, W] frames along the batch dimension.
inline Frame stack_frames(const std::vector<Frame>& frames) {
  if (frames.empty()) throw DataError("stack_frames: no frames");
  Shape d = frames[0].dims();
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(frames[0].numel()) * frames.size());
  for (const auto& f : frames) {
    if (f.dims() != frames[0].dims())
      throw ShapeError("stack_frames: dims " + shape_str(f.dims()) + " vs " + shape_str(frames[0].dims()));
    v.insert(v.end(), f.vec().begin(), f.vec().end());
  }
  d[0] = static_cast<std::int64_t>(frames.size());
  return Frame(d, std::move(v));
}

}  // namespace dmvfn
