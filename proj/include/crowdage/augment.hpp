#pragma once
// Tiling augmentation (pseudo multi-person scenes built from single-face
// scenes), detection-only scene mixing, and the default photometric and
// geometric augmentation stack.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "crowdage/geometry.hpp"
#include "crowdage/planar.hpp"
#include "crowdage/scene.hpp"
#include "crowdage/synth_data.hpp"

namespace crowdage {

struct TilingConfig {
  std::vector<int> allowed_tile_counts{1, 4, 9};
  int max_distinct_sources = 4;
  double detection_only_mix = 0.25;

  void validate() const {
    if (allowed_tile_counts.empty()) throw std::invalid_argument("TilingConfig: no tile counts");
    for (int n : allowed_tile_counts) {
      const int g = static_cast<int>(std::lround(std::sqrt(n)));
      if (n < 1 || g * g != n) throw std::invalid_argument("TilingConfig: tile counts must be perfect squares");
    }
    if (max_distinct_sources < 1) throw std::invalid_argument("TilingConfig: max_distinct_sources must be >= 1");
    if (detection_only_mix < 0 || detection_only_mix > 1)
      throw std::invalid_argument("TilingConfig: detection_only_mix must be a probability");
  }
  bool operator==(const TilingConfig&) const = default;
};

/// Bilinear read at continuous index coordinates, clamped to the border.
inline float bilinear_at(const Image& img, int c, double sx, double sy) {
  sx = std::clamp(sx, 0.0, static_cast<double>(img.width - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = sx - x0, fy = sy - y0;
  return static_cast<float>((1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                            fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1)));
}

inline int tile_grid_side(int n_tiles) {
  const int g = static_cast<int>(std::lround(std::sqrt(std::max(n_tiles, 0))));
  if (n_tiles < 1 || g * g != n_tiles) throw std::invalid_argument("tile count must be a positive perfect square");
  return g;
}

/// Splits a canvas into a sqrt(n) x sqrt(n) grid of equal cells and stretches
/// one source into each. Cells are visited in a random order and sources are
/// assigned cyclically, so every source appears when n >= |sources|.
inline Scene tile_scenes(std::span<const Scene> sources, int n_tiles, int canvas_side, std::mt19937_64& rng,
                         const TilingConfig& cfg = {}) {
  const int g = tile_grid_side(n_tiles);
  if (sources.empty() || static_cast<int>(sources.size()) > cfg.max_distinct_sources)
    throw std::invalid_argument("tile_scenes: need between 1 and max_distinct_sources sources");
  const double cell = static_cast<double>(canvas_side) / g;

  std::vector<int> order(n_tiles);
  for (int i = 0; i < n_tiles; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> assignment(n_tiles);
  for (int i = 0; i < n_tiles; ++i) assignment[order[i]] = i % static_cast<int>(sources.size());

  Scene out;
  out.source_dataset = "tiled";
  out.image = Image(3, canvas_side, canvas_side);
  for (int y = 0; y < canvas_side; ++y) {
    const int cy = std::min(g - 1, static_cast<int>((y + 0.5) / cell));
    for (int x = 0; x < canvas_side; ++x) {
      const int cx = std::min(g - 1, static_cast<int>((x + 0.5) / cell));
      const Scene& src = sources[assignment[cy * g + cx]];
      const double sx = ((x + 0.5) - cx * cell) / cell * src.width() - 0.5;
      const double sy = ((y + 0.5) - cy * cell) / cell * src.height() - 0.5;
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = bilinear_at(src.image, c, sx, sy);
    }
  }
  for (int t = 0; t < n_tiles; ++t) {
    const int cy = t / g, cx = t % g;
    const Scene& src = sources[assignment[t]];
    const double kx = cell / src.width(), ky = cell / src.height();
    for (FaceAnnotation f : src.faces) {
      f.box = {f.box.x1 * kx + cx * cell, f.box.y1 * ky + cy * cell, f.box.x2 * kx + cx * cell,
               f.box.y2 * ky + cy * cell};
      out.faces.push_back(f);
    }
  }
  return out;
}

/// With probability `prob`, replaces the scene by a random detection-only
/// scene whose faces carry no age or gender labels.
inline Scene mix_detection_only(Scene base, const DatasetManifest& detection_only, double prob,
                                std::mt19937_64& rng) {
  if (prob <= 0 || detection_only.scenes.empty()) return base;
  std::bernoulli_distribution take(prob);
  if (!take(rng)) return base;
  const int n = static_cast<int>(detection_only.scenes.size());
  Scene s = strip_labels(detection_only.scenes[std::uniform_int_distribution<int>(0, n - 1)(rng)]);
  return s;
}

// ---------------------------------------------------------------------------
// Default augmentation
// ---------------------------------------------------------------------------

struct AugmentToggles {
  bool flip = false;
  bool scale = false;
  bool crop = false;
  bool rotate = false;
  bool color = false;
  bool blur = false;

  double scale_min = 0.85, scale_max = 1.15;
  double crop_fraction = 0.9;
  double max_rotation_deg = 10.0;
  double brightness = 0.08;
  double contrast = 0.15;
  double blur_probability = 0.3;

  bool any() const { return flip || scale || crop || rotate || color || blur; }
  bool operator==(const AugmentToggles&) const = default;
};

/// Row-major 2x3 map from source to destination continuous coordinates.
struct Affine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  std::array<double, 2> apply(double x, double y) const {
    return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
  }
  /// this after other
  Affine after(const Affine& o) const {
    const auto& a = m;
    const auto& b = o.m;
    return {{a[0] * b[0] + a[1] * b[3], a[0] * b[1] + a[1] * b[4], a[0] * b[2] + a[1] * b[5] + a[2],
             a[3] * b[0] + a[4] * b[3], a[3] * b[1] + a[4] * b[4], a[3] * b[2] + a[4] * b[5] + a[5]}};
  }
  Affine inverse() const {
    const double det = m[0] * m[4] - m[1] * m[3];
    const double i0 = m[4] / det, i1 = -m[1] / det, i3 = -m[3] / det, i4 = m[0] / det;
    return {{i0, i1, -(i0 * m[2] + i1 * m[5]), i3, i4, -(i3 * m[2] + i4 * m[5])}};
  }
  bool is_identity() const { return m == std::array<double, 6>{1, 0, 0, 0, 1, 0}; }
};

/// Resamples the scene through `fwd` keeping its size; boxes are mapped by
/// their corners, clipped, and dropped when nothing remains inside.
inline Scene warp_scene(const Scene& s, const Affine& fwd) {
  if (fwd.is_identity()) return s;
  const Affine inv = fwd.inverse();
  Scene out = s;
  for (int y = 0; y < s.height(); ++y)
    for (int x = 0; x < s.width(); ++x) {
      const auto p = inv.apply(x + 0.5, y + 0.5);
      for (int c = 0; c < s.image.channels; ++c) out.image.at(c, y, x) = bilinear_at(s.image, c, p[0] - 0.5, p[1] - 0.5);
    }
  out.faces.clear();
  for (const auto& f : s.faces) {
    double x1 = 1e300, y1 = 1e300, x2 = -1e300, y2 = -1e300;
    for (auto [cx, cy] : {std::pair{f.box.x1, f.box.y1}, std::pair{f.box.x2, f.box.y1},
                          std::pair{f.box.x1, f.box.y2}, std::pair{f.box.x2, f.box.y2}}) {
      const auto p = fwd.apply(cx, cy);
      x1 = std::min(x1, p[0]);
      x2 = std::max(x2, p[0]);
      y1 = std::min(y1, p[1]);
      y2 = std::max(y2, p[1]);
    }
    const BBox b = clip_box({x1, y1, x2, y2}, s.width(), s.height());
    if (b.width() < 1 || b.height() < 1) continue;
    FaceAnnotation g = f;
    g.box = b;
    out.faces.push_back(g);
  }
  return out;
}

inline Scene default_augment(const Scene& scene, std::mt19937_64& rng, const AugmentToggles& t) {
  if (!t.any()) return scene;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double W = scene.width(), H = scene.height();
  const double cx = W / 2, cy = H / 2;
  Affine fwd;
  if (t.flip && u(rng) < 0.5) fwd = Affine{{-1, 0, W, 0, 1, 0}}.after(fwd);
  if (t.scale) {
    const double s = t.scale_min + (t.scale_max - t.scale_min) * u(rng);
    fwd = Affine{{s, 0, cx - s * cx, 0, s, cy - s * cy}}.after(fwd);
  }
  if (t.rotate) {
    const double a = (2 * u(rng) - 1) * t.max_rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    fwd = Affine{{c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy}}.after(fwd);
  }
  if (t.crop) {
    const double f = t.crop_fraction;
    const double ox = u(rng) * W * (1 - f), oy = u(rng) * H * (1 - f);
    fwd = Affine{{1 / f, 0, -ox / f, 0, 1 / f, -oy / f}}.after(fwd);
  }
  Scene out = warp_scene(scene, fwd);
  if (t.color) {
    for (int c = 0; c < 3; ++c) {
      const double gain = 1 + (2 * u(rng) - 1) * t.contrast;
      const double bias = (2 * u(rng) - 1) * t.brightness;
      for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x) {
          float& v = out.image.at(c, y, x);
          v = static_cast<float>(std::clamp((v - 0.5) * gain + 0.5 + bias, 0.0, 1.0));
        }
    }
  }
  if (t.blur && u(rng) < t.blur_probability) {
    const Image src = out.image;
    constexpr double k[3] = {0.25, 0.5, 0.25};
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x) {
          double acc = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = std::clamp(y + dy, 0, out.height() - 1);
              const int xx = std::clamp(x + dx, 0, out.width() - 1);
              acc += k[dy + 1] * k[dx + 1] * src.at(c, yy, xx);
            }
          out.image.at(c, y, x) = static_cast<float>(acc);
        }
  }
  return out;
}

}  // namespace crowdage
