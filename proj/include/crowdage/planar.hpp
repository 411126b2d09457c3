#pragma once
// Channel-major (C x H x W) arrays and the bilinear sampling plans shared by
// image resizing, face cropping and ROI feature sampling.

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace crowdage {

template <class T>
struct Planar {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Planar() = default;
  Planar(int c, int h, int w, T fill = T(0))
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }
  T& at(int c, int y, int x) { return data[index(c, y, x)]; }
  const T& at(int c, int y, int x) const { return data[index(c, y, x)]; }

  bool operator==(const Planar&) const = default;
};

using Image = Planar<float>;

/// Precomputed bilinear gather: for every output location the four source
/// taps and their weights. Independent of channel count, so one plan serves
/// every channel of the source.
struct SamplePlan {
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<std::array<int, 4>> taps;
  std::vector<std::array<double, 4>> weights;
};

/// Maps the continuous region [x1,x2) x [y1,y2) of a grid with unit cells
/// onto an out_h x out_w grid. Sample centers sit at the middle of each
/// output cell; coordinates are clamped to the valid source extent so the
/// result is a convex combination of source values.
inline SamplePlan make_sample_plan(int in_h, int in_w, double x1, double y1, double x2, double y2,
                                   int out_h, int out_w) {
  if (in_h <= 0 || in_w <= 0 || out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("make_sample_plan: empty grid");
  SamplePlan plan{in_h, in_w, out_h, out_w, {}, {}};
  const std::size_t n = static_cast<std::size_t>(out_h) * out_w;
  plan.taps.resize(n);
  plan.weights.resize(n);
  const double step_x = (x2 - x1) / out_w;
  const double step_y = (y2 - y1) / out_h;
  for (int i = 0; i < out_h; ++i) {
    double sy = y1 + (i + 0.5) * step_y - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(in_h - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1i = std::min(y0 + 1, in_h - 1);
    const double fy = sy - y0;
    for (int j = 0; j < out_w; ++j) {
      double sx = x1 + (j + 0.5) * step_x - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(in_w - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1i = std::min(x0 + 1, in_w - 1);
      const double fx = sx - x0;
      const std::size_t o = static_cast<std::size_t>(i) * out_w + j;
      plan.taps[o] = {y0 * in_w + x0, y0 * in_w + x1i, y1i * in_w + x0, y1i * in_w + x1i};
      plan.weights[o] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    }
  }
  return plan;
}

template <class T>
Planar<T> apply_plan(const Planar<T>& src, const SamplePlan& plan) {
  assert(src.height == plan.in_h && src.width == plan.in_w);
  Planar<T> out(src.channels, plan.out_h, plan.out_w);
  const std::size_t in_plane = src.plane();
  const std::size_t out_plane = out.plane();
  for (int c = 0; c < src.channels; ++c) {
    const T* s = src.data.data() + c * in_plane;
    T* d = out.data.data() + c * out_plane;
    for (std::size_t o = 0; o < out_plane; ++o) {
      const auto& t = plan.taps[o];
      const auto& w = plan.weights[o];
      T acc = T(0);
      for (int q = 0; q < 4; ++q)
        if (w[q] != 0.0) acc += static_cast<T>(w[q]) * s[t[q]];
      d[o] = acc;
    }
  }
  return out;
}

template <class T>
Planar<T> resize_bilinear(const Planar<T>& src, int out_h, int out_w) {
  return apply_plan(src, make_sample_plan(src.height, src.width, 0.0, 0.0, src.width, src.height,
                                          out_h, out_w));
}

}  // namespace crowdage
