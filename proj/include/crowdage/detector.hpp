#pragma once
// Keypoint-heatmap face detector: target encoding, top-K decoding, the
// detection loss, and the encoder-decoder network with a designated branch
// feature for the intermediate feature connection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "crowdage/autograd.hpp"
#include "crowdage/geometry.hpp"
#include "crowdage/loss_weights.hpp"
#include "crowdage/nn.hpp"
#include "crowdage/planar.hpp"
#include "crowdage/scene.hpp"

namespace crowdage {

inline constexpr int kDetectorStride = 4;
inline constexpr double kFocalAlpha = 2.0;
inline constexpr double kFocalBeta = 4.0;
inline constexpr double kHeatmapClamp = 1e-4;
inline constexpr double kGaussianMinOverlap = 0.7;

struct KeypointTargets {
  Planar<float> heatmap;     // 1 x h x w
  Planar<float> size_map;    // 2 x h x w, box width/height in input pixels
  Planar<float> offset_map;  // 2 x h x w, sub-cell offset of the center
  std::vector<std::uint8_t> center_mask;  // h x w
  int num_faces = 0;

  int height() const { return heatmap.height; }
  int width() const { return heatmap.width; }
};

template <class T>
struct DetectorOutput {
  Planar<T> heatmap;  // post-sigmoid
  Planar<T> size_map;
  Planar<T> offset_map;
};

/// Gaussian radius (in output cells) such that a box displaced by it still
/// overlaps the original with IOU >= min_overlap.
inline double gaussian_radius(double height, double width, double min_overlap = kGaussianMinOverlap) {
  const double b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * c1)) / 2;
  const double a2 = 4, b2 = 2 * (height + width);
  const double c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 4 * a2 * c2)) / 2;
  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::min({r1, r2, r3});
}

/// Boxes are given in image pixels of an image_w x image_h picture that is
/// resized to input_side x input_side before detection.
inline KeypointTargets encode_targets(std::span<const BBox> boxes, int image_w, int image_h,
                                      int input_side, int stride = kDetectorStride) {
  if (input_side % stride != 0) throw std::invalid_argument("encode_targets: input_side not divisible by stride");
  const int h = input_side / stride, w = input_side / stride;
  KeypointTargets t{Planar<float>(1, h, w), Planar<float>(2, h, w), Planar<float>(2, h, w),
                    std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0), 0};
  const double sx = static_cast<double>(input_side) / image_w;
  const double sy = static_cast<double>(input_side) / image_h;
  for (const BBox& b0 : boxes) {
    const BBox b = scale_box(b0, sx, sy);
    const double cx = b.center_x() / stride, cy = b.center_y() / stride;
    const int ix = std::clamp(static_cast<int>(std::floor(cx)), 0, w - 1);
    const int iy = std::clamp(static_cast<int>(std::floor(cy)), 0, h - 1);
    const double radius = std::max(0.0, std::floor(gaussian_radius(b.height() / stride, b.width() / stride)));
    const double sigma = (2 * radius + 1) / 6.0;
    const int r = static_cast<int>(radius);
    for (int y = std::max(0, iy - r); y <= std::min(h - 1, iy + r); ++y)
      for (int x = std::max(0, ix - r); x <= std::min(w - 1, ix + r); ++x) {
        const double d2 = (x - ix) * (x - ix) + (y - iy) * (y - iy);
        const float v = static_cast<float>(std::exp(-d2 / (2 * sigma * sigma)));
        float& cell = t.heatmap.at(0, y, x);
        cell = std::max(cell, v);
      }
    t.heatmap.at(0, iy, ix) = 1.0f;
    t.size_map.at(0, iy, ix) = static_cast<float>(b.width());
    t.size_map.at(1, iy, ix) = static_cast<float>(b.height());
    t.offset_map.at(0, iy, ix) = static_cast<float>(cx - ix);
    t.offset_map.at(1, iy, ix) = static_cast<float>(cy - iy);
    t.center_mask[static_cast<std::size_t>(iy) * w + ix] = 1;
  }
  t.num_faces = static_cast<int>(std::count(t.center_mask.begin(), t.center_mask.end(), 1));
  return t;
}

inline KeypointTargets encode_targets(const Scene& scene, int input_side, int stride = kDetectorStride) {
  const auto boxes = scene.boxes();
  return encode_targets(boxes, scene.width(), scene.height(), input_side, stride);
}

/// The k most confident heatmap cells that survive 3x3 max suppression,
/// as boxes in detector-input pixels sorted by confidence. When fewer than
/// k peaks exist the remaining slots are filled with the strongest
/// suppressed cells.
template <class T>
std::vector<Detection> decode_topk(const DetectorOutput<T>& out, int k, int stride = kDetectorStride) {
  if (k < 1) throw std::invalid_argument("decode_topk: k must be >= 1");
  const int h = out.heatmap.height, w = out.heatmap.width;
  const double side_w = static_cast<double>(w) * stride, side_h = static_cast<double>(h) * stride;
  std::vector<int> peaks, rest;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const T v = out.heatmap.at(0, y, x);
      bool is_peak = true;
      for (int dy = -1; dy <= 1 && is_peak; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (out.heatmap.at(0, yy, xx) > v) {
            is_peak = false;
            break;
          }
        }
      (is_peak ? peaks : rest).push_back(y * w + x);
    }
  auto by_conf = [&](int a, int b) {
    const T va = out.heatmap.data[a], vb = out.heatmap.data[b];
    return va != vb ? va > vb : a < b;
  };
  std::sort(peaks.begin(), peaks.end(), by_conf);
  std::sort(rest.begin(), rest.end(), by_conf);
  peaks.insert(peaks.end(), rest.begin(), rest.end());
  const int n = std::min<int>(k, static_cast<int>(peaks.size()));

  std::vector<Detection> dets;
  dets.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int idx = peaks[i];
    const int y = idx / w, x = idx % w;
    const double cx = (x + static_cast<double>(out.offset_map.at(0, y, x))) * stride;
    const double cy = (y + static_cast<double>(out.offset_map.at(1, y, x))) * stride;
    const double bw = std::max(1.0, static_cast<double>(out.size_map.at(0, y, x)));
    const double bh = std::max(1.0, static_cast<double>(out.size_map.at(1, y, x)));
    BBox b = clip_box({cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2}, side_w, side_h);
    if (b.x2 - b.x1 < 1) {
      b.x1 = std::clamp(b.x1, 0.0, side_w - 1);
      b.x2 = b.x1 + 1;
    }
    if (b.y2 - b.y1 < 1) {
      b.y1 = std::clamp(b.y1, 0.0, side_h - 1);
      b.y2 = b.y1 + 1;
    }
    dets.push_back({b, std::clamp(static_cast<double>(out.heatmap.data[idx]), 0.0, 1.0)});
  }
  return dets;
}

// ---------------------------------------------------------------------------
// Detection loss
// ---------------------------------------------------------------------------

/// Penalty-reduced pixelwise focal loss summed over the map (not normalised).
template <class T>
ag::Var<T> focal_loss_sum(const ag::Var<T>& heat, const Planar<float>& target) {
  if (heat.size() != target.data.size()) throw std::invalid_argument("focal_loss_sum: shape mismatch");
  const std::size_t n = heat.size();
  double total = 0;
  std::vector<T> dp(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = static_cast<double>(heat.value()[i]);
    const double p = std::clamp(raw, kHeatmapClamp, 1 - kHeatmapClamp);
    const bool clamped = p != raw;
    const double y = target.data[i];
    double l, d;
    if (y == 1.0) {
      l = -std::pow(1 - p, kFocalAlpha) * std::log(p);
      d = kFocalAlpha * std::pow(1 - p, kFocalAlpha - 1) * std::log(p) - std::pow(1 - p, kFocalAlpha) / p;
    } else {
      const double wneg = std::pow(1 - y, kFocalBeta);
      l = -wneg * std::pow(p, kFocalAlpha) * std::log(1 - p);
      d = -wneg * (kFocalAlpha * std::pow(p, kFocalAlpha - 1) * std::log(1 - p) -
                   std::pow(p, kFocalAlpha) / (1 - p));
    }
    total += l;
    dp[i] = clamped ? T(0) : static_cast<T>(d);
  }
  return ag::make_result<T>({1}, {static_cast<T>(total)}, {heat}, [dp = std::move(dp)](ag::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * dp[i];
  });
}

/// Sum of |pred - target| over both channels at the center cells.
template <class T>
ag::Var<T> masked_l1_sum(const ag::Var<T>& pred, const Planar<float>& target,
                         const std::vector<std::uint8_t>& mask) {
  const std::size_t plane = mask.size();
  if (pred.size() != 2 * plane || target.data.size() != 2 * plane)
    throw std::invalid_argument("masked_l1_sum: shape mismatch");
  double total = 0;
  std::vector<T> sign(2 * plane, T(0));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      if (!mask[i]) continue;
      const double d = static_cast<double>(pred.value()[c * plane + i]) - target.data[c * plane + i];
      total += std::abs(d);
      sign[c * plane + i] = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
    }
  return ag::make_result<T>({1}, {static_cast<T>(total)}, {pred}, [sign = std::move(sign)](ag::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * sign[i];
  });
}

template <class T>
struct DetectionLossVars {
  ag::Var<T> reg_sum, size_sum, off_sum;
  int num_faces = 0;
};

template <class T>
DetectionLossVars<T> detection_loss_sums(const ag::Var<T>& heat, const ag::Var<T>& size,
                                         const ag::Var<T>& off, const KeypointTargets& gt) {
  return {focal_loss_sum(heat, gt.heatmap), masked_l1_sum(size, gt.size_map, gt.center_mask),
          masked_l1_sum(off, gt.offset_map, gt.center_mask), gt.num_faces};
}

/// L_reg/N + lambda_size * L_size/N + lambda_off * L_off/N, with N the face
/// count over everything summed (1 when no faces).
template <class T>
ag::Var<T> combine_detection_loss(const std::vector<DetectionLossVars<T>>& parts, const LossWeights& w) {
  int n = 0;
  std::vector<ag::Var<T>> terms;
  for (const auto& p : parts) {
    n += p.num_faces;
    terms.push_back(p.reg_sum);
    terms.push_back(ag::scale(p.size_sum, static_cast<T>(w.lambda_size)));
    terms.push_back(ag::scale(p.off_sum, static_cast<T>(w.lambda_off)));
  }
  return ag::scale(ag::sum_scalars(terms), static_cast<T>(1.0 / std::max(n, 1)));
}

struct DetectionLoss {
  double l_det = 0;
  double l_reg = 0;
  double l_size = 0;
  double l_off = 0;
};

inline DetectionLoss combine_detection_components(double l_reg, double l_size, double l_off,
                                                  const LossWeights& w) {
  return {l_reg + w.lambda_size * l_size + w.lambda_off * l_off, l_reg, l_size, l_off};
}

/// L_det with its normalised components for one image.
template <class T>
DetectionLoss detection_loss(const DetectorOutput<T>& pred, const KeypointTargets& gt, const LossWeights& w) {
  auto c = [](const Planar<T>& p) { return ag::from_planar(p); };
  const auto s = detection_loss_sums<T>(c(pred.heatmap), c(pred.size_map), c(pred.offset_map), gt);
  const double n = std::max(gt.num_faces, 1);
  return combine_detection_components(static_cast<double>(s.reg_sum.item()) / n,
                                      gt.num_faces ? static_cast<double>(s.size_sum.item()) / n : 0.0,
                                      gt.num_faces ? static_cast<double>(s.off_sum.item()) / n : 0.0, w);
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct DetectorConfig {
  int input_side = 96;
  std::vector<int> widths{16, 32, 48};  // at strides 2, 4, 8
  int branch_channels = 32;             // width of the stride-4 branch feature
  int head_channels = 16;

  void validate() const {
    if (input_side <= 0 || input_side % 8 != 0)
      throw std::invalid_argument("detector input_side must be a positive multiple of 8");
    if (widths.size() != 3) throw std::invalid_argument("detector widths must have 3 entries");
    for (int v : widths)
      if (v <= 0) throw std::invalid_argument("detector widths must be positive");
    if (branch_channels <= 0 || head_channels <= 0)
      throw std::invalid_argument("detector branch/head channels must be positive");
  }
  int output_side() const { return input_side / kDetectorStride; }
  bool operator==(const DetectorConfig&) const = default;
};

template <class T>
struct DetectorVars {
  ag::Var<T> heatmap, size_map, offset_map;
  ag::Var<T> branch;  // branch_channels x h x w at stride 4
};

struct DetectorNet {
  DetectorConfig config;
  nn::Conv stem, stem2, down1, conv1, down2, conv2, top, lateral, fuse;
  nn::Conv heat1, heat2, size1, size2, off1, off2;

  template <class T>
  static DetectorNet build(nn::ParamStore<T>& store, const DetectorConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    using nn::Conv;
    DetectorNet n;
    n.config = cfg;
    const int w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2], br = cfg.branch_channels;
    const int hc = cfg.head_channels;
    n.stem = Conv::make(store, "det.stem", 3, w0, 3, 2, rng);
    n.stem2 = Conv::make(store, "det.stem2", w0, w0, 3, 1, rng);
    n.down1 = Conv::make(store, "det.down1", w0, w1, 3, 2, rng);
    n.conv1 = Conv::make(store, "det.conv1", w1, w1, 3, 1, rng);
    n.down2 = Conv::make(store, "det.down2", w1, w2, 3, 2, rng);
    n.conv2 = Conv::make(store, "det.conv2", w2, w2, 3, 1, rng);
    n.top = Conv::make(store, "det.top", w2, br, 1, 1, rng);
    n.lateral = Conv::make(store, "det.lateral", w1, br, 1, 1, rng);
    n.fuse = Conv::make(store, "det.fuse", br, br, 3, 1, rng);
    n.heat1 = Conv::make(store, "det.heat1", br, hc, 3, 1, rng);
    // Heatmap prior of ~0.1 at initialisation.
    n.heat2 = Conv::make(store, "det.heat2", hc, 1, 1, 1, rng, 0.1, -2.19);
    n.size1 = Conv::make(store, "det.size1", br, hc, 3, 1, rng);
    n.size2 = Conv::make(store, "det.size2", hc, 2, 1, 1, rng, 0.1, 1.0);
    n.off1 = Conv::make(store, "det.off1", br, hc, 3, 1, rng);
    n.off2 = Conv::make(store, "det.off2", hc, 2, 1, 1, rng, 0.1, 0.5);
    return n;
  }

  /// Size outputs are produced in units of input_side / 4 pixels.
  double size_scale() const { return config.input_side / 4.0; }

  /// `x` is the 3 x input_side x input_side image.
  template <class T>
  DetectorVars<T> forward(nn::Binding<T>& p, const ag::Var<T>& x) const {
    using ag::relu;
    auto s = relu(stem2(p, relu(stem(p, x))));
    auto d1 = relu(conv1(p, relu(down1(p, s))));
    auto d2 = relu(conv2(p, relu(down2(p, d1))));
    auto merged = relu(ag::add(ag::upsample_nearest2x(top(p, d2)), lateral(p, d1)));
    auto branch = relu(fuse(p, merged));
    DetectorVars<T> out;
    out.branch = branch;
    out.heatmap = ag::sigmoid(heat2(p, relu(heat1(p, branch))));
    out.size_map = ag::scale(size2(p, relu(size1(p, branch))), static_cast<T>(size_scale()));
    out.offset_map = off2(p, relu(off1(p, branch)));
    return out;
  }
};

template <class T>
DetectorOutput<T> to_output(const DetectorVars<T>& v) {
  return {ag::to_planar(v.heatmap), ag::to_planar(v.size_map), ag::to_planar(v.offset_map)};
}

}  // namespace crowdage
