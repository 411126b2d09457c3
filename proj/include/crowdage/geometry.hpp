#pragma once
// Box arithmetic, matching, and the two region samplers that connect the
// detection sub-network to the age sub-network.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "crowdage/planar.hpp"

namespace crowdage {

/// Axis-aligned box in pixel coordinates, half-open on the high edges.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x1 < x2 && y1 < y2;
  }
  bool operator==(const BBox&) const = default;
};

struct Detection {
  BBox box;
  double confidence = 0;
};

struct MatchResult {
  int pred_index = 0;
  std::optional<int> matched_gt_index;
  double max_iou = 0;
  bool included = false;
};

inline double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline BBox clip_box(const BBox& b, double image_w, double image_h) {
  return {std::clamp(b.x1, 0.0, image_w), std::clamp(b.y1, 0.0, image_h),
          std::clamp(b.x2, 0.0, image_w), std::clamp(b.y2, 0.0, image_h)};
}

inline BBox scale_box(const BBox& b, double sx, double sy) {
  return {b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
}

/// Grows the box by `top_frac` of its height upward and `other_frac` of its
/// width/height on the remaining sides, then clips to the image.
inline BBox expand_with_margins(const BBox& box, double top_frac, double other_frac, double image_w,
                                double image_h) {
  if (top_frac < 0 || other_frac < 0) throw std::invalid_argument("expand_with_margins: negative margin");
  const double w = box.width();
  const double h = box.height();
  BBox out{box.x1 - other_frac * w, box.y1 - top_frac * h, box.x2 + other_frac * w,
           box.y2 + other_frac * h};
  return clip_box(out, image_w, image_h);
}

/// Nearest-integer pixel region; never collapses below one pixel.
inline BBox round_box(const BBox& b) {
  BBox r{std::round(b.x1), std::round(b.y1), std::round(b.x2), std::round(b.y2)};
  if (r.x2 <= r.x1) r.x2 = r.x1 + 1;
  if (r.y2 <= r.y1) r.y2 = r.y1 + 1;
  return r;
}

/// Per prediction: best IOU over all ground truths (lowest index on ties) and
/// whether it clears `th_iou`.
inline std::vector<MatchResult> match_predictions(std::span<const Detection> preds,
                                                  std::span<const BBox> gts, double th_iou) {
  std::vector<MatchResult> out;
  out.reserve(preds.size());
  for (std::size_t p = 0; p < preds.size(); ++p) {
    MatchResult m;
    m.pred_index = static_cast<int>(p);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(preds[p].box, gts[g]);
      if (!m.matched_gt_index || v > m.max_iou) {
        m.max_iou = v;
        m.matched_gt_index = static_cast<int>(g);
      }
    }
    m.included = m.matched_gt_index.has_value() && m.max_iou > th_iou;
    out.push_back(m);
  }
  return out;
}

/// Side of the receptive field of `n_layers` stacked stride-1 3x3 convolutions.
inline int receptive_field(int n_layers) {
  if (n_layers < 0) throw std::invalid_argument("receptive_field: negative layer count");
  return 2 * n_layers + 1;
}

inline SamplePlan crop_plan(int image_h, int image_w, const BBox& region, int out_h, int out_w) {
  const BBox r = round_box(region);
  return make_sample_plan(image_h, image_w, r.x1, r.y1, r.x2, r.y2, out_h, out_w);
}

inline SamplePlan roi_plan(int feat_h, int feat_w, const BBox& region, int out_h, int out_w) {
  return make_sample_plan(feat_h, feat_w, region.x1, region.y1, region.x2, region.y2, out_h, out_w);
}

/// Facial cropping connection: the region is snapped to whole pixels and
/// bilinearly resampled to out_h x out_w.
template <class T>
Planar<T> crop_and_resize(const Planar<T>& image, const BBox& region, int out_h, int out_w) {
  return apply_plan(image, crop_plan(image.height, image.width, region, out_h, out_w));
}

/// Intermediate feature connection: the (sub-cell) region of a feature map
/// resampled to an out_h x out_w patch.
template <class T>
Planar<T> roi_affine_sample(const Planar<T>& feature, const BBox& region, int out_h, int out_w) {
  return apply_plan(feature, roi_plan(feature.height, feature.width, region, out_h, out_w));
}

}  // namespace crowdage
