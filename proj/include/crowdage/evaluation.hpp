#pragma once
// Evaluation protocol: confidence-thresholded detections, greedy matching at
// IOU 0.5, and age/gender metrics over matched faces.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "crowdage/distributions.hpp"
#include "crowdage/geometry.hpp"
#include "crowdage/model.hpp"
#include "crowdage/scene.hpp"
#include "crowdage/synth_data.hpp"

namespace crowdage {

struct EvalOptions {
  int k = 20;
  double conf_threshold = 0.2;
  bool largest_face = false;  // single-face protocol
  double match_iou = 0.5;
};

struct GroupStats {
  int count = 0;          // labelled faces whose true age falls in the group
  double age_accuracy = 0;
  double one_off_accuracy = 0;
  int gender_count = 0;
  double gender_accuracy = 0;
};

struct EvalReport {
  double mae = 0;
  double group_accuracy = 0;    // %
  double one_off_accuracy = 0;  // %
  double gender_accuracy = 0;   // %
  std::array<GroupStats, kNumAgeGroups> per_group{};
  double recall = 0;
  double precision = 0;
  int n_scenes = 0;
  int n_faces = 0;
  int n_detections = 0;
  int n_matched = 0;
  int n_age = 0;
  int n_gender = 0;
};

struct PredictedFace {
  Detection detection;
  double age = 0;
  Gender gender = Gender::female;
};

/// Greedy assignment: detections in confidence order each take the unmatched
/// ground truth with the highest IOU, provided it reaches `min_iou`.
inline std::vector<int> greedy_match(std::span<const PredictedFace> preds, std::span<const FaceAnnotation> truth,
                                     double min_iou) {
  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].detection.confidence > preds[b].detection.confidence;
  });
  std::vector<int> match(preds.size(), -1);
  std::vector<bool> taken(truth.size(), false);
  for (auto i : order) {
    int best = -1;
    double best_iou = min_iou;
    for (std::size_t g = 0; g < truth.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(preds[i].detection.box, truth[g].box);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      match[i] = best;
    }
  }
  return match;
}

/// Metrics over already-selected predictions (one list per scene).
/// Multi-face protocol: age/gender are scored on faces matched at
/// `match_iou`. Largest-face protocol: the single prediction is scored
/// against the scene's first face; matching only affects detection recall.
inline EvalReport score_predictions(std::span<const std::vector<PredictedFace>> preds,
                                    std::span<const Scene> scenes, const EvalOptions& opt) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: empty manifest");
  if (preds.size() != scenes.size()) throw std::invalid_argument("evaluate: prediction/scene count mismatch");
  EvalReport r;
  r.n_scenes = static_cast<int>(scenes.size());
  double abs_err = 0;
  int group_ok = 0, one_off_ok = 0, gender_ok = 0;
  std::array<int, kNumAgeGroups> g_age{}, g_one{}, g_gen{};

  auto score = [&](const PredictedFace& p, const FaceAnnotation& f) {
    if (f.age) {
      ++r.n_age;
      abs_err += std::abs(p.age - *f.age);
      const int tg = to_age_group(*f.age).index;
      const int pg = to_age_group(std::max(0.0, p.age)).index;
      auto& gs = r.per_group[tg];
      ++gs.count;
      if (pg == tg) {
        ++group_ok;
        ++g_age[tg];
      }
      if (std::abs(pg - tg) <= 1) {
        ++one_off_ok;
        ++g_one[tg];
      }
      if (f.gender) {
        ++gs.gender_count;
        if (p.gender == *f.gender) ++g_gen[tg];
      }
    }
    if (f.gender) {
      ++r.n_gender;
      if (p.gender == *f.gender) ++gender_ok;
    }
  };

  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& truth = scenes[s].faces;
    r.n_faces += static_cast<int>(truth.size());
    r.n_detections += static_cast<int>(preds[s].size());
    const auto match = greedy_match(preds[s], truth, opt.match_iou);
    for (int m : match) r.n_matched += m >= 0;
    if (opt.largest_face) {
      if (!preds[s].empty() && !truth.empty()) score(preds[s].front(), truth.front());
    } else {
      for (std::size_t i = 0; i < match.size(); ++i)
        if (match[i] >= 0) score(preds[s][i], truth[match[i]]);
    }
  }
  auto pct = [](int num, int den) { return den > 0 ? 100.0 * num / den : 0.0; };
  r.mae = r.n_age > 0 ? abs_err / r.n_age : 0.0;
  r.group_accuracy = pct(group_ok, r.n_age);
  r.one_off_accuracy = pct(one_off_ok, r.n_age);
  r.gender_accuracy = pct(gender_ok, r.n_gender);
  for (int g = 0; g < kNumAgeGroups; ++g) {
    auto& gs = r.per_group[g];
    gs.age_accuracy = pct(g_age[g], gs.count);
    gs.one_off_accuracy = pct(g_one[g], gs.count);
    gs.gender_accuracy = pct(g_gen[g], gs.gender_count);
  }
  r.recall = r.n_faces > 0 ? static_cast<double>(r.n_matched) / r.n_faces : 0.0;
  r.precision = r.n_detections > 0 ? static_cast<double>(r.n_matched) / r.n_detections : 0.0;
  return r;
}

template <class T>
std::vector<PredictedFace> predict_scene(const Model<T>& m, const Scene& scene, const EvalOptions& opt) {
  const auto faces = infer_faces(m, scene.image, opt.k, opt.conf_threshold,
                                 opt.largest_face ? FaceSelection::largest : FaceSelection::above_threshold);
  std::vector<PredictedFace> out;
  for (const auto& f : faces) out.push_back({f.detection, f.expected_age, f.gender.argmax()});
  return out;
}

template <class T>
EvalReport evaluate(const Model<T>& m, const DatasetManifest& manifest, const EvalOptions& opt) {
  if (manifest.scenes.empty()) throw std::invalid_argument("evaluate: empty manifest");
  for (const auto& s : manifest.scenes)
    if (s.width() != m.config.image_side || s.height() != m.config.image_side)
      throw std::invalid_argument("evaluate: scene size " + std::to_string(s.width()) + "x" +
                                  std::to_string(s.height()) + " does not match the model's image_side " +
                                  std::to_string(m.config.image_side));
  std::vector<std::vector<PredictedFace>> preds;
  preds.reserve(manifest.scenes.size());
  for (const auto& s : manifest.scenes) preds.push_back(predict_scene(m, s, opt));
  return score_predictions(preds, manifest.scenes, opt);
}

}  // namespace crowdage
