#pragma once
// Training objective for the age/gender sub-network: mean-variance plus
// cross-entropy per face, binary cross-entropy for gender, IOU/label masking
// and normalisation by the number of unmasked faces.
//
// Two forms are provided: plain functions over probability vectors, and
// differentiable versions over pre-softmax logits used in training.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "crowdage/autograd.hpp"
#include "crowdage/distributions.hpp"
#include "crowdage/geometry.hpp"
#include "crowdage/loss_weights.hpp"
#include "crowdage/scene.hpp"

namespace crowdage {

struct MeanVarianceTerms {
  double mean = 0;
  double variance = 0;
};

inline void check_age_label(int y) {
  if (y < 0 || y >= kNumAges) throw std::invalid_argument("age label outside 0..100");
}

/// L_mean = (m - y)^2 / 2 and L_var = sum_i p_i (i - m)^2 with m the
/// distribution mean.
inline MeanVarianceTerms mean_variance_loss(const AgeDistribution& p, int y) {
  check_age_label(y);
  const double m = expected_age(p);
  double var = 0;
  for (int i = 0; i < kNumAges; ++i) var += p.probs[i] * (i - m) * (i - m);
  return {0.5 * (m - y) * (m - y), var};
}

inline double clamped_nll(double prob) { return -std::log(std::max(prob, kProbClamp)); }

inline double age_single_loss(const AgeDistribution& p, int y, const LossWeights& w) {
  const auto mv = mean_variance_loss(p, y);
  return w.lambda_mean * mv.mean + w.lambda_var * mv.variance +
         w.lambda_ce * clamped_nll(p.probs[static_cast<std::size_t>(y)]);
}

/// Binary cross-entropy on the probability of the true class (unweighted).
inline double gender_single_loss(const GenderDistribution& g, Gender truth) {
  return clamped_nll(g[truth]);
}

inline double total_loss(double l_det, double l_age, double l_gen) { return l_det + l_age + l_gen; }

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Per prediction slot: best-matching ground truth and which loss terms apply.
struct SlotMask {
  std::optional<int> gt;
  double max_iou = 0;
  bool iou_ok = false;
  bool age = false;     // b_iou * b_age
  bool gender = false;  // b_iou * b_gen
};

inline std::vector<SlotMask> mask_slots(std::span<const Detection> preds,
                                        std::span<const FaceAnnotation> truth, double th_iou) {
  std::vector<BBox> gts;
  gts.reserve(truth.size());
  for (const auto& f : truth) gts.push_back(f.box);
  const auto matches = match_predictions(preds, gts, th_iou);
  std::vector<SlotMask> out(matches.size());
  for (std::size_t k = 0; k < matches.size(); ++k) {
    auto& s = out[k];
    s.gt = matches[k].matched_gt_index;
    s.max_iou = matches[k].max_iou;
    s.iou_ok = matches[k].included;
    if (s.iou_ok) {
      const auto& f = truth[static_cast<std::size_t>(*s.gt)];
      s.age = f.has_age();
      s.gender = f.has_gender();
    }
  }
  return out;
}

struct BatchMasks {
  std::vector<std::vector<SlotMask>> slots;  // [b][k]
  int n_age = 0;
  int n_gender = 0;
};

struct SlotPrediction {
  Detection detection;
  AgeDistribution age;
  GenderDistribution gender;
};

struct ImageSupervision {
  std::vector<SlotPrediction> slots;  // K entries
  std::vector<FaceAnnotation> truth;
};

struct BatchAgeSupervision {
  std::vector<ImageSupervision> images;  // B entries
};

inline BatchMasks compute_masks(const BatchAgeSupervision& sup, double th_iou) {
  BatchMasks m;
  for (const auto& img : sup.images) {
    std::vector<Detection> dets;
    dets.reserve(img.slots.size());
    for (const auto& s : img.slots) dets.push_back(s.detection);
    auto row = mask_slots(dets, img.truth, th_iou);
    for (const auto& s : row) {
      m.n_age += s.age;
      m.n_gender += s.gender;
    }
    m.slots.push_back(std::move(row));
  }
  return m;
}

/// L_age: sum of unmasked per-face losses divided by their count; zero when
/// every slot is masked.
inline double masked_age_loss(const BatchAgeSupervision& sup, const LossWeights& w) {
  const BatchMasks m = compute_masks(sup, w.th_iou);
  if (m.n_age == 0) return 0.0;
  double sum = 0;
  for (std::size_t b = 0; b < sup.images.size(); ++b)
    for (std::size_t k = 0; k < sup.images[b].slots.size(); ++k) {
      const SlotMask& s = m.slots[b][k];
      if (!s.age) continue;
      sum += age_single_loss(sup.images[b].slots[k].age,
                             *sup.images[b].truth[static_cast<std::size_t>(*s.gt)].age, w);
    }
  return sum / m.n_age;
}

inline double masked_gender_loss(const BatchAgeSupervision& sup, const LossWeights& w) {
  const BatchMasks m = compute_masks(sup, w.th_iou);
  if (m.n_gender == 0) return 0.0;
  double sum = 0;
  for (std::size_t b = 0; b < sup.images.size(); ++b)
    for (std::size_t k = 0; k < sup.images[b].slots.size(); ++k) {
      const SlotMask& s = m.slots[b][k];
      if (!s.gender) continue;
      sum += gender_single_loss(sup.images[b].slots[k].gender,
                                *sup.images[b].truth[static_cast<std::size_t>(*s.gt)].gender);
    }
  return w.lambda_gen * sum / m.n_gender;
}

// ---------------------------------------------------------------------------
// Differentiable forms over logits
// ---------------------------------------------------------------------------

/// age_single_loss of softmax(logits), with the gradient taken with respect
/// to the logits.
template <class T>
ag::Var<T> age_single_loss(const ag::Var<T>& logits, int y, const LossWeights& w) {
  check_age_label(y);
  if (logits.size() != kNumAges) throw std::invalid_argument("age logits must have 101 entries");
  std::vector<T> p = ag::softmax_values<T>(logits.value());
  double m = 0;
  for (int i = 0; i < kNumAges; ++i) m += i * static_cast<double>(p[i]);
  double var = 0;
  for (int i = 0; i < kNumAges; ++i) var += static_cast<double>(p[i]) * (i - m) * (i - m);
  const bool clamped = static_cast<double>(p[y]) < kProbClamp;
  const double ce = clamped ? -std::log(kProbClamp) : -std::log(static_cast<double>(p[y]));
  const double value = w.lambda_mean * 0.5 * (m - y) * (m - y) + w.lambda_var * var + w.lambda_ce * ce;

  return ag::make_result<T>(
      {1}, {static_cast<T>(value)}, {logits},
      [p = std::move(p), m, y, w, clamped](ag::Node<T>& self) {
        // dL/dp_i for the mean/variance part, then through the softmax Jacobian.
        std::vector<double> g(kNumAges);
        double pg = 0;
        for (int i = 0; i < kNumAges; ++i) {
          g[i] = w.lambda_mean * (m - y) * i + w.lambda_var * (i - m) * (i - m);
          pg += static_cast<double>(p[i]) * g[i];
        }
        auto& out = self.parents[0]->grad_buffer();
        const double up = static_cast<double>(self.grad[0]);
        for (int j = 0; j < kNumAges; ++j) {
          double d = static_cast<double>(p[j]) * (g[j] - pg);
          if (!clamped) d += w.lambda_ce * (static_cast<double>(p[j]) - (j == y ? 1.0 : 0.0));
          out[j] += static_cast<T>(up * d);
        }
      });
}

/// Unweighted binary cross-entropy of softmax(logits) against the true class.
template <class T>
ag::Var<T> gender_single_loss(const ag::Var<T>& logits, Gender truth) {
  if (logits.size() != 2) throw std::invalid_argument("gender logits must have 2 entries");
  std::vector<T> q = ag::softmax_values<T>(logits.value());
  const int t = static_cast<int>(truth);
  const bool clamped = static_cast<double>(q[t]) < kProbClamp;
  const double value = clamped ? -std::log(kProbClamp) : -std::log(static_cast<double>(q[t]));
  return ag::make_result<T>({1}, {static_cast<T>(value)}, {logits},
                            [q = std::move(q), t, clamped](ag::Node<T>& self) {
                              if (clamped) return;
                              auto& out = self.parents[0]->grad_buffer();
                              for (int j = 0; j < 2; ++j)
                                out[j] += self.grad[0] * (q[j] - (j == t ? T(1) : T(0)));
                            });
}

}  // namespace crowdage
