#pragma once
// Reference implementations and model-level probes shared by the unit tests
// and the acceptance runner.

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "crowdage/losses.hpp"
#include "crowdage/model.hpp"
#include "crowdage/synth_data.hpp"

namespace crowdage::testing {

// ---- brute-force loss oracle: literal booleans and explicit normalisation ----

inline double oracle_iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double oracle_age_single(const std::array<double, 101>& p, int y, const LossWeights& w) {
  double m = 0;
  for (int i = 0; i <= 100; ++i) m += i * p[i];
  double v = 0;
  for (int i = 0; i <= 100; ++i) v += p[i] * (i - m) * (i - m);
  return w.lambda_mean * (m - y) * (m - y) / 2 + w.lambda_var * v - w.lambda_ce * std::log(std::max(p[y], 1e-12));
}

struct OracleResult {
  double l_age = 0, l_gen = 0;
  int n_age = 0, n_gen = 0;
};

inline OracleResult oracle(const BatchAgeSupervision& sup, const LossWeights& w) {
  OracleResult r;
  double sa = 0, sg = 0;
  for (const auto& img : sup.images)
    for (const auto& slot : img.slots) {
      int best = -1;
      double best_iou = 0;
      for (std::size_t j = 0; j < img.truth.size(); ++j) {
        const double v = oracle_iou(slot.detection.box, img.truth[j].box);
        if (best < 0 || v > best_iou) {
          best = static_cast<int>(j);
          best_iou = v;
        }
      }
      const int b_iou = best >= 0 && best_iou > w.th_iou ? 1 : 0;
      if (!b_iou) continue;
      const auto& gt = img.truth[static_cast<std::size_t>(best)];
      const int b_age = gt.age ? 1 : 0, b_gen = gt.gender ? 1 : 0;
      if (b_iou * b_age == 1) {
        sa += oracle_age_single(slot.age.probs, *gt.age, w);
        ++r.n_age;
      }
      if (b_iou * b_gen == 1) {
        sg += -std::log(std::max(slot.gender.probs[static_cast<int>(*gt.gender)], 1e-12));
        ++r.n_gen;
      }
    }
  r.l_age = r.n_age ? sa / r.n_age : 0.0;
  r.l_gen = r.n_gen ? w.lambda_gen * sg / r.n_gen : 0.0;
  return r;
}

/// B <= 2 images, K <= 3 slots, 0..3 faces; each label present with p = 0.7.
inline BatchAgeSupervision random_batch(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> nb(1, 2), nk(1, 3), nf(0, 3), age(0, 100);
  BatchAgeSupervision sup;
  const int B = nb(rng), K = nk(rng);
  for (int b = 0; b < B; ++b) {
    ImageSupervision img;
    const int F = nf(rng);
    for (int f = 0; f < F; ++f) {
      const double x = 120 * f + 10 * u(rng), y = 40 * u(rng);
      FaceAnnotation a{{x, y, x + 60 + 20 * u(rng), y + 70 + 20 * u(rng)}, std::nullopt, std::nullopt};
      if (u(rng) < 0.7) a.age = age(rng);
      if (u(rng) < 0.7) a.gender = u(rng) < 0.5 ? Gender::female : Gender::male;
      img.truth.push_back(a);
    }
    for (int k = 0; k < K; ++k) {
      SlotPrediction s;
      const double x = 360 * u(rng), y = 40 * u(rng);
      s.detection = {{x, y, x + 50 + 40 * u(rng), y + 60 + 40 * u(rng)}, u(rng)};
      double z = 0;
      for (auto& p : s.age.probs) z += (p = std::pow(u(rng), 4));
      for (auto& p : s.age.probs) p /= z;
      const double q = u(rng);
      s.gender.probs = {q, 1 - q};
      img.slots.push_back(s);
    }
    sup.images.push_back(img);
  }
  return sup;
}

// ---- surroundings probe ----

inline BBox pixel_hull(const BBox& b) { return {std::floor(b.x1), std::floor(b.y1), std::ceil(b.x2), std::ceil(b.y2)}; }

/// Gradient of the first slot's expected age w.r.t. every image pixel, and
/// the pixel footprint of its margin-expanded crop.
struct PixelGradient {
  std::vector<double> grad;
  BBox crop;
  int side = 0;
  int outside = 0, outside_nonzero = 0, inside_nonzero = 0;
};

inline PixelGradient surroundings_gradient(bool connection, std::uint64_t model_seed = 11,
                                           std::uint64_t scene_seed = 5) {
  auto cfg = desk_preset();
  cfg.age.intermediate_connection = connection;
  const auto m = Model<double>::build(cfg, model_seed);
  const auto scene = generate_scene(scene_seed, 1, cfg.image_side, {0.25, 0.35});
  std::vector<double> px(scene.image.data.begin(), scene.image.data.end());
  auto image = ag::leaf<double>({3, cfg.image_side, cfg.image_side}, px);
  nn::Binding<double> det_p(m.det_params, false), age_p(m.age_params, false);
  const auto pass = detect_scene(m, det_p, image, 1);
  std::mt19937_64 rng(0);
  const auto logits = age_for_slot(m, age_p, image, pass, pass.slots[0], false, rng);
  ag::backward(ag::expected_index(ag::softmax(logits.age)));
  const auto g = image.grad();
  PixelGradient r{std::vector<double>(g.begin(), g.end()), pixel_hull(round_box(pass.slots[0].crop_region)),
                  cfg.image_side};
  const int side = cfg.image_side;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const bool nz = r.grad[(static_cast<std::size_t>(c) * side + y) * side + x] != 0;
        if (x >= r.crop.x1 && x < r.crop.x2 && y >= r.crop.y1 && y < r.crop.y2) {
          r.inside_nonzero += nz;
        } else {
          ++r.outside;
          r.outside_nonzero += nz;
        }
      }
  return r;
}

// ---- full objective gradient check ----

struct FullGradCheck {
  double worst = 0;
  int checked = 0;
  int n_age = 0;
};

/// Central differences of the full objective on a desk-preset model at
/// float64, for the largest-gradient entry and one random entry of every
/// parameter tensor. Decoded regions are held fixed, matching the analytic
/// gradient, which treats box coordinates as constants. Relative errors use
/// max(|analytic|, |numeric|, floor); the default floor of 1e-6 sits above
/// the difference quotient's rounding noise (objective ~10, ulp ~2e-15).
inline FullGradCheck full_objective_gradient_check(std::uint64_t seed = 3, std::uint64_t scene_seed = 1,
                                                   double eps = 1e-6, double floor = 1e-6) {
  const auto cfg = desk_preset();
  auto m = Model<double>::build(cfg, seed);
  const Scene s = generate_scene(scene_seed, 2, cfg.image_side, {0.25, 0.35});
  std::vector<const Scene*> ptrs{&s};
  BatchOptions opt;
  opt.k = 3;
  opt.training = false;
  opt.objective = Objective::full;
  LossWeights w;
  w.th_iou = 0.05;  // an untrained detector rarely overlaps a face by more than 0.3
  auto run = [&] {
    std::mt19937_64 rng(1);
    return build_batch(m, std::span<const Scene* const>(ptrs), opt, w, rng);
  };
  std::vector<std::vector<SlotGeometry>> fixed;
  for (const auto& p : run().passes) fixed.push_back(p.slots);
  opt.fixed_slots = &fixed;

  auto g = run();
  FullGradCheck r;
  r.n_age = g.n_age;
  ag::backward(g.objective);
  auto gd = nn::zero_grads(m.det_params);
  g.det_p.collect(gd);
  auto ga = nn::zero_grads(m.age_params);
  g.age_p.collect(ga);
  std::mt19937_64 pick(seed);
  for (int which = 0; which < 2; ++which) {
    auto& store = which ? m.age_params : m.det_params;
    const auto& grads = which ? ga : gd;
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& v = store[i].value;
      std::size_t jmax = 0;
      for (std::size_t j = 0; j < v.size(); ++j)
        if (std::abs(grads[i][j]) > std::abs(grads[i][jmax])) jmax = j;
      for (std::size_t j : {jmax, std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(pick)}) {
        const double orig = v[j];
        v[j] = orig + eps;
        const double fp = run().objective.item();
        v[j] = orig - eps;
        const double fm = run().objective.item();
        v[j] = orig;
        const double numeric = (fp - fm) / (2 * eps), analytic = grads[i][j];
        r.worst = std::max(r.worst, std::abs(analytic - numeric) /
                                        std::max({std::abs(analytic), std::abs(numeric), floor}));
        ++r.checked;
      }
    }
  }
  return r;
}

}  // namespace crowdage::testing
