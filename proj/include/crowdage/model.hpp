#pragma once
// The single multi-person model: detector, facial cropping connection,
// intermediate feature connection and age/gender network, plus the batched
// training objective built on top of it.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdage/age_estimator.hpp"
#include "crowdage/autograd.hpp"
#include "crowdage/detector.hpp"
#include "crowdage/geometry.hpp"
#include "crowdage/loss_weights.hpp"
#include "crowdage/losses.hpp"
#include "crowdage/nn.hpp"
#include "crowdage/scene.hpp"

namespace crowdage {

struct ModelConfig {
  DetectorConfig detector;
  AgeNetConfig age;
  int image_side = 256;  // resolution of the scenes the model consumes
  double top_margin = 0.2;
  double other_margin = 0.1;

  void validate() const {
    detector.validate();
    age.validate();
    if (image_side < 64) throw std::invalid_argument("image_side must be >= 64");
    if (age.intermediate_connection && age.fusion_channels != detector.branch_channels)
      throw std::invalid_argument("fusion_channels must equal the detector branch width");
  }
  bool operator==(const ModelConfig&) const = default;
};

/// CPU-sized geometry used by tests and the acceptance runs.
inline ModelConfig desk_preset() {
  ModelConfig c;
  c.detector.input_side = 96;
  c.detector.widths = {16, 32, 48};
  c.detector.branch_channels = 32;
  c.detector.head_channels = 16;
  c.age.crop_w = 64;
  c.age.crop_h = 80;
  c.age.stem_width = 16;
  c.age.stem_stride = 2;
  c.age.stage_widths = {24, 32, 64, 64};
  c.age.stage_blocks = {1, 1, 1, 1};
  c.age.stage_strides = {2, 2, 2, 1};
  c.age.head_channels = 64;
  c.age.fusion_channels = 32;
  c.image_side = 256;
  return c;
}

/// Full-size geometry: 480x480 detector input, 160x224 crops, 48-channel
/// branch feature fused as a 10x14 patch, (3,3,7,3) residual blocks at 0.9
/// width.
inline ModelConfig paper_preset() {
  ModelConfig c;
  c.detector.input_side = 480;
  c.detector.widths = {32, 64, 128};
  c.detector.branch_channels = 48;
  c.detector.head_channels = 64;
  c.age.crop_w = 160;
  c.age.crop_h = 224;
  c.age.stem_width = 58;
  c.age.stem_stride = 4;
  c.age.stage_widths = {58, 115, 230, 461};
  c.age.stage_blocks = {3, 3, 7, 3};
  c.age.stage_strides = {1, 2, 2, 2};
  c.age.head_channels = 256;
  c.age.fusion_channels = 48;
  c.image_side = 960;
  return c;
}

inline ModelConfig preset_by_name(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw std::invalid_argument("unknown preset: " + name);
}

template <class T>
struct Model {
  ModelConfig config;
  nn::ParamStore<T> det_params;
  nn::ParamStore<T> age_params;
  DetectorNet detector;
  AgeNet age;

  static Model build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    std::mt19937_64 det_rng(seed * 2 + 1), age_rng(seed * 2 + 2);
    m.detector = DetectorNet::build(m.det_params, cfg.detector, det_rng);
    m.age = AgeNet::build(m.age_params, cfg.age, age_rng);
    return m;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.det_params = det_params.template cast<U>();
    m.age_params = age_params.template cast<U>();
    m.detector = detector;
    m.age = age;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Per-scene forward
// ---------------------------------------------------------------------------

struct SlotGeometry {
  Detection detection;  // image pixels
  BBox crop_region;     // margin-expanded, image pixels
  BBox feature_region;  // same region in branch-feature cells
};

template <class T>
struct DetectionPass {
  DetectorVars<T> vars;
  std::vector<SlotGeometry> slots;
};

/// Runs the detector on the resized image and decodes the top-k regions.
template <class T>
DetectionPass<T> detect_scene(const Model<T>& m, nn::Binding<T>& det_p, const ag::Var<T>& image, int k) {
  const int H = image.dim(1), W = image.dim(2);
  const int side = m.config.detector.input_side;
  auto plan = std::make_shared<const SamplePlan>(make_sample_plan(H, W, 0, 0, W, H, side, side));
  DetectionPass<T> pass;
  pass.vars = m.detector.forward(det_p, ag::sample(image, plan));
  const auto dets = decode_topk(to_output(pass.vars), k);
  const double sx = static_cast<double>(W) / side, sy = static_cast<double>(H) / side;
  const double fx = static_cast<double>(side) / W / kDetectorStride;
  const double fy = static_cast<double>(side) / H / kDetectorStride;
  for (const auto& d : dets) {
    SlotGeometry g;
    g.detection = {scale_box(d.box, sx, sy), d.confidence};
    g.crop_region = expand_with_margins(g.detection.box, m.config.top_margin, m.config.other_margin, W, H);
    g.feature_region = scale_box(g.crop_region, fx, fy);
    pass.slots.push_back(g);
  }
  return pass;
}

/// Crop + optional ROI feature + age network for one slot. Box coordinates
/// are treated as constants: gradients reach pixel and feature values only.
template <class T>
AgeLogits<T> age_for_slot(const Model<T>& m, nn::Binding<T>& age_p, const ag::Var<T>& image,
                          const DetectionPass<T>& pass, const SlotGeometry& slot, bool training,
                          std::mt19937_64& rng) {
  const auto& ac = m.config.age;
  const int H = image.dim(1), W = image.dim(2);
  auto cplan = std::make_shared<const SamplePlan>(crop_plan(H, W, slot.crop_region, ac.crop_h, ac.crop_w));
  ag::Var<T> crop = ag::sample(image, cplan);
  std::optional<ag::Var<T>> roi;
  if (ac.intermediate_connection) {
    const auto& br = pass.vars.branch;
    const BBox fr = clip_box(slot.feature_region, br.dim(2), br.dim(1));
    if (fr.valid()) {
      auto rplan = std::make_shared<const SamplePlan>(roi_plan(br.dim(1), br.dim(2), fr, ac.fusion_h(), ac.fusion_w()));
      roi = ag::sample(br, rplan);
    } else {
      roi = ag::constant<T>({ac.fusion_channels, ac.fusion_h(), ac.fusion_w()},
                            std::vector<T>(static_cast<std::size_t>(ac.fusion_channels) * ac.fusion_h() * ac.fusion_w(), T(0)));
    }
  }
  return m.age.forward(age_p, crop, roi, training, rng);
}

// ---------------------------------------------------------------------------
// Batched objective
// ---------------------------------------------------------------------------

enum class Objective { detection_only, age_only, full };

struct BatchOptions {
  int k = 1;
  Objective objective = Objective::full;
  bool train_detector = true;
  bool train_age = true;
  bool training = true;         // dropout on
  bool all_slots = false;       // run the age network on masked slots too
  bool image_requires_grad = false;
  // Reuse these regions instead of decoding (holds boxes fixed for finite differences).
  const std::vector<std::vector<SlotGeometry>>* fixed_slots = nullptr;
};

template <class T>
struct BatchGraph {
  nn::Binding<T> det_p;
  nn::Binding<T> age_p;
  std::vector<ag::Var<T>> images;
  std::vector<DetectionPass<T>> passes;
  std::vector<std::vector<SlotMask>> masks;
  std::vector<std::vector<std::optional<AgeLogits<T>>>> logits;  // [b][k]
  ag::Var<T> l_det, l_age, l_gen, objective;
  int n_faces = 0, n_age = 0, n_gender = 0;

  BatchGraph(const nn::ParamStore<T>& det, bool det_train, const nn::ParamStore<T>& age, bool age_train)
      : det_p(det, det_train), age_p(age, age_train) {}
};

template <class T>
BatchGraph<T> build_batch(const Model<T>& m, std::span<const Scene* const> scenes, const BatchOptions& opt,
                          const LossWeights& w, std::mt19937_64& rng) {
  BatchGraph<T> g(m.det_params, opt.train_detector, m.age_params, opt.train_age);
  const bool need_age = opt.objective != Objective::detection_only;
  std::vector<DetectionLossVars<T>> det_parts;
  std::vector<ag::Var<T>> age_terms, gen_terms;
  if (opt.fixed_slots && opt.fixed_slots->size() != scenes.size())
    throw std::invalid_argument("build_batch: fixed_slots must have one entry per scene");
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const Scene* s = scenes[b];
    Planar<T> img(s->image.channels, s->image.height, s->image.width);
    std::copy(s->image.data.begin(), s->image.data.end(), img.data.begin());
    g.images.push_back(ag::from_planar(img, opt.image_requires_grad));
    const auto& image = g.images.back();
    g.passes.push_back(detect_scene(m, g.det_p, image, opt.k));
    if (opt.fixed_slots) g.passes.back().slots = (*opt.fixed_slots)[b];
    const auto& pass = g.passes.back();
    const auto targets = encode_targets(*s, m.config.detector.input_side);
    det_parts.push_back(detection_loss_sums(pass.vars.heatmap, pass.vars.size_map, pass.vars.offset_map, targets));

    std::vector<Detection> dets;
    for (const auto& sl : pass.slots) dets.push_back(sl.detection);
    g.masks.push_back(mask_slots(dets, s->faces, w.th_iou));
    std::vector<std::optional<AgeLogits<T>>> row(pass.slots.size());
    if (need_age) {
      for (std::size_t k = 0; k < pass.slots.size(); ++k) {
        const SlotMask& mk = g.masks.back()[k];
        if (!opt.all_slots && !mk.age && !mk.gender) continue;
        row[k] = age_for_slot(m, g.age_p, image, pass, pass.slots[k], opt.training, rng);
        if (mk.age) age_terms.push_back(age_single_loss(row[k]->age, *s->faces[*mk.gt].age, w));
        if (mk.gender) gen_terms.push_back(gender_single_loss(row[k]->gender, *s->faces[*mk.gt].gender));
      }
    }
    g.logits.push_back(std::move(row));
  }
  for (const auto& p : det_parts) g.n_faces += p.num_faces;
  g.n_age = static_cast<int>(age_terms.size());
  g.n_gender = static_cast<int>(gen_terms.size());
  g.l_det = combine_detection_loss(det_parts, w);
  g.l_age = ag::scale(ag::sum_scalars(age_terms), static_cast<T>(1.0 / std::max(g.n_age, 1)));
  g.l_gen = ag::scale(ag::sum_scalars(gen_terms), static_cast<T>(w.lambda_gen / std::max(g.n_gender, 1)));
  switch (opt.objective) {
    case Objective::detection_only: g.objective = g.l_det; break;
    case Objective::age_only: g.objective = ag::add(g.l_age, g.l_gen); break;
    case Objective::full: g.objective = ag::add(ag::add(g.l_det, g.l_age), g.l_gen); break;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct FaceResult {
  Detection detection;
  AgeDistribution age;
  GenderDistribution gender;
  double expected_age = 0;
};

enum class FaceSelection { above_threshold, largest };

/// Detected faces with their age/gender estimates. `largest` keeps only the
/// largest face above the threshold, falling back to the most confident
/// detection when none clears it.
template <class T>
std::vector<FaceResult> infer_faces(const Model<T>& m, const Image& image, int k, double conf_threshold,
                                    FaceSelection selection = FaceSelection::above_threshold) {
  nn::Binding<T> det_p(m.det_params, false), age_p(m.age_params, false);
  Planar<T> img(image.channels, image.height, image.width);
  std::copy(image.data.begin(), image.data.end(), img.data.begin());
  const auto x = ag::from_planar(img);
  const auto pass = detect_scene(m, det_p, x, k);
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < pass.slots.size(); ++i)
    if (pass.slots[i].detection.confidence > conf_threshold) chosen.push_back(i);
  if (selection == FaceSelection::largest) {
    if (chosen.empty()) {
      if (!pass.slots.empty()) chosen = {0};
    } else {
      std::size_t best = chosen.front();
      for (auto i : chosen)
        if (pass.slots[i].detection.box.area() > pass.slots[best].detection.box.area()) best = i;
      chosen = {best};
    }
  }
  std::mt19937_64 unused(0);
  std::vector<FaceResult> out;
  for (auto i : chosen) {
    const auto logits = age_for_slot(m, age_p, x, pass, pass.slots[i], false, unused);
    FaceResult r;
    r.detection = pass.slots[i].detection;
    r.age = to_age_distribution(logits.age);
    r.gender = to_gender_distribution(logits.gender);
    r.expected_age = expected_age(r.age);
    out.push_back(r);
  }
  return out;
}

}  // namespace crowdage
