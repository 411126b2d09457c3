#include <gtest/gtest.h>

#include <limits>

#include <cmath>

#include "crowdage/evaluation.hpp"
#include "crowdage/pipeline.hpp"

using namespace crowdage;

namespace {

DatasetManifest small_set(int n, int faces, std::uint64_t seed, std::pair<double, double> scale = {0.3, 0.45}) {
  SynthDatasetSpec spec;
  spec.name = "set" + std::to_string(seed);
  spec.n_scenes = n;
  spec.min_faces = spec.max_faces = faces;
  spec.image_side = desk_preset().image_side;
  spec.face_scale = scale;
  spec.seed = seed;
  return generate_dataset(spec);
}

TrainConfig quick_config() {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 2;
  c.lr.initial = 1e-3;
  c.detector_lr.initial = 1e-3;
  c.seed = 5;
  return c;
}

bool same_record(const EpochRecord& a, const EpochRecord& b) {
  return a.phase == b.phase && a.epoch == b.epoch && a.lr == b.lr && a.l_det == b.l_det && a.l_age == b.l_age &&
         a.l_gen == b.l_gen && a.l_total == b.l_total && a.steps == b.steps;
}

PredictedFace pred(BBox b, double conf, double age, Gender g = Gender::female) { return {{b, conf}, age, g}; }

Scene labelled(std::vector<FaceAnnotation> faces) {
  Scene s;
  s.image = Image(3, 64, 64);
  s.faces = std::move(faces);
  return s;
}

}  // namespace

TEST(LrSchedule, StepDecay) {
  LrSchedule s;
  s.initial = 1e-4;
  s.milestones = {30, 40};
  EXPECT_DOUBLE_EQ(s.at(0), 1e-4);
  EXPECT_NEAR(s.at(29), 1e-4, 1e-18);
  EXPECT_NEAR(s.at(30), 1e-5, 1e-18);
  EXPECT_NEAR(s.at(40), 1e-6, 1e-18);
  EXPECT_NEAR(s.at(49), 1e-6, 1e-18);
  s.milestones = {40, 30};
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(TrainConfig, KTrainDefaults) {
  TrainConfig c;
  EXPECT_EQ(c.k_eval, 20);
  EXPECT_DOUBLE_EQ(c.conf_threshold, 0.2);
  EXPECT_DOUBLE_EQ(c.lr.initial, 1e-4);
  EXPECT_EQ(c.effective_k_train(), 1);
  c.tiling = true;
  EXPECT_EQ(c.effective_k_train(), 9);
  c.k_train = 3;
  EXPECT_EQ(c.effective_k_train(), 3);
  c.k_eval = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Trainer, ResumeMidScheduleUsesScheduleLr) {
  auto data = small_set(4, 1, 1);
  auto m = Model<float>::build(desk_preset(), 1);
  TrainConfig c;
  c.epochs = 50;
  c.detector_epochs = 5;
  c.lr.milestones = {30, 40};
  Trainer t(m, c, {{&data}, nullptr});
  auto st = t.state();
  st.epoch = 5 + 35;
  t.restore(st);
  EXPECT_EQ(t.epoch(), 40);
  EXPECT_NEAR(t.lr_at(t.epoch()), 1e-5, 1e-18);
  EXPECT_NEAR(t.lr_at(5 + 40), 1e-6, 1e-18);
  EXPECT_NEAR(t.lr_at(4), c.detector_lr.at(4), 1e-18);
}

TEST(Trainer, FrozenModeLeavesDetectorUntouched) {
  auto data = small_set(8, 1, 2);
  auto m = Model<float>::build(desk_preset(), 2);
  const auto det_before = m.det_params.fingerprint();
  const auto age_before = m.age_params.fingerprint();
  auto c = quick_config();
  c.epochs = 1;
  Trainer t(m, c, {{&data}, nullptr});
  const auto rec = t.run_epoch();
  EXPECT_EQ(rec.phase, "age");
  EXPECT_EQ(m.det_params.fingerprint(), det_before);
  EXPECT_NE(m.age_params.fingerprint(), age_before);
  EXPECT_TRUE(t.done());
}

TEST(Trainer, DetectorPhaseLeavesAgeNetworkUntouched) {
  auto data = small_set(8, 1, 3);
  auto m = Model<float>::build(desk_preset(), 3);
  const auto det_before = m.det_params.fingerprint();
  const auto age_before = m.age_params.fingerprint();
  auto c = quick_config();
  c.detector_epochs = 1;
  Trainer t(m, c, {{&data}, nullptr});
  const auto rec = t.run_epoch();
  EXPECT_EQ(rec.phase, "detector");
  EXPECT_EQ(rec.l_age, 0.0);
  EXPECT_GT(rec.l_det, 0.0);
  EXPECT_NE(m.det_params.fingerprint(), det_before);
  EXPECT_EQ(m.age_params.fingerprint(), age_before);
}

TEST(Trainer, EndToEndUpdatesBothNetworks) {
  auto data = small_set(8, 1, 4);
  auto m = Model<float>::build(desk_preset(), 4);
  const auto det_before = m.det_params.fingerprint();
  auto c = quick_config();
  c.mode = TrainMode::end_to_end;
  c.epochs = 1;
  Trainer t(m, c, {{&data}, nullptr});
  t.run_epoch();
  EXPECT_NE(m.det_params.fingerprint(), det_before);
}

namespace {

double detector_grad_from_age_loss(bool connection) {
  auto cfg = desk_preset();
  cfg.age.intermediate_connection = connection;
  const auto m = Model<double>::build(cfg, 6);
  const auto scene = generate_scene(6, 2, cfg.image_side, {0.3, 0.4});
  // lenient threshold so an untrained detector still yields included slots
  LossWeights w;
  w.th_iou = 0.0;
  BatchOptions opt;
  opt.k = 4;
  opt.objective = Objective::full;
  opt.training = false;
  const Scene* ptrs[] = {&scene};
  std::mt19937_64 rng(0);
  auto g = build_batch(m, std::span<const Scene* const>(ptrs), opt, w, rng);
  EXPECT_GT(g.n_age, 0);
  ag::backward(g.l_age);  // L_det left out of the root
  auto grads = nn::zero_grads(m.det_params);
  g.det_p.collect(grads);
  double norm = 0;
  for (const auto& gv : grads)
    for (double v : gv) norm += std::abs(v);
  return norm;
}

}  // namespace

TEST(Trainer, AgeLossReachesDetectorOnlyThroughFeatureConnection) {
  EXPECT_GT(detector_grad_from_age_loss(true), 0.0);
  EXPECT_EQ(detector_grad_from_age_loss(false), 0.0);
}

TEST(Trainer, DeterministicLogs) {
  auto data = small_set(8, 1, 7);
  auto run = [&] {
    auto m = Model<float>::build(desk_preset(), 7);
    auto c = quick_config();
    c.detector_epochs = 1;
    Trainer t(m, c, {{&data}, nullptr});
    return std::pair(t.run(), m.age_params.fingerprint());
  };
  const auto [a, fa] = run();
  const auto [b, fb] = run();
  ASSERT_EQ(a.size(), 3u);
  ASSERT_EQ(b.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_record(a[i], b[i])) << i;
  EXPECT_EQ(fa, fb);
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  auto data = small_set(8, 1, 8);
  auto c = quick_config();
  c.epochs = 3;
  c.detector_epochs = 1;

  auto straight = Model<float>::build(desk_preset(), 8);
  Trainer ts(straight, c, {{&data}, nullptr});
  const auto full = ts.run();

  auto first = Model<float>::build(desk_preset(), 8);
  Trainer t1(first, c, {{&data}, nullptr});
  t1.run_epoch();
  t1.run_epoch();
  const auto state = t1.state();
  auto resumed = first;
  Trainer t2(resumed, c, {{&data}, nullptr});
  t2.restore(state);
  std::vector<EpochRecord> rest;
  while (!t2.done()) rest.push_back(t2.run_epoch());
  ASSERT_EQ(rest.size(), 2u);
  EXPECT_TRUE(same_record(rest[0], full[2]));
  EXPECT_TRUE(same_record(rest[1], full[3]));
  EXPECT_EQ(resumed.age_params, straight.age_params);
  EXPECT_EQ(resumed.det_params, straight.det_params);
}

TEST(Trainer, TilingWithDetectionOnlyMix) {
  auto data = small_set(8, 1, 9);
  auto det = small_set(4, 3, 10, {0.15, 0.25});
  for (auto& s : det.scenes) s = strip_labels(std::move(s));
  auto m = Model<float>::build(desk_preset(), 9);
  auto c = quick_config();
  c.tiling = true;
  c.tiling_config.detection_only_mix = 0.5;
  c.mode = TrainMode::end_to_end;
  c.epochs = 1;
  Trainer t(m, c, {{&data}, &det});
  const auto rec = t.run_epoch();
  EXPECT_TRUE(std::isfinite(rec.l_total));
  EXPECT_EQ(rec.steps, 2);
}

TEST(Trainer, NonFiniteLossAborts) {
  auto data = small_set(4, 1, 11);
  auto m = Model<float>::build(desk_preset(), 11);
  auto c = quick_config();
  c.weights.lambda_size = std::numeric_limits<double>::infinity();
  c.detector_epochs = 1;
  Trainer t(m, c, {{&data}, nullptr});
  try {
    t.run_epoch();
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("seed 5"), std::string::npos) << e.what();
  }
}

TEST(Trainer, RejectsMismatchedSceneSize) {
  SynthDatasetSpec spec;
  spec.n_scenes = 2;
  spec.image_side = 128;
  const auto data = generate_dataset(spec);
  auto m = Model<float>::build(desk_preset(), 1);
  EXPECT_THROW(Trainer(m, TrainConfig{}, {{&data}, nullptr}), std::invalid_argument);
  EXPECT_THROW(Trainer(m, TrainConfig{}, {{}, nullptr}), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  nn::ParamStore<float> store;
  store.add("p", {3}, {1.0f, -2.0f, 0.5f});
  nn::Grads<float> g{{0.3f, -4.0f, 0.0f}};
  AdamState st;
  adam_step(store, g, st, 0.01);
  // bias-corrected first step: lr * g / (|g| + eps)
  EXPECT_NEAR(store[0].value[0], 1.0 - 0.01, 1e-6);
  EXPECT_NEAR(store[0].value[1], -2.0 + 0.01, 1e-6);
  EXPECT_NEAR(store[0].value[2], 0.5, 1e-9);
  EXPECT_EQ(st.step, 1);
}

TEST(Evaluation, MaeHandExample) {
  const std::vector<Scene> scenes{labelled({{{0, 0, 20, 20}, 20, Gender::male}, {{30, 30, 50, 50}, 30, Gender::female}})};
  const std::vector<std::vector<PredictedFace>> preds{
      {pred({0, 0, 20, 20}, 0.9, 25, Gender::male), pred({30, 30, 50, 50}, 0.8, 25, Gender::male)}};
  const auto r = score_predictions(preds, scenes, {});
  EXPECT_DOUBLE_EQ(r.mae, 5.0);
  EXPECT_DOUBLE_EQ(r.gender_accuracy, 50.0);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
}

TEST(Evaluation, PerfectPredictor) {
  std::vector<Scene> scenes;
  std::vector<std::vector<PredictedFace>> preds;
  for (int i = 0; i < 10; ++i) {
    const int age = i * 11;
    const Gender g = i % 2 ? Gender::male : Gender::female;
    scenes.push_back(labelled({{{1.0 * i, 0, 30.0 + i, 30}, age, g}}));
    preds.push_back({pred({1.0 * i, 0, 30.0 + i, 30}, 0.9, age, g)});
  }
  for (bool largest : {false, true}) {
    EvalOptions o;
    o.largest_face = largest;
    const auto r = score_predictions(preds, scenes, o);
    EXPECT_DOUBLE_EQ(r.mae, 0.0);
    EXPECT_DOUBLE_EQ(r.group_accuracy, 100.0);
    EXPECT_DOUBLE_EQ(r.one_off_accuracy, 100.0);
    EXPECT_DOUBLE_EQ(r.gender_accuracy, 100.0);
    for (const auto& g : r.per_group)
      if (g.count > 0) {
        EXPECT_DOUBLE_EQ(g.age_accuracy, 100.0);
      }
  }
}

TEST(Evaluation, AdjacentGroupCountsOnlyForOneOff) {
  // truth 25 is group 4 (20-36), prediction 15 is group 3 (13-19)
  const std::vector<Scene> scenes{labelled({{{0, 0, 20, 20}, 25, std::nullopt}})};
  const std::vector<std::vector<PredictedFace>> preds{{pred({0, 0, 20, 20}, 0.9, 15)}};
  const auto r = score_predictions(preds, scenes, {});
  EXPECT_DOUBLE_EQ(r.group_accuracy, 0.0);
  EXPECT_DOUBLE_EQ(r.one_off_accuracy, 100.0);
  EXPECT_EQ(r.per_group[4].count, 1);
  EXPECT_EQ(r.n_gender, 0);
}

TEST(Evaluation, UnmatchedDetectionsAreNotScored) {
  const std::vector<Scene> scenes{labelled({{{0, 0, 20, 20}, 40, Gender::male}})};
  const std::vector<std::vector<PredictedFace>> preds{
      {pred({40, 40, 60, 60}, 0.95, 90), pred({0, 0, 20, 18}, 0.5, 41), pred({0, 0, 20, 20}, 0.4, 70)}};
  const auto r = score_predictions(preds, scenes, {});
  EXPECT_EQ(r.n_matched, 1);
  EXPECT_DOUBLE_EQ(r.mae, 1.0);
  EXPECT_NEAR(r.precision, 1.0 / 3, 1e-12);
}

TEST(Evaluation, OneOffNeverBelowGroupAccuracy) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> age(0, 100);
  std::normal_distribution<double> noise(0, 12);
  for (int t = 0; t < 50; ++t) {
    std::vector<Scene> scenes;
    std::vector<std::vector<PredictedFace>> preds;
    for (int i = 0; i < 20; ++i) {
      const int a = age(rng);
      scenes.push_back(labelled({{{0, 0, 20, 20}, a, Gender::female}}));
      preds.push_back({pred({0, 0, 20, 20}, 0.9, std::clamp(a + noise(rng), 0.0, 100.0))});
    }
    const auto r = score_predictions(preds, scenes, {});
    EXPECT_GE(r.one_off_accuracy, r.group_accuracy);
    EXPECT_LE(r.one_off_accuracy, 100.0);
    for (const auto& g : r.per_group) EXPECT_GE(g.one_off_accuracy, g.age_accuracy);
  }
}

TEST(Evaluation, EmptyManifestAndSizeContract) {
  const auto m = Model<float>::build(desk_preset(), 1);
  DatasetManifest empty;
  EXPECT_THROW(evaluate(m, empty, {}), std::invalid_argument);
  SynthDatasetSpec spec;
  spec.n_scenes = 1;
  spec.image_side = 128;
  EXPECT_THROW(evaluate(m, generate_dataset(spec), {}), std::invalid_argument);
}

TEST(Evaluation, RecallMonotoneInK) {
  const auto m = Model<float>::build(desk_preset(), 12);
  const auto data = small_set(6, 4, 12, {0.2, 0.3});
  double prev = -1;
  for (int k : {1, 2, 4, 8, 20, 40}) {
    EvalOptions o;
    o.k = k;
    o.conf_threshold = 0.0;
    o.match_iou = 0.1;
    const auto r = evaluate(m, data, o);
    EXPECT_GE(r.recall, prev) << k;
    prev = r.recall;
  }
  EXPECT_GT(prev, 0.0);
}

TEST(Evaluation, LargestFaceFallsBackToMostConfident) {
  const auto m = Model<float>::build(desk_preset(), 13);
  const auto s = generate_scene(13, 1, desk_preset().image_side, {0.3, 0.4});
  const auto faces = infer_faces(m, s.image, 5, 1.0, FaceSelection::largest);
  ASSERT_EQ(faces.size(), 1u);
  const auto all = infer_faces(m, s.image, 5, -1.0);
  ASSERT_EQ(all.size(), 5u);
  EXPECT_EQ(faces[0].detection.box, all[0].detection.box);
  EXPECT_TRUE(infer_faces(m, s.image, 5, 1.0).empty());
}
