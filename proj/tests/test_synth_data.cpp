#include <gtest/gtest.h>

#include <cmath>
#include <queue>

#include "crowdage/synth_data.hpp"

using namespace crowdage;

namespace {

// tight extents of the 4-connected regions whose red channel exceeds 0.6
std::vector<BBox> red_components(const Image& img) {
  const int h = img.height, w = img.width;
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  std::vector<BBox> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (img.at(0, y, x) <= 0.6f || label[y * w + x] >= 0) continue;
      const int id = static_cast<int>(out.size());
      int x1 = x, y1 = y, x2 = x, y2 = y;
      std::queue<std::pair<int, int>> q;
      q.push({y, x});
      label[y * w + x] = id;
      while (!q.empty()) {
        const auto [cy, cx] = q.front();
        q.pop();
        x1 = std::min(x1, cx);
        x2 = std::max(x2, cx);
        y1 = std::min(y1, cy);
        y2 = std::max(y2, cy);
        const int dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
        for (int d = 0; d < 4; ++d) {
          const int ny = cy + dy[d], nx = cx + dx[d];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (img.at(0, ny, nx) <= 0.6f || label[ny * w + nx] >= 0) continue;
          label[ny * w + nx] = id;
          q.push({ny, nx});
        }
      }
      out.push_back({double(x1), double(y1), double(x2 + 1), double(y2 + 1)});
    }
  return out;
}

double green_std_inside(const Image& img, const BBox& b) {
  double s = 0, s2 = 0;
  int n = 0;
  for (int y = static_cast<int>(b.y1); y < static_cast<int>(b.y2); ++y)
    for (int x = static_cast<int>(b.x1); x < static_cast<int>(b.x2); ++x) {
      if (img.at(0, y, x) <= 0.6f) continue;
      const double g = img.at(1, y, x);
      s += g;
      s2 += g * g;
      ++n;
    }
  const double m = s / n;
  return std::sqrt(std::max(0.0, s2 / n - m * m));
}

DatasetManifest manifest_of(std::string name, int n, std::uint64_t seed) {
  SynthDatasetSpec spec;
  spec.name = std::move(name);
  spec.n_scenes = n;
  spec.image_side = 64;
  spec.face_scale = {0.3, 0.5};
  spec.seed = seed;
  return generate_dataset(spec);
}

}  // namespace

TEST(GenerateScene, Deterministic) {
  const auto a = generate_scene(7, 3, 128, {0.2, 0.3});
  const auto b = generate_scene(7, 3, 128, {0.2, 0.3});
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.faces, b.faces);
  const auto c = generate_scene(8, 3, 128, {0.2, 0.3});
  EXPECT_NE(a.image, c.image);
}

TEST(GenerateScene, BackgroundOnly) {
  const auto s = generate_scene(3, 0, 96, {0.2, 0.3});
  EXPECT_TRUE(s.faces.empty());
  EXPECT_EQ(s.width(), 96);
  EXPECT_EQ(s.height(), 96);
  EXPECT_TRUE(red_components(s.image).empty());
  for (float v : s.image.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(GenerateScene, FourFacesMatchRenderedExtents) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto s = generate_scene(seed, 4, 256, {0.15, 0.3});
    ASSERT_EQ(s.faces.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) EXPECT_EQ(intersection_area(s.faces[i].box, s.faces[j].box), 0.0);
    const auto comps = red_components(s.image);
    ASSERT_EQ(comps.size(), 4u) << "seed " << seed;
    for (const auto& f : s.faces) {
      bool found = false;
      for (const auto& c : comps)
        if (std::abs(c.x1 - f.box.x1) <= 1 && std::abs(c.x2 - f.box.x2) <= 1 && std::abs(c.y1 - f.box.y1) <= 1 &&
            std::abs(c.y2 - f.box.y2) <= 1)
          found = true;
      EXPECT_TRUE(found) << "seed " << seed;
      ASSERT_TRUE(f.age.has_value());
      EXPECT_GE(*f.age, 0);
      EXPECT_LE(*f.age, 100);
      EXPECT_TRUE(f.gender.has_value());
    }
  }
}

TEST(GenerateScene, LabelsCanBeOmitted) {
  SynthOptions opt;
  opt.label_age = false;
  opt.label_gender = false;
  const auto s = generate_scene(4, 2, 128, {0.2, 0.3}, opt);
  for (const auto& f : s.faces) {
    EXPECT_FALSE(f.has_age());
    EXPECT_FALSE(f.has_gender());
  }
}

TEST(GenerateScene, ImpossiblePlacementFails) {
  EXPECT_THROW(generate_scene(1, 30, 64, {0.6, 0.7}), std::runtime_error);
  EXPECT_THROW(generate_scene(1, -1, 64, {0.2, 0.3}), std::invalid_argument);
  EXPECT_THROW(generate_scene(1, 1, 32, {0.2, 0.3}), std::invalid_argument);
}

TEST(GenerateScene, AgeCueStrictlyMonotone) {
  double prev = -1;
  for (int age = 0; age <= 100; ++age) {
    Image img(3, 120, 120);
    const BBox b = detail::render_face(img, 60, 60, 80, 100, age, Gender::female);
    const double sd = green_std_inside(img, b);
    EXPECT_GT(sd, prev) << age;
    prev = sd;
  }
}

TEST(GenerateScene, GenderCueSeparates) {
  Image f(3, 64, 64), m(3, 64, 64);
  const BBox b = detail::render_face(f, 32, 32, 40, 50, 30, Gender::female);
  detail::render_face(m, 32, 32, 40, 50, 30, Gender::male);
  double bf = 0, bm = 0;
  int n = 0;
  for (int y = static_cast<int>(b.y1); y < static_cast<int>(b.y2); ++y)
    for (int x = static_cast<int>(b.x1); x < static_cast<int>(b.x2); ++x)
      if (f.at(0, y, x) > 0.6f) {
        bf += f.at(2, y, x);
        bm += m.at(2, y, x);
        ++n;
      }
  EXPECT_GT(bf / n - bm / n, 0.2);
}

TEST(GenerateDataset, ScenesRegenerateIndependently) {
  SynthDatasetSpec spec;
  spec.n_scenes = 5;
  spec.min_faces = 1;
  spec.max_faces = 3;
  spec.image_side = 96;
  spec.face_scale = {0.2, 0.3};
  spec.seed = 42;
  const auto a = generate_dataset(spec);
  const auto b = generate_dataset(spec);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.scenes[i].image, b.scenes[i].image);
    EXPECT_EQ(a.scenes[i].faces, b.scenes[i].faces);
    EXPECT_GE(a.scenes[i].faces.size(), 1u);
    EXPECT_LE(a.scenes[i].faces.size(), 3u);
  }
  spec.n_scenes = 2;
  const auto c = generate_dataset(spec);
  EXPECT_EQ(c.scenes[1].image, a.scenes[1].image);
}

TEST(CleanSingleFace, Rules) {
  DatasetManifest m;
  m.name = "raw";
  for (std::uint64_t s = 0; s < 3; ++s) m.scenes.push_back(generate_scene(s, 1, 64, {0.3, 0.5}));
  const BBox det_box{5, 6, 40, 50};
  // scene 0: two confident detections, scene 1: one, scene 2: none confident
  auto detect = [&](const Scene& s) -> std::vector<Detection> {
    if (s.image == m.scenes[0].image) return {{det_box, 0.9}, {{1, 1, 9, 9}, 0.5}, {{0, 0, 3, 3}, 0.1}};
    if (s.image == m.scenes[1].image) return {{det_box, 0.8}, {{1, 1, 9, 9}, 0.2}};
    return {{det_box, 0.15}};
  };
  const auto out = clean_single_face(m, detect, 0.2);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.scenes[0].image, m.scenes[1].image);
  ASSERT_EQ(out.scenes[0].faces.size(), 1u);
  EXPECT_EQ(out.scenes[0].faces[0].box, det_box);
  EXPECT_EQ(out.scenes[0].faces[0].age, m.scenes[1].faces[0].age);
  EXPECT_EQ(out.scenes[0].faces[0].gender, m.scenes[1].faces[0].gender);
}

TEST(CleanSingleFace, NeverGrowsAndLeavesOneFace) {
  const auto m = manifest_of("a", 40, 9);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> nd(0, 3);
  std::uniform_real_distribution<double> conf(0, 1);
  auto detect = [&](const Scene&) {
    std::vector<Detection> d;
    const int n = nd(rng);
    for (int i = 0; i < n; ++i) d.push_back({{1.0 * i, 0, 10.0 + i, 10}, conf(rng)});
    return d;
  };
  const auto out = clean_single_face(m, detect);
  EXPECT_LE(out.size(), m.size());
  EXPECT_GT(out.size(), 0u);
  for (const auto& s : out.scenes) EXPECT_EQ(s.faces.size(), 1u);
}

TEST(WeightedSampler, ProportionalToDatasetSize) {
  const auto a = manifest_of("a", 30, 1), b = manifest_of("b", 10, 2);
  WeightedSampler s({&a, &b}, 5);
  EXPECT_EQ(s.epoch_length(), 30u);
  const int n = 20000;
  int first = 0;
  for (int i = 0; i < n; ++i) first += s.next().dataset == 0;
  const double sigma = std::sqrt(0.75 * 0.25 / n);
  EXPECT_NEAR(static_cast<double>(first) / n, 0.75, 3 * sigma);
}

TEST(WeightedSampler, ExplicitWeightOverridesSize) {
  auto a = manifest_of("a", 30, 1), b = manifest_of("b", 10, 2);
  a.weight = 1;
  b.weight = 3;
  WeightedSampler s({&a, &b}, 6);
  const int n = 20000;
  int first = 0;
  for (int i = 0; i < n; ++i) first += s.next().dataset == 0;
  EXPECT_NEAR(static_cast<double>(first) / n, 0.25, 3 * std::sqrt(0.25 * 0.75 / n));
}

TEST(WeightedSampler, UniformWithinOneDataset) {
  const auto a = manifest_of("a", 8, 3);
  WeightedSampler s({&a}, 7);
  const int n = 16000;
  std::vector<int> counts(8, 0);
  for (int i = 0; i < n; ++i) {
    const auto d = s.next();
    EXPECT_EQ(d.dataset, 0);
    ++counts[d.scene];
  }
  const double sigma = std::sqrt(n * (1.0 / 8) * (7.0 / 8));
  for (int c : counts) EXPECT_NEAR(c, n / 8.0, 4 * sigma);
}

TEST(WeightedSampler, DeterministicAndResumable) {
  const auto a = manifest_of("a", 5, 1), b = manifest_of("b", 3, 2);
  WeightedSampler s1({&a, &b}, 11), s2({&a, &b}, 11);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(s1.next(), s2.next());
  const auto state = s1.rng_state();
  std::vector<WeightedSampler::Draw> expected;
  for (int i = 0; i < 20; ++i) expected.push_back(s1.next());
  WeightedSampler s3({&a, &b}, 999);
  s3.set_rng_state(state);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(s3.next(), expected[i]);
}

TEST(WeightedSampler, RejectsEmptyInput) {
  EXPECT_THROW(WeightedSampler({}, 1), std::invalid_argument);
  DatasetManifest empty;
  empty.name = "empty";
  EXPECT_THROW(WeightedSampler({&empty}, 1), std::invalid_argument);
}
