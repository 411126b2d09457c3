#pragma once
// Procedural stand-in for real age/detection datasets. Faces are ellipses
// whose red channel sits well above the background's; age is carried by the
// contrast and ring count of a radial texture in the green channel, gender by
// the blue level. Everything is a pure function of (seed, index).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crowdage/geometry.hpp"
#include "crowdage/planar.hpp"
#include "crowdage/scene.hpp"

namespace crowdage {

inline constexpr double kFaceAspect = 0.8;        // width / height
inline constexpr double kBackgroundRedMax = 0.45;
inline constexpr double kFaceRedMin = 0.72;

/// Contrast of the age texture; strictly increasing in age.
inline double age_texture_amplitude(int age) { return 0.04 + 0.30 * age / 100.0; }
/// Number of texture rings from center to rim; strictly increasing in age.
inline double age_ring_count(int age) { return 1.0 + 2.0 * age / 100.0; }
inline double gender_blue_level(Gender g) { return g == Gender::female ? 0.62 : 0.28; }

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ (index * 0xD1B54A32D192ED03ULL));
}

inline float quantize8(double v) { return static_cast<float>(std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0); }

struct SynthOptions {
  bool label_age = true;
  bool label_gender = true;
  std::string dataset = "synthetic";
  int max_attempts = 2000;
};

namespace detail {

inline void render_background(Image& img, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int side_w = img.width, side_h = img.height;
  const double r0 = 0.05 + 0.25 * u(rng);
  const double g0 = 0.15 + 0.7 * u(rng), b0 = 0.15 + 0.7 * u(rng);
  const double ang = 2 * std::numbers::pi * u(rng);
  const double gx = std::cos(ang) / side_w, gy = std::sin(ang) / side_h;
  for (int y = 0; y < side_h; ++y)
    for (int x = 0; x < side_w; ++x) {
      const double t = 0.25 * ((x - side_w / 2.0) * gx + (y - side_h / 2.0) * gy);
      img.at(0, y, x) = static_cast<float>(r0 + 0.5 * t);
      img.at(1, y, x) = static_cast<float>(g0 + t);
      img.at(2, y, x) = static_cast<float>(b0 - t);
    }
  std::uniform_int_distribution<int> nblobs(6, 12);
  const int n = nblobs(rng);
  for (int i = 0; i < n; ++i) {
    const double cx = u(rng) * side_w, cy = u(rng) * side_h;
    const double rad = 3 + u(rng) * std::min(side_w, side_h) / 6.0;
    const double cr = 0.4 * u(rng), cg = u(rng), cb = u(rng);
    const int y0 = std::max(0, static_cast<int>(cy - rad)), y1 = std::min(side_h - 1, static_cast<int>(cy + rad));
    const int x0 = std::max(0, static_cast<int>(cx - rad)), x1 = std::min(side_w - 1, static_cast<int>(cx + rad));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        if (dx * dx + dy * dy > rad * rad) continue;
        img.at(0, y, x) = static_cast<float>(cr);
        img.at(1, y, x) = static_cast<float>(cg);
        img.at(2, y, x) = static_cast<float>(cb);
      }
  }
  std::uniform_real_distribution<double> noise(-0.03, 0.03);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side_h; ++y)
      for (int x = 0; x < side_w; ++x) {
        double v = img.at(c, y, x) + noise(rng);
        if (c == 0) v = std::min(v, kBackgroundRedMax);
        img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
}

/// Draws one face and returns the tight extent of the pixels it covered.
inline BBox render_face(Image& img, double cx, double cy, double fw, double fh, int age, Gender gender) {
  const double rx = fw / 2, ry = fh / 2;
  const double amp = age_texture_amplitude(age), rings = age_ring_count(age);
  const double blue = gender_blue_level(gender);
  int minx = img.width, miny = img.height, maxx = -1, maxy = -1;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + ry)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + rx)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
      const double r = std::sqrt(u * u + v * v);
      if (r > 1.0) continue;
      img.at(0, y, x) = static_cast<float>(kFaceRedMin + 0.1 * (1 - r));
      img.at(1, y, x) = static_cast<float>(0.5 + amp * std::sin(2 * std::numbers::pi * rings * r));
      img.at(2, y, x) = static_cast<float>(blue + 0.06 * v);
      minx = std::min(minx, x);
      maxx = std::max(maxx, x);
      miny = std::min(miny, y);
      maxy = std::max(maxy, y);
    }
  if (maxx < 0) throw std::runtime_error("render_face: face covers no pixel");
  return {static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx + 1),
          static_cast<double>(maxy + 1)};
}

}  // namespace detail

/// Background plus `n_faces` non-overlapping labelled faces. Face height is
/// drawn uniformly from face_scale_range times the image side.
inline Scene generate_scene(std::uint64_t seed, int n_faces, int image_side,
                            std::pair<double, double> face_scale_range, const SynthOptions& opt = {}) {
  if (n_faces < 0) throw std::invalid_argument("generate_scene: negative face count");
  if (image_side < 64) throw std::invalid_argument("generate_scene: image side must be >= 64");
  const auto [smin, smax] = face_scale_range;
  if (!(smin > 0 && smin <= smax && smax < 1)) throw std::invalid_argument("generate_scene: bad face scale range");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  Scene scene;
  scene.source_dataset = opt.dataset;
  scene.image = Image(3, image_side, image_side);
  detail::render_background(scene.image, rng);

  struct Placed {
    double cx, cy, fw, fh;
    int age;
    Gender gender;
  };
  std::vector<Placed> placed;
  int attempts = 0;
  std::uniform_int_distribution<int> age_dist(0, kNumAges - 1);
  while (static_cast<int>(placed.size()) < n_faces) {
    if (++attempts > opt.max_attempts)
      throw std::runtime_error("generate_scene: could not place " + std::to_string(n_faces) +
                               " faces without overlap");
    const double fh = std::max(4.0, (smin + (smax - smin) * u(rng)) * image_side);
    const double fw = kFaceAspect * fh;
    const double cx = fw / 2 + 1 + u(rng) * (image_side - fw - 2);
    const double cy = fh / 2 + 1 + u(rng) * (image_side - fh - 2);
    const int age = age_dist(rng);
    const Gender gender = u(rng) < 0.5 ? Gender::female : Gender::male;
    bool clash = false;
    for (const auto& p : placed) {
      const double gap = 3.0;
      if (std::abs(cx - p.cx) < (fw + p.fw) / 2 + gap && std::abs(cy - p.cy) < (fh + p.fh) / 2 + gap) {
        clash = true;
        break;
      }
    }
    if (!clash) placed.push_back({cx, cy, fw, fh, age, gender});
  }
  for (const auto& p : placed) {
    FaceAnnotation f;
    f.box = detail::render_face(scene.image, p.cx, p.cy, p.fw, p.fh, p.age, p.gender);
    if (opt.label_age) f.age = p.age;
    if (opt.label_gender) f.gender = p.gender;
    scene.faces.push_back(f);
  }
  for (auto& v : scene.image.data) v = quantize8(v);
  return scene;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetManifest {
  std::string name;
  std::vector<Scene> scenes;
  double weight = 0;  // <= 0 means "proportional to scene count"

  std::size_t size() const { return scenes.size(); }
  double sampling_weight() const { return weight > 0 ? weight : static_cast<double>(scenes.size()); }
};

struct SynthDatasetSpec {
  std::string name = "synthetic";
  int n_scenes = 0;
  int min_faces = 1;
  int max_faces = 1;
  int image_side = 256;
  std::pair<double, double> face_scale{0.3, 0.5};
  bool label_age = true;
  bool label_gender = true;
  std::uint64_t seed = 0;
};

/// Scene i uses derive_seed(seed, i); its face count is drawn from the same
/// stream, so any scene can be regenerated on its own.
inline DatasetManifest generate_dataset(const SynthDatasetSpec& spec) {
  if (spec.min_faces < 0 || spec.max_faces < spec.min_faces)
    throw std::invalid_argument("generate_dataset: bad face count range");
  DatasetManifest m;
  m.name = spec.name;
  SynthOptions opt;
  opt.label_age = spec.label_age;
  opt.label_gender = spec.label_gender;
  opt.dataset = spec.name;
  for (int i = 0; i < spec.n_scenes; ++i) {
    const std::uint64_t s = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
    std::mt19937_64 pick(s ^ 0xA5A5A5A5ULL);
    const int n = std::uniform_int_distribution<int>(spec.min_faces, spec.max_faces)(pick);
    m.scenes.push_back(generate_scene(s, n, spec.image_side, spec.face_scale, opt));
  }
  return m;
}

/// Detector used for cleaning: detections in image pixels.
using SceneDetector = std::function<std::vector<Detection>(const Scene&)>;

/// Keeps scenes with exactly one detection above conf_th and replaces their
/// face box with that detection; labels come from the first annotated face.
inline DatasetManifest clean_single_face(const DatasetManifest& manifest, const SceneDetector& detect,
                                         double conf_th = 0.2) {
  DatasetManifest out;
  out.name = manifest.name;
  out.weight = manifest.weight;
  for (const auto& scene : manifest.scenes) {
    const auto dets = detect(scene);
    std::vector<Detection> confident;
    for (const auto& d : dets)
      if (d.confidence > conf_th) confident.push_back(d);
    if (confident.size() != 1) continue;
    Scene s = scene;
    FaceAnnotation f;
    if (!scene.faces.empty()) f = scene.faces.front();
    f.box = confident.front().box;
    s.faces = {f};
    out.scenes.push_back(std::move(s));
  }
  return out;
}

/// Draws scenes across datasets with probability proportional to their
/// sampling weights, then uniformly within the chosen dataset.
class WeightedSampler {
 public:
  struct Draw {
    int dataset = 0;
    int scene = 0;
    bool operator==(const Draw&) const = default;
  };

  WeightedSampler(std::vector<const DatasetManifest*> manifests, std::uint64_t seed)
      : manifests_(std::move(manifests)), rng_(seed) {
    if (manifests_.empty()) throw std::invalid_argument("WeightedSampler: no datasets");
    std::vector<double> w;
    for (const auto* m : manifests_) {
      if (m->scenes.empty()) throw std::invalid_argument("WeightedSampler: dataset '" + m->name + "' is empty");
      w.push_back(m->sampling_weight());
    }
    pick_ = std::discrete_distribution<int>(w.begin(), w.end());
  }

  Draw next() {
    Draw d;
    d.dataset = pick_(rng_);
    const int n = static_cast<int>(manifests_[d.dataset]->scenes.size());
    d.scene = std::uniform_int_distribution<int>(0, n - 1)(rng_);
    return d;
  }

  const Scene& scene(const Draw& d) const { return manifests_[d.dataset]->scenes[d.scene]; }
  const Scene& next_scene() { return scene(next()); }

  /// Scenes per epoch: the size of the biggest dataset.
  std::size_t epoch_length() const {
    std::size_t n = 0;
    for (const auto* m : manifests_) n = std::max(n, m->scenes.size());
    return n;
  }

  std::string rng_state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
  }
  void set_rng_state(const std::string& s) {
    std::istringstream is(s);
    is >> rng_;
  }

 private:
  std::vector<const DatasetManifest*> manifests_;
  std::mt19937_64 rng_;
  std::discrete_distribution<int> pick_;
};

}  // namespace crowdage
