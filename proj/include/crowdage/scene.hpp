#pragma once
// Annotated images: the unit of both detection and age/gender supervision.

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "crowdage/geometry.hpp"
#include "crowdage/planar.hpp"

namespace crowdage {

inline constexpr int kNumAges = 101;

/// Class order of the 2-way gender head.
enum class Gender { female = 0, male = 1 };

inline std::string_view to_string(Gender g) { return g == Gender::female ? "female" : "male"; }

inline Gender gender_from_string(std::string_view s) {
  if (s == "female") return Gender::female;
  if (s == "male") return Gender::male;
  throw std::invalid_argument("unknown gender label: " + std::string(s));
}

/// Ground-truth face. A missing age or gender means that label is absent and
/// the corresponding loss term is masked out.
struct FaceAnnotation {
  BBox box;
  std::optional<int> age;
  std::optional<Gender> gender;

  bool has_age() const { return age.has_value(); }
  bool has_gender() const { return gender.has_value(); }
  bool operator==(const FaceAnnotation&) const = default;
};

struct Scene {
  Image image;  // 3 x H x W, values in [0,1]
  std::vector<FaceAnnotation> faces;
  std::string source_dataset;
  std::string image_path;  // empty for in-memory scenes

  int width() const { return image.width; }
  int height() const { return image.height; }

  std::vector<BBox> boxes() const {
    std::vector<BBox> out;
    out.reserve(faces.size());
    for (const auto& f : faces) out.push_back(f.box);
    return out;
  }
};

/// Drops labels so the face only supervises detection.
inline Scene strip_labels(Scene s) {
  for (auto& f : s.faces) {
    f.age.reset();
    f.gender.reset();
  }
  return s;
}

}  // namespace crowdage
