#pragma once
// Age/gender output distributions, expected-age decoding and age groups.

#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "crowdage/scene.hpp"

namespace crowdage {

/// Probability of each integer age 0..100.
struct AgeDistribution {
  std::array<double, kNumAges> probs{};

  static AgeDistribution one_hot(int age) {
    AgeDistribution d;
    d.probs.at(static_cast<std::size_t>(age)) = 1.0;
    return d;
  }
  static AgeDistribution uniform() {
    AgeDistribution d;
    d.probs.fill(1.0 / kNumAges);
    return d;
  }
  template <class T>
  static AgeDistribution from_probs(std::span<const T> p) {
    if (p.size() != kNumAges) throw std::invalid_argument("AgeDistribution: expected 101 values");
    AgeDistribution d;
    for (std::size_t i = 0; i < p.size(); ++i) d.probs[i] = static_cast<double>(p[i]);
    return d;
  }
  bool normalized(double tol = 1e-6) const {
    double s = 0;
    for (double v : probs) {
      if (v < 0) return false;
      s += v;
    }
    return std::abs(s - 1.0) <= tol;
  }
};

struct GenderDistribution {
  std::array<double, 2> probs{0.5, 0.5};

  double operator[](Gender g) const { return probs[static_cast<int>(g)]; }
  Gender argmax() const { return probs[1] > probs[0] ? Gender::male : Gender::female; }
  bool normalized(double tol = 1e-6) const {
    return probs[0] >= 0 && probs[1] >= 0 && std::abs(probs[0] + probs[1] - 1.0) <= tol;
  }
};

/// Sum over ages of age * probability.
inline double expected_age(const AgeDistribution& p) {
  double m = 0;
  for (int i = 0; i < kNumAges; ++i) m += i * p.probs[i];
  return m;
}

inline constexpr int kNumAgeGroups = 7;
inline constexpr std::array<int, kNumAgeGroups> kAgeGroupLower{0, 3, 8, 13, 20, 37, 66};
inline constexpr std::array<const char*, kNumAgeGroups> kAgeGroupNames{
    "0-2", "3-7", "8-12", "13-19", "20-36", "37-65", "66+"};

struct AgeGroup {
  int index = 0;
  const char* name() const { return kAgeGroupNames[index]; }
  bool operator==(const AgeGroup&) const = default;
};

/// Continuous ages are floored before lookup.
inline AgeGroup to_age_group(double age) {
  if (!(age >= 0)) throw std::invalid_argument("to_age_group: negative or NaN age");
  const int a = static_cast<int>(std::floor(age));
  int g = 0;
  for (int i = 0; i < kNumAgeGroups; ++i)
    if (a >= kAgeGroupLower[i]) g = i;
  return {g};
}

}  // namespace crowdage
