#pragma once

#include <stdexcept>

namespace crowdage {

struct LossWeights {
  double lambda_size = 0.1;
  double lambda_off = 1.0;
  double lambda_mean = 0.01;
  double lambda_var = 0.0025;
  double lambda_ce = 0.05;
  double lambda_gen = 0.1;
  double th_iou = 0.3;

  void validate() const {
    if (lambda_size < 0 || lambda_off < 0 || lambda_mean < 0 || lambda_var < 0 || lambda_ce < 0 ||
        lambda_gen < 0)
      throw std::invalid_argument("LossWeights: weights must be non-negative");
    if (!(th_iou >= 0 && th_iou < 1)) throw std::invalid_argument("LossWeights: th_iou must be in [0,1)");
  }
  bool operator==(const LossWeights&) const = default;
};

inline constexpr double kProbClamp = 1e-12;

}  // namespace crowdage
