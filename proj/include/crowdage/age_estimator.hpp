#pragma once
// Age/gender sub-network. A residual CNN over the face crop; at the first
// block whose output reaches 1/16 of the crop size, the ROI-sampled detector
// feature is concatenated along channels. Two heads (1x1 conv, global average
// pooling, dropout, fully connected) produce 101-way age and 2-way gender
// logits.

#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crowdage/autograd.hpp"
#include "crowdage/distributions.hpp"
#include "crowdage/nn.hpp"
#include "crowdage/planar.hpp"

namespace crowdage {

inline constexpr int kFusionStride = 16;

struct AgeNetConfig {
  int crop_w = 64;
  int crop_h = 80;
  int stem_width = 16;
  int stem_stride = 2;
  std::vector<int> stage_widths{24, 32, 64, 64};
  std::vector<int> stage_blocks{1, 1, 1, 1};
  std::vector<int> stage_strides{2, 2, 2, 1};
  int head_channels = 64;
  double dropout = 0.2;
  bool intermediate_connection = true;
  int fusion_channels = 32;

  int fusion_h() const { return crop_h / kFusionStride; }
  int fusion_w() const { return crop_w / kFusionStride; }

  /// (stage, block) of the first block whose cumulative stride is 16.
  std::pair<int, int> fusion_block() const {
    int stride = stem_stride;
    for (std::size_t s = 0; s < stage_strides.size(); ++s) {
      stride *= stage_strides[s];
      if (stride == kFusionStride) return {static_cast<int>(s), 0};
      if (stride > kFusionStride) break;
    }
    throw std::invalid_argument("age network never reaches stride 16");
  }

  void validate() const {
    if (crop_w <= 0 || crop_h <= 0 || crop_w % kFusionStride || crop_h % kFusionStride)
      throw std::invalid_argument("crop size must be a positive multiple of 16");
    if (stage_widths.size() != stage_blocks.size() || stage_widths.size() != stage_strides.size())
      throw std::invalid_argument("stage vectors must have equal length");
    for (std::size_t i = 0; i < stage_widths.size(); ++i)
      if (stage_widths[i] <= 0 || stage_blocks[i] <= 0 || stage_strides[i] < 1 || stage_strides[i] > 2)
        throw std::invalid_argument("invalid stage definition");
    if (stem_stride != 2 && stem_stride != 4) throw std::invalid_argument("stem_stride must be 2 or 4");
    if (dropout < 0 || dropout >= 1) throw std::invalid_argument("dropout must be in [0,1)");
    const auto [fs, fb] = fusion_block();
    if (intermediate_connection && stage_widths[fs] <= fusion_channels)
      throw std::invalid_argument("fusion stage must be wider than the concatenated feature");
    (void)fb;
  }
  bool operator==(const AgeNetConfig&) const = default;
};

template <class T>
struct AgeLogits {
  ag::Var<T> age;     // 101
  ag::Var<T> gender;  // 2
};

struct AgeNet {
  AgeNetConfig config;
  nn::Conv stem;
  std::vector<std::vector<nn::ResidualBlock>> stages;
  nn::Conv age_conv, gender_conv;
  nn::Linear age_fc, gender_fc;

  template <class T>
  static AgeNet build(nn::ParamStore<T>& store, const AgeNetConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    AgeNet n;
    n.config = cfg;
    n.stem = nn::Conv::make(store, "age.stem", 3, cfg.stem_width, 3, cfg.stem_stride, rng);
    const auto [fs, fb] = cfg.fusion_block();
    int in = cfg.stem_width;
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
      std::vector<nn::ResidualBlock> blocks;
      for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
        const bool fusion = static_cast<int>(s) == fs && b == fb;
        // The fused block gives up as many channels as the concatenation adds.
        const int out = cfg.stage_widths[s] - (fusion && cfg.intermediate_connection ? cfg.fusion_channels : 0);
        const int stride = b == 0 ? cfg.stage_strides[s] : 1;
        blocks.push_back(nn::ResidualBlock::make(
            store, "age.s" + std::to_string(s) + ".b" + std::to_string(b), in, out, stride, rng));
        in = cfg.stage_widths[s];
      }
      n.stages.push_back(std::move(blocks));
    }
    n.age_conv = nn::Conv::make(store, "age.head_age.conv", in, cfg.head_channels, 1, 1, rng);
    n.age_fc = nn::Linear::make(store, "age.head_age.fc", cfg.head_channels, kNumAges, rng);
    n.gender_conv = nn::Conv::make(store, "age.head_gender.conv", in, cfg.head_channels, 1, 1, rng);
    n.gender_fc = nn::Linear::make(store, "age.head_gender.fc", cfg.head_channels, 2, rng);
    return n;
  }

  /// `crop` is 3 x crop_h x crop_w; `roi` is fusion_channels x fusion_h x
  /// fusion_w and required exactly when the connection is enabled.
  template <class T>
  AgeLogits<T> forward(nn::Binding<T>& p, const ag::Var<T>& crop, const std::optional<ag::Var<T>>& roi,
                       bool training, std::mt19937_64& rng) const {
    const auto& cfg = config;
    if (crop.shape() != ag::Shape{3, cfg.crop_h, cfg.crop_w})
      throw std::invalid_argument("age network: crop has the wrong shape");
    if (cfg.intermediate_connection != roi.has_value())
      throw std::invalid_argument("age network: roi feature presence does not match configuration");
    if (roi && roi->shape() != ag::Shape{cfg.fusion_channels, cfg.fusion_h(), cfg.fusion_w()})
      throw std::invalid_argument("age network: roi feature has the wrong shape");
    const auto [fs, fb] = cfg.fusion_block();
    ag::Var<T> x = ag::relu(stem(p, crop));
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t b = 0; b < stages[s].size(); ++b) {
        x = stages[s][b](p, x);
        if (roi && static_cast<int>(s) == fs && static_cast<int>(b) == fb) x = ag::concat_channels(x, *roi);
      }
    auto head = [&](const nn::Conv& conv, const nn::Linear& fc) {
      auto h = ag::global_avg_pool(ag::relu(conv(p, x)));
      return fc(p, ag::dropout(h, cfg.dropout, training, rng));
    };
    return {head(age_conv, age_fc), head(gender_conv, gender_fc)};
  }
};

template <class T>
AgeDistribution to_age_distribution(const ag::Var<T>& logits) {
  const auto p = ag::softmax_values<T>(logits.value());
  return AgeDistribution::from_probs<T>(p);
}

template <class T>
GenderDistribution to_gender_distribution(const ag::Var<T>& logits) {
  const auto p = ag::softmax_values<T>(logits.value());
  return {{static_cast<double>(p[0]), static_cast<double>(p[1])}};
}

/// Inference on plain arrays (dropout disabled).
template <class T>
std::pair<AgeDistribution, GenderDistribution> predict_age(const AgeNet& net, const nn::ParamStore<T>& params,
                                                           const Planar<T>& crop,
                                                           const std::optional<Planar<T>>& roi) {
  nn::Binding<T> p(params, false);
  std::mt19937_64 unused(0);
  std::optional<ag::Var<T>> roi_var;
  if (roi) roi_var = ag::from_planar(*roi);
  const auto out = net.forward(p, ag::from_planar(crop), roi_var, false, unused);
  return {to_age_distribution(out.age), to_gender_distribution(out.gender)};
}

}  // namespace crowdage
