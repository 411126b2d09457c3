#include <gtest/gtest.h>

#include <cmath>

#include "crowdage/model.hpp"
#include "crowdage/synth_data.hpp"
#include "checks.hpp"
#include "gradcheck.hpp"

using namespace crowdage;
using crowdage::testing::random_values;

namespace {

AgeNetConfig small_config(bool connection) {
  AgeNetConfig c;
  c.crop_w = 32;
  c.crop_h = 48;
  c.stem_width = 8;
  c.stage_widths = {12, 24, 48};
  c.stage_blocks = {1, 1, 1};
  c.stage_strides = {2, 2, 2};
  c.head_channels = 16;
  c.fusion_channels = 8;
  c.intermediate_connection = connection;
  return c;
}

struct Fixture {
  AgeNetConfig cfg;
  nn::ParamStore<double> store;
  AgeNet net;
  std::vector<double> crop;

  explicit Fixture(AgeNetConfig c, std::uint64_t seed = 3) : cfg(std::move(c)) {
    std::mt19937_64 rng(seed);
    net = AgeNet::build(store, cfg, rng);
    crop = random_values(3 * cfg.crop_h * cfg.crop_w, seed + 100, 0, 1);
  }

  std::vector<double> roi(std::uint64_t seed) const {
    return random_values(static_cast<std::size_t>(cfg.fusion_channels) * cfg.fusion_h() * cfg.fusion_w(), seed, 0, 2);
  }

  AgeLogits<double> run(const std::optional<std::vector<double>>& r, bool training = false,
                        std::uint64_t dropout_seed = 0) const {
    nn::Binding<double> p(store, false);
    std::mt19937_64 rng(dropout_seed);
    std::optional<ag::Var<double>> rv;
    if (r) rv = ag::constant<double>({cfg.fusion_channels, cfg.fusion_h(), cfg.fusion_w()}, *r);
    return net.forward(p, ag::constant<double>({3, cfg.crop_h, cfg.crop_w}, crop), rv, training, rng);
  }
};

std::vector<double> values(const ag::Var<double>& v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

TEST(AgeNet, OutputSizesAndNormalisation) {
  Fixture f(small_config(true));
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const auto out = f.run(f.roi(s));
    ASSERT_EQ(out.age.size(), 101u);
    ASSERT_EQ(out.gender.size(), 2u);
    const auto a = to_age_distribution(out.age);
    const auto g = to_gender_distribution(out.gender);
    EXPECT_TRUE(a.normalized());
    EXPECT_TRUE(g.normalized());
  }
}

TEST(AgeNet, EvaluationModeIsDeterministic) {
  Fixture f(small_config(true));
  const auto r = f.roi(9);
  EXPECT_EQ(values(f.run(r, false, 1).age), values(f.run(r, false, 2).age));
  EXPECT_NE(values(f.run(r, true, 1).age), values(f.run(r, true, 2).age));
}

TEST(AgeNet, RoiPresenceAndShapeChecked) {
  Fixture on(small_config(true));
  EXPECT_THROW(on.run(std::nullopt), std::invalid_argument);
  nn::Binding<double> p(on.store, false);
  std::mt19937_64 rng(0);
  const auto crop = ag::constant<double>({3, 48, 32}, on.crop);
  const auto bad = ag::constant<double>({8, 2, 3}, std::vector<double>(48, 0.0));
  EXPECT_THROW(on.net.forward(p, crop, std::optional(bad), false, rng), std::invalid_argument);
  const auto bad_crop = ag::constant<double>({3, 32, 32}, std::vector<double>(3 * 32 * 32, 0.0));
  EXPECT_THROW(on.net.forward(p, bad_crop, std::optional(ag::constant<double>({8, 3, 2}, on.roi(1))), false, rng),
               std::invalid_argument);

  Fixture off(small_config(false));
  EXPECT_THROW(off.run(off.roi(1)), std::invalid_argument);
  EXPECT_NO_THROW(off.run(std::nullopt));
}

TEST(AgeNet, FusionGeometry) {
  const auto c = small_config(true);
  EXPECT_EQ(c.fusion_h(), 3);
  EXPECT_EQ(c.fusion_w(), 2);
  const auto full = paper_preset().age;
  EXPECT_EQ(full.fusion_w(), 10);
  EXPECT_EQ(full.fusion_h(), 14);
  EXPECT_EQ(full.fusion_channels, 48);
  EXPECT_EQ(paper_preset().detector.branch_channels, 48);
}

TEST(AgeNet, ZeroWeightAblation) {
  // fusion at stage 2 block 0; the head convs are the only readers downstream
  Fixture f(small_config(true));
  const auto r1 = f.roi(21), r2 = f.roi(22);
  EXPECT_NE(values(f.run(r1).age), values(f.run(r2).age));

  const int width = f.cfg.stage_widths.back(), first_roi = width - f.cfg.fusion_channels;
  for (std::size_t i = 0; i < f.store.size(); ++i) {
    auto& p = f.store[i];
    if (p.name != "age.head_age.conv.weight" && p.name != "age.head_gender.conv.weight") continue;
    ASSERT_EQ(p.shape[1], width);
    for (int o = 0; o < p.shape[0]; ++o)
      for (int c = first_roi; c < width; ++c) p.value[static_cast<std::size_t>(o) * width + c] = 0;
  }
  EXPECT_EQ(values(f.run(r1).age), values(f.run(r2).age));
  EXPECT_EQ(values(f.run(r1).gender), values(f.run(r2).gender));
}

TEST(AgeNet, ZeroWeightAblationThroughAProjectedBlock) {
  auto cfg = small_config(true);
  cfg.stage_widths = {12, 24, 48, 40};
  cfg.stage_blocks = {1, 1, 1, 1};
  cfg.stage_strides = {2, 2, 2, 1};
  Fixture f(cfg);
  const auto r1 = f.roi(31), r2 = f.roi(32);
  EXPECT_NE(values(f.run(r1).age), values(f.run(r2).age));
  for (std::size_t i = 0; i < f.store.size(); ++i) {
    auto& p = f.store[i];
    if (p.name != "age.s3.b0.conv1.weight" && p.name != "age.s3.b0.shortcut.weight") continue;
    const int in = p.shape[1], kk = p.shape[2] * p.shape[3];
    for (int o = 0; o < p.shape[0]; ++o)
      for (int c = 40; c < in; ++c)
        for (int q = 0; q < kk; ++q) p.value[(static_cast<std::size_t>(o) * in + c) * kk + q] = 0;
  }
  EXPECT_EQ(values(f.run(r1).age), values(f.run(r2).age));
}

TEST(AgeNet, ParameterParity) {
  for (auto base : {desk_preset(), paper_preset()}) {
    auto on = base, off = base;
    on.age.intermediate_connection = true;
    off.age.intermediate_connection = false;
    nn::ParamStore<float> s_on, s_off;
    std::mt19937_64 rng(1);
    AgeNet::build(s_on, on.age, rng);
    AgeNet::build(s_off, off.age, rng);
    EXPECT_LE(s_on.scalar_count(), s_off.scalar_count());
  }
}

TEST(ExpectedAge, Examples) {
  EXPECT_DOUBLE_EQ(expected_age(AgeDistribution::one_hot(30)), 30.0);
  EXPECT_NEAR(expected_age(AgeDistribution::uniform()), 50.0, 1e-9);
  AgeDistribution d;
  d.probs[20] = 0.5;
  d.probs[30] = 0.5;
  EXPECT_DOUBLE_EQ(expected_age(d), 25.0);
  for (int a = 0; a <= 100; ++a) EXPECT_DOUBLE_EQ(expected_age(AgeDistribution::one_hot(a)), a);
}

TEST(ExpectedAge, LinearInProbabilities) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  AgeDistribution p, q, mix;
  double sp = 0, sq = 0;
  for (int i = 0; i < 101; ++i) {
    p.probs[i] = u(rng);
    q.probs[i] = u(rng);
    sp += p.probs[i];
    sq += q.probs[i];
  }
  for (int i = 0; i < 101; ++i) {
    p.probs[i] /= sp;
    q.probs[i] /= sq;
    mix.probs[i] = 0.3 * p.probs[i] + 0.7 * q.probs[i];
  }
  EXPECT_NEAR(expected_age(mix), 0.3 * expected_age(p) + 0.7 * expected_age(q), 1e-10);
}

TEST(AgeGroups, Boundaries) {
  EXPECT_EQ(to_age_group(2).index, 0);
  EXPECT_EQ(to_age_group(25).index, 4);
  EXPECT_EQ(to_age_group(37).index, 5);
  EXPECT_EQ(to_age_group(2.99).index, 0);
  EXPECT_EQ(to_age_group(3).index, 1);
  EXPECT_EQ(to_age_group(12.5).index, 2);
  EXPECT_EQ(to_age_group(19).index, 3);
  EXPECT_EQ(to_age_group(36.9).index, 4);
  EXPECT_EQ(to_age_group(65).index, 5);
  EXPECT_EQ(to_age_group(66).index, 6);
  EXPECT_EQ(to_age_group(100).index, 6);
  EXPECT_THROW(to_age_group(-1), std::invalid_argument);
  const int lower[] = {0, 3, 8, 13, 20, 37, 66};
  for (int a = 0; a <= 100; ++a) {
    int g = 0;
    while (g + 1 < 7 && a >= lower[g + 1]) ++g;
    EXPECT_EQ(to_age_group(a).index, g) << a;
  }
}

TEST(Surroundings, DisabledConnectionIgnoresPixelsOutsideCrop) {
  const auto r = crowdage::testing::surroundings_gradient(false);
  ASSERT_LT(r.crop.area(), 0.5 * r.side * r.side);
  EXPECT_GT(r.outside, 0);
  EXPECT_EQ(r.outside_nonzero, 0);
  EXPECT_GT(r.inside_nonzero, 0);
}

TEST(Surroundings, EnabledConnectionSeesPixelsOutsideCrop) {
  const auto r = crowdage::testing::surroundings_gradient(true);
  EXPECT_GT(r.outside_nonzero, 0);
}
