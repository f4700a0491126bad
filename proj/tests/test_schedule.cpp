#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "costi/schedule.hpp"

using namespace costi;

TEST(SigmaGrid, FiveLevelReferenceValues) {
  const auto g = sigma_grid(NoiseSchedule{}.with_n(5));
  const std::vector<double> expect{0.002, 0.169752756269, 2.51521897615, 17.5278319646, 80.0};
  ASSERT_EQ(g.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g[i], expect[i], 1e-9 * std::max(1.0, expect[i]));
}

TEST(SigmaGrid, EndpointsAndMonotoneForAllSizes) {
  for (std::size_t n : {2u, 3u, 10u, 200u, 1280u}) {
    const auto g = sigma_grid(NoiseSchedule{}.with_n(n));
    ASSERT_EQ(g.size(), n);
    EXPECT_EQ(g.front(), 0.002);
    EXPECT_EQ(g.back(), 80.0);
    for (std::size_t i = 1; i < n; ++i) ASSERT_LT(g[i - 1], g[i]) << "N=" << n << " i=" << i;
  }
}

TEST(SigmaGrid, RejectsInvalidSchedules) {
  EXPECT_THROW(sigma_grid(NoiseSchedule{}.with_n(1)), std::invalid_argument);
  NoiseSchedule bad;
  bad.sigma_min = 100.0;
  EXPECT_THROW(sigma_grid(bad), std::invalid_argument);
  bad = NoiseSchedule{};
  bad.rho = 0.0;
  EXPECT_THROW(sigma_grid(bad), std::invalid_argument);
}

TEST(Scalings, BoundaryIsExact) {
  const NoiseSchedule s;
  const auto b = scalings(s.sigma_min, s);
  EXPECT_EQ(b.c_skip, 1.0);
  EXPECT_EQ(b.c_out, 0.0);
}

TEST(Scalings, ReferenceValues) {
  const NoiseSchedule s;
  const auto top = scalings(80.0, s);
  EXPECT_NEAR(top.c_in, 0.0124997558665, 1e-12);
  EXPECT_NEAR(top.c_noise, 1.09550665867, 1e-10);
  EXPECT_NEAR(scalings(0.5, s).c_skip, 0.502003999968, 1e-11);
  EXPECT_THROW(scalings(0.001, s), std::out_of_range);
  EXPECT_THROW(scalings(81.0, s), std::out_of_range);
}

TEST(Scalings, SkipDecreasesOutputGrows) {
  const NoiseSchedule s;
  const auto g = sigma_grid(s.with_n(50));
  for (std::size_t i = 1; i < g.size(); ++i) {
    const auto a = scalings(g[i - 1], s), b = scalings(g[i], s);
    EXPECT_LT(b.c_skip, a.c_skip);
    EXPECT_GT(b.c_out, a.c_out);
    EXPECT_LT(b.c_in, a.c_in);
  }
}

TEST(LossWeight, InverseGridSpacing) {
  const auto g2 = sigma_grid(NoiseSchedule{}.with_n(2));
  EXPECT_NEAR(loss_weight(0, g2), 0.0125003125078, 1e-13);
  EXPECT_THROW(loss_weight(1, g2), std::out_of_range);
  const auto g = sigma_grid(NoiseSchedule{}.with_n(10));
  for (std::size_t i = 0; i + 1 < g.size(); ++i) EXPECT_DOUBLE_EQ(loss_weight(i, g) * (g[i + 1] - g[i]), 1.0);
}

TEST(PseudoHuber, ReferenceValueAndProperties) {
  const Tensor<double> r({2}, {0.6, 0.8}), z = Tensor<double>::zeros({2});
  EXPECT_NEAR(pseudo_huber(r, z, 0.1).item(), 0.904987562112, 1e-12);
  EXPECT_EQ(pseudo_huber(r, r, 0.1).item(), 0.0);
  EXPECT_NEAR(pseudo_huber_constant(24 * 8, 0.00054), 0.00054 * std::sqrt(192.0), 1e-15);
  EXPECT_THROW(pseudo_huber(r, z, 0.0), std::invalid_argument);
  EXPECT_THROW(pseudo_huber(r, Tensor<double>::zeros({3}), 0.1), ShapeError);
  const auto e = pseudo_huber_elementwise(r, z, 0.1);
  EXPECT_NEAR(e[0], std::sqrt(0.36 + 0.01) - 0.1, 1e-15);
  EXPECT_NEAR(e[1], std::sqrt(0.64 + 0.01) - 0.1, 1e-15);
}

TEST(NoiseLevelSampler, WeightsSumToOneForAllSizes) {
  for (std::size_t n : {2u, 10u, 200u, 1280u}) {
    const NoiseLevelSampler s(sigma_grid(NoiseSchedule{}.with_n(n)));
    const auto& w = s.weights();
    ASSERT_EQ(w.size(), n - 1);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    for (double v : w) EXPECT_GT(v, 0.0);
  }
}

TEST(NoiseLevelSampler, TenLevelReferenceWeights) {
  const NoiseLevelSampler s(sigma_grid(NoiseSchedule{}.with_n(10)));
  const std::vector<double> expect{0.07683723338, 0.2203881945,  0.2706995024,  0.2076354905,  0.1212373925,
                                   0.06012866195, 0.0270014492,  0.01141523435, 0.004656841106};
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(s.weights()[i], expect[i], 1e-9);
}

TEST(NoiseLevelSampler, EmpiricalFrequenciesMatchWeights) {
  const NoiseLevelSampler s(sigma_grid(NoiseSchedule{}.with_n(10)));
  Rng rng(3);
  std::vector<double> counts(9, 0.0);
  const int draws = 200000;
  for (int i = 0; i < draws; ++i) counts[s.sample(rng)] += 1.0;
  for (std::size_t i = 0; i < 9; ++i) {
    const double p = s.weights()[i];
    EXPECT_NEAR(counts[i] / draws, p, 5.0 * std::sqrt(p * (1 - p) / draws) + 1e-6);
  }
}

namespace {

const CurriculumKind kAllKinds[] = {CurriculumKind::linear, CurriculumKind::constant, CurriculumKind::original,
                                    CurriculumKind::exponential, CurriculumKind::pretrain_exponential};

}  // namespace

TEST(Curriculum, StartEndAndMonotone) {
  for (auto kind : kAllKinds) {
    CurriculumSchedule c;
    c.kind = kind;
    c.total_steps = 10000;
    const std::size_t start = curriculum_n(0, c);
    switch (kind) {
      case CurriculumKind::linear: EXPECT_EQ(start, 10u); break;
      case CurriculumKind::constant: EXPECT_EQ(start, 200u); break;
      case CurriculumKind::original: EXPECT_EQ(start, 2u); break;
      case CurriculumKind::exponential: EXPECT_EQ(start, 10u); break;
      case CurriculumKind::pretrain_exponential: EXPECT_EQ(start, 2u); break;
    }
    EXPECT_EQ(curriculum_n(10000, c), 200u) << to_string(kind);
    std::size_t prev = start;
    for (std::size_t k = 1; k <= 10000; ++k) {
      const std::size_t n = curriculum_n(k, c);
      ASSERT_GE(n, prev) << to_string(kind) << " k=" << k;
      ASSERT_LE(n, 200u);
      prev = n;
    }
  }
}

TEST(Curriculum, ReferenceSteps) {
  CurriculumSchedule c;
  c.total_steps = 100;
  EXPECT_EQ(curriculum_n(50, c), 105u);
  c.kind = CurriculumKind::exponential;
  // period floor(100 / (log2(20) + 1)) = 18
  EXPECT_EQ(curriculum_n(17, c), 10u);
  EXPECT_EQ(curriculum_n(18, c), 20u);
  EXPECT_EQ(curriculum_n(36, c), 40u);
  EXPECT_EQ(curriculum_n(72, c), 160u);
  EXPECT_EQ(curriculum_n(90, c), 200u);
  c.kind = CurriculumKind::pretrain_exponential;
  EXPECT_EQ(curriculum_n(33, c), 2u);
  EXPECT_EQ(curriculum_n(34, c), 10u);
}

TEST(Curriculum, RejectsBadArguments) {
  CurriculumSchedule c;
  c.total_steps = 10;
  EXPECT_THROW(curriculum_n(11, c), std::out_of_range);
  c.s0 = 1;
  EXPECT_THROW(curriculum_n(0, c), std::invalid_argument);
  EXPECT_THROW(parse_curriculum("cosine"), std::invalid_argument);
  for (auto kind : kAllKinds) EXPECT_EQ(parse_curriculum(to_string(kind)), kind);
}
