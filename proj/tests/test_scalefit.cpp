// SPDX-License-Identifier: Apache-2.0
#include "flatmae/scalefit.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "flatmae/rng.hpp"

namespace fm = flatmae;

TEST(SelectPoints, MonotoneDecreasingTakesLastEpoch) {
  auto p = fm::select_point(1000, {3.0, 2.0, 1.5, 1.2});
  EXPECT_EQ(p.epoch, 3u);
  EXPECT_EQ(p.loss, 1.2);
}

TEST(SelectPoints, VShapedTakesValley) {
  auto p = fm::select_point(1000, {3.0, 1.1, 2.5, 2.6});
  EXPECT_EQ(p.epoch, 1u);
  EXPECT_EQ(p.loss, 1.1);
}

TEST(SelectPoints, TiesTakeEarliestEpoch) {
  auto p = fm::select_point(1000, {2.0, 1.5, 1.5, 3.0});
  EXPECT_EQ(p.epoch, 1u);
}

TEST(FitPowerLaw, ExactCurveRecovered) {
  std::vector<fm::ScalePoint> pts;
  for (double n : {1e3, 1e4, 1e5, 1e6, 1e7}) pts.push_back({n, 2.0 * std::pow(n, -0.1), 0});
  auto fit = fm::fit_power_law(pts);
  EXPECT_NEAR(fit.a, 2.0, 1e-9);
  EXPECT_NEAR(fit.b, -0.1, 1e-9);
  EXPECT_NEAR(fit.r2, 1.0, 1e-9);
}

TEST(FitPowerLaw, TwoPointsInterpolateExactly) {
  std::vector<fm::ScalePoint> pts = {{100, 3.0, 0}, {10000, 1.0, 0}};
  auto fit = fm::fit_power_law(pts);
  EXPECT_NEAR(fm::predict(fit, 100), 3.0, 1e-12);
  EXPECT_NEAR(fm::predict(fit, 10000), 1.0, 1e-12);
  EXPECT_NEAR(fit.r2, 1.0, 1e-12);
}

TEST(FitPowerLaw, InsufficientPointsRejected) {
  std::vector<fm::ScalePoint> pts = {{100, 3.0, 0}};
  EXPECT_THROW(fm::fit_power_law(pts), fm::ConfigError);
  std::vector<fm::ScalePoint> pts5;
  for (double n : {1e2, 1e3, 1e4, 1e5, 1e6}) pts5.push_back({n, std::pow(n, -0.2), 0});
  EXPECT_NO_THROW(fm::fit_power_law(pts5, 3));
  EXPECT_THROW(fm::fit_power_law(pts5, 1), fm::ConfigError);
}

TEST(FitPowerLaw, NoisyExponentRecoveredAcrossSeeds) {
  // 1% multiplicative log-normal noise on 6 points; the exponent must come
  // back within +/-0.01 on every seed.
  const double a = 1.7, b = -0.12;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    fm::CounterRng rng(seed);
    std::vector<fm::ScalePoint> pts;
    for (double n : {1e3, 3e3, 1e4, 3e4, 1e5, 3e5}) {
      double noise = std::exp(0.01 * rng.next_gauss());
      pts.push_back({n, a * std::pow(n, b) * noise, 0});
    }
    auto fit = fm::fit_power_law(pts);
    EXPECT_NEAR(fit.b, b, 0.01) << "seed " << seed;
  }
}

TEST(FitPowerLaw, TruncatedFitFlagsSaturation) {
  // saturating curve: loss = a*n^b + floor; fit on first 3 sizes only, then
  // held-out large-n points sit above the prediction
  const double a = 5.0, b = -0.25, floor = 0.5;
  std::vector<fm::ScalePoint> pts;
  for (double n : {1e3, 3e3, 1e4, 1e5, 1e6, 1e7})
    pts.push_back({n, a * std::pow(n, b) + floor, 0});
  auto fit = fm::fit_power_law(pts, 3);
  for (std::size_t i = 3; i < pts.size(); ++i)
    EXPECT_GT(fm::relative_residual(fit, pts[i]), 0.0) << "point " << i;
}

TEST(Predict, Identities) {
  fm::PowerLawFit fit{2.0, -0.1, 1.0};
  EXPECT_NEAR(fm::predict(fit, 1.0), 2.0, 1e-12);
  double n_unit = std::pow(2.0, 10.0);  // a^(-1/b) = 2^10
  EXPECT_NEAR(fm::predict(fit, n_unit), 1.0, 1e-12);
  EXPECT_THROW(fm::predict(fit, 0.0), fm::ConfigError);
}

TEST(Predict, ResidualSignConvention) {
  fm::PowerLawFit fit{2.0, -0.1, 1.0};
  fm::ScalePoint above{1.0, 3.0, 0};
  fm::ScalePoint below{1.0, 1.0, 0};
  EXPECT_GT(fm::relative_residual(fit, above), 0.0);
  EXPECT_LT(fm::relative_residual(fit, below), 0.0);
}

TEST(FitPowerLaw, ScaleEquivariance) {
  fm::CounterRng rng(42);
  std::vector<fm::ScalePoint> pts;
  for (double n : {1e3, 1e4, 1e5, 1e6})
    pts.push_back({n, 3.0 * std::pow(n, -0.15) * std::exp(0.05 * rng.next_gauss()), 0});
  auto fit = fm::fit_power_law(pts);
  const double c = 7.5;
  auto scaled = pts;
  for (auto& p : scaled) p.n *= c;
  auto fit2 = fm::fit_power_law(scaled);
  EXPECT_NEAR(fit2.b, fit.b, 1e-9);
  EXPECT_NEAR(fit2.a, fit.a * std::pow(c, -fit.b), 1e-9 * fit.a);
}

TEST(FitPowerLaw, InvalidPointsRejected) {
  std::vector<fm::ScalePoint> pts = {{0.0, 1.0, 0}, {10, 1.0, 0}};
  EXPECT_THROW(fm::fit_power_law(pts), fm::ValidationError);
  std::vector<fm::ScalePoint> neg = {{10, -1.0, 0}, {100, 1.0, 0}};
  EXPECT_THROW(fm::fit_power_law(neg), fm::ValidationError);
}
