// SPDX-License-Identifier: Apache-2.0
#include "flatmae/synth.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace fm = flatmae;

TEST(SynthMesh, DeterministicPerSeed) {
  auto a = fm::make_synth_mesh(150, 9);
  auto b = fm::make_synth_mesh(150, 9);
  ASSERT_EQ(a.vertex_count(), b.vertex_count());
  for (std::size_t i = 0; i < a.vertex_count(); ++i) {
    EXPECT_EQ(a.vertex_xyz[i], b.vertex_xyz[i]);
  }
  EXPECT_EQ(a.triangles, b.triangles);
  auto c = fm::make_synth_mesh(150, 10);
  EXPECT_NE(a.vertex_xyz, c.vertex_xyz);
}

TEST(SynthMesh, VertexCountAsRequested) {
  for (std::size_t n : {3u, 7u, 24u, 100u, 137u, 500u}) {
    auto mesh = fm::make_synth_mesh(n, 1);
    EXPECT_EQ(mesh.vertex_count(), n);
  }
  EXPECT_THROW(fm::make_synth_mesh(2, 1), fm::ConfigError);
}

TEST(SynthMesh, ValidVerticesInPlane) {
  auto mesh = fm::make_synth_mesh(220, 4);
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    if (mesh.valid_vertex[i])
      EXPECT_EQ(mesh.vertex_xyz[i][2], 0.0f);
    else
      EXPECT_NE(mesh.vertex_xyz[i][2], 0.0f);
  }
  // annulus: there is a hole, so some interior is uncovered
  EXPECT_GT(mesh.triangle_count(), 0u);
}

TEST(SynthRun, DeterministicPerSeed) {
  auto mesh = fm::make_synth_mesh(100, 2);
  fm::SynthSpec spec;
  spec.seed = 5;
  spec.run_length = 32;
  auto a = fm::make_run(mesh, spec, 0, 3);
  auto b = fm::make_run(mesh, spec, 0, 3);
  EXPECT_EQ(a.run.values, b.run.values);
  auto c = fm::make_run(mesh, spec, 0, 4);
  EXPECT_NE(a.run.values, c.run.values);
}

TEST(SynthRun, HighSnrApproachesCleanLatent) {
  auto mesh = fm::make_synth_mesh(100, 3);
  fm::SynthSpec spec;
  spec.seed = 6;
  spec.run_length = 32;
  spec.snr = 1e9;
  auto r = fm::make_run(mesh, spec, 0, 1);
  for (std::size_t i = 0; i < r.run.values.size(); ++i)
    EXPECT_NEAR(r.run.values[i], r.clean[i], 1e-6);
}

TEST(SynthRun, InvalidClassRejected) {
  auto mesh = fm::make_synth_mesh(60, 1);
  fm::SynthSpec spec;
  EXPECT_THROW(fm::make_run(mesh, spec, 5, 0), fm::ConfigError);
}

// Regressing the noisy run onto the stored clean latent must explain about
// snr^2 / (1 + snr^2) of the variance.
TEST(SynthRun, CleanSignalRetrievability) {
  auto mesh = fm::make_synth_mesh(200, 7);
  for (double snr : {0.5, 1.0, 2.0}) {
    fm::SynthSpec spec;
    spec.seed = 11;
    spec.snr = snr;
    spec.run_length = 64;
    double r2_sum = 0.0;
    const int trials = 5;
    for (int trial = 0; trial < trials; ++trial) {
      auto r = fm::make_run(mesh, spec, 0, 100 + trial);
      // least squares of x on clean over valid vertices
      double sxy = 0.0, sxx = 0.0, syy = 0.0, sy = 0.0, sx = 0.0;
      std::size_t n = 0;
      for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
        if (!mesh.valid_vertex[v]) continue;
        for (std::size_t t = 0; t < spec.run_length; ++t) {
          double x = r.clean[v * spec.run_length + t];
          double y = r.run.values[v * spec.run_length + t];
          sx += x;
          sy += y;
          sxx += x * x;
          syy += y * y;
          sxy += x * y;
          ++n;
        }
      }
      double mx = sx / n, my = sy / n;
      double cov = sxy / n - mx * my;
      double vx = sxx / n - mx * mx;
      double vy = syy / n - my * my;
      double beta = cov / vx;
      double ss_res = vy - beta * cov;
      r2_sum += 1.0 - ss_res / vy;
    }
    double r2 = r2_sum / trials;
    double expected = snr * snr / (1.0 + snr * snr);
    EXPECT_NEAR(r2, expected, 0.05) << "snr " << snr;
  }
}

TEST(SynthRun, OrthogonalProfilesSeparateParcelFeatures) {
  auto mesh = fm::make_synth_mesh(200, 8);
  fm::SynthSpec spec;
  spec.seed = 13;
  spec.components = 4;
  spec.classes = 2;
  spec.snr = 4.0;
  spec.run_length = 48;
  spec.class_profiles = {{2.0, 0.0, 2.0, 0.0}, {0.0, 2.0, 0.0, 2.0}};
  // per-class mean power in the first component's spatial profile differs
  auto comps_power = [&](std::uint32_t cls, std::uint64_t seed) {
    auto r = fm::make_run(mesh, spec, cls, seed);
    // project run onto a crude indicator: variance of vertex 'hot' set
    double power = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
      if (!mesh.valid_vertex[v]) continue;
      for (std::size_t t = 0; t < spec.run_length; ++t) {
        double x = r.run.values[v * spec.run_length + t];
        power += x * x;
        ++n;
      }
    }
    return power / double(n);
  };
  // both classes produce unit-variance-ish runs; separability is exercised
  // end to end in the probe tests, here we only check the recipe runs
  EXPECT_GT(comps_power(0, 1), 0.5);
  EXPECT_GT(comps_power(1, 1), 0.5);
}
