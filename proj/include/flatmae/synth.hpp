// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/flatgeo.hpp"
#include "flatmae/prep.hpp"
#include "flatmae/rng.hpp"

namespace flatmae {

// Deterministic planar test mesh: a jittered triangulated annulus (disc
// with a hole, emulating flat-map cut topology) padded with invalid
// vertices to hit the requested count exactly. Meshes below 8 vertices
// degrade to a single triangle.
inline FlatMesh make_synth_mesh(std::size_t n_vertices, std::uint64_t seed) {
  if (n_vertices < 3) throw ConfigError("mesh needs >= 3 vertices");
  FlatMesh mesh;
  CounterRng rng(CounterRng::mix_seed(seed, 0x6d657368));  // "mesh" stream

  if (n_vertices < 8) {
    mesh.vertex_xyz = {{0.f, 0.f, 0.f}, {1.f, 0.f, 0.f}, {0.35f, 0.9f, 0.f}};
    mesh.triangles = {{0, 1, 2}};
    mesh.valid_vertex = {1, 1, 1};
  } else {
    const double r_in = 0.35, r_out = 1.0;
    std::size_t rings = std::max<std::size_t>(
        2, static_cast<std::size_t>(std::sqrt(static_cast<double>(n_vertices)) / 3.0 + 0.5));
    std::size_t segments = n_vertices / rings;
    while (segments < 3 && rings > 2) segments = n_vertices / --rings;
    double ring_gap = (r_out - r_in) / static_cast<double>(rings - 1);
    double seg_angle = 6.283185307179586 / static_cast<double>(segments);
    for (std::size_t k = 0; k < rings; ++k) {
      for (std::size_t j = 0; j < segments; ++j) {
        double r = r_in + ring_gap * static_cast<double>(k) +
                   0.25 * ring_gap * (2.0 * rng.next_unit() - 1.0);
        double a = seg_angle * static_cast<double>(j) +
                   0.25 * seg_angle * (2.0 * rng.next_unit() - 1.0);
        mesh.vertex_xyz.push_back(
            {static_cast<float>(r * std::cos(a)), static_cast<float>(r * std::sin(a)), 0.f});
        mesh.valid_vertex.push_back(1);
      }
    }
    auto idx = [&](std::size_t k, std::size_t j) {
      return static_cast<std::uint32_t>(k * segments + j % segments);
    };
    for (std::size_t k = 0; k + 1 < rings; ++k) {
      for (std::size_t j = 0; j < segments; ++j) {
        mesh.triangles.push_back({idx(k, j), idx(k, j + 1), idx(k + 1, j)});
        mesh.triangles.push_back({idx(k, j + 1), idx(k + 1, j + 1), idx(k + 1, j)});
      }
    }
  }
  // invalid padding to hit the exact vertex count
  std::uint32_t pad_i = 0;
  while (mesh.vertex_xyz.size() < n_vertices) {
    mesh.vertex_xyz.push_back({0.f, 0.f, 1.f + static_cast<float>(pad_i++)});
    mesh.valid_vertex.push_back(0);
  }
  mesh.validate();
  return mesh;
}

// Synthetic dataset recipe: K smooth spatial components with class-dependent
// amplitude profiles, smooth temporal drivers, Gaussian noise at 1/snr.
struct SynthSpec {
  std::uint32_t mesh_vertices = 200;
  std::uint32_t components = 4;
  std::uint32_t classes = 2;
  std::uint32_t run_length = 64;
  double snr = 1.0;
  double tr = 1.0;
  std::uint64_t seed = 0;
  // classes x components amplitudes; empty selects the default profile
  std::vector<std::vector<double>> class_profiles;

  void validate() const {
    if (components < 1) throw ConfigError("components must be >= 1");
    if (!(snr > 0.0)) throw ConfigError("snr must be > 0");
    if (classes < 1) throw ConfigError("classes must be >= 1");
    if (run_length < 2) throw ConfigError("run_length must be >= 2");
  }

  double amplitude(std::uint32_t class_id, std::uint32_t k) const {
    if (!class_profiles.empty()) return class_profiles[class_id][k];
    return (k % classes == class_id) ? 1.5 : 0.5;
  }
};

struct SynthRun {
  SurfaceRun run;             // noisy observation
  std::vector<double> clean;  // standardized clean signal, same layout
  std::uint32_t class_id = 0;
};

namespace detail {

// Gaussian radial bumps in flat coordinates; broad enough that patch
// neighborhoods share signal.
struct SpatialComponent {
  double cx, cy, sigma;
  double eval(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
  }
};

inline std::vector<SpatialComponent> make_components(const SynthSpec& spec) {
  CounterRng rng(CounterRng::mix_seed(spec.seed, 0x636f6d70));  // shared across runs
  std::vector<SpatialComponent> comps(spec.components);
  for (auto& c : comps) {
    double r = 0.45 + 0.45 * rng.next_unit();
    double a = 6.283185307179586 * rng.next_unit();
    c.cx = r * std::cos(a);
    c.cy = r * std::sin(a);
    c.sigma = 0.35;
  }
  return comps;
}

}  // namespace detail

// Generates one run: values = sum_k amp(class,k) * spatial_k (x) temporal_k,
// standardized to unit variance over valid vertices, plus N(0, 1/snr) noise.
// The clean latent sum is retained for oracle checks.
inline SynthRun make_run(const FlatMesh& mesh, const SynthSpec& spec, std::uint32_t class_id,
                         std::uint64_t run_seed) {
  spec.validate();
  if (class_id >= spec.classes) throw ConfigError("class_id out of range");
  const std::size_t v_count = mesh.vertex_count();
  const std::size_t t_count = spec.run_length;

  auto comps = detail::make_components(spec);

  // per-component spatial fields over valid vertices
  std::vector<double> spatial(spec.components * v_count, 0.0);
  for (std::uint32_t k = 0; k < spec.components; ++k)
    for (std::size_t v = 0; v < v_count; ++v)
      if (mesh.valid_vertex[v])
        spatial[k * v_count + v] = comps[k].eval(mesh.vertex_xyz[v][0], mesh.vertex_xyz[v][1]);

  // smooth temporal drivers, new draw per run
  CounterRng trng(CounterRng::mix_seed(spec.seed, run_seed, 0x74656d70));
  std::vector<double> temporal(spec.components * t_count);
  for (std::uint32_t k = 0; k < spec.components; ++k) {
    double f1 = 1.0 + 5.0 * trng.next_unit();
    double f2 = 1.0 + 5.0 * trng.next_unit();
    double p1 = 6.283185307179586 * trng.next_unit();
    double p2 = 6.283185307179586 * trng.next_unit();
    for (std::size_t t = 0; t < t_count; ++t) {
      double u = static_cast<double>(t) / static_cast<double>(t_count);
      temporal[k * t_count + t] =
          std::sin(6.283185307179586 * f1 * u + p1) + 0.6 * std::sin(6.283185307179586 * f2 * u + p2);
    }
  }

  SynthRun out;
  out.class_id = class_id;
  out.clean.assign(v_count * t_count, 0.0);
  for (std::uint32_t k = 0; k < spec.components; ++k) {
    double amp = spec.amplitude(class_id, k);
    for (std::size_t v = 0; v < v_count; ++v) {
      double sp = amp * spatial[k * v_count + v];
      if (sp == 0.0) continue;
      double* row = out.clean.data() + v * t_count;
      const double* tv = temporal.data() + k * t_count;
      for (std::size_t t = 0; t < t_count; ++t) row[t] += sp * tv[t];
    }
  }

  // standardize the clean signal over valid vertices
  double mean = 0.0, count = 0.0;
  for (std::size_t v = 0; v < v_count; ++v) {
    if (!mesh.valid_vertex[v]) continue;
    for (std::size_t t = 0; t < t_count; ++t) mean += out.clean[v * t_count + t];
    count += static_cast<double>(t_count);
  }
  mean /= count;
  double var = 0.0;
  for (std::size_t v = 0; v < v_count; ++v) {
    if (!mesh.valid_vertex[v]) continue;
    for (std::size_t t = 0; t < t_count; ++t) {
      double d = out.clean[v * t_count + t] - mean;
      var += d * d;
    }
  }
  var /= count;
  double sd = std::sqrt(var);
  if (sd <= 1e-12) sd = 1.0;
  for (std::size_t v = 0; v < v_count; ++v) {
    double* row = out.clean.data() + v * t_count;
    if (!mesh.valid_vertex[v]) {
      std::fill(row, row + t_count, 0.0);
      continue;
    }
    for (std::size_t t = 0; t < t_count; ++t) row[t] = (row[t] - mean) / sd;
  }

  out.run.n_vertices = v_count;
  out.run.n_timepoints = t_count;
  out.run.tr = spec.tr;
  out.run.values = out.clean;
  CounterRng nrng(CounterRng::mix_seed(spec.seed, run_seed, 0x6e6f6973));
  double noise_sd = 1.0 / spec.snr;
  for (std::size_t v = 0; v < v_count; ++v) {
    if (!mesh.valid_vertex[v]) continue;
    for (std::size_t t = 0; t < t_count; ++t)
      out.run.values[v * t_count + t] += noise_sd * nrng.next_gauss();
  }
  return out;
}

}  // namespace flatmae
