// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/io.hpp"

namespace flatmae {

// Flattened cortical surface mesh. Valid vertices lie in the z = 0 plane;
// vertices with nonzero z are excluded from resampling.
struct FlatMesh {
  std::vector<std::array<float, 3>> vertex_xyz;
  std::vector<std::array<std::uint32_t, 3>> triangles;
  std::vector<std::uint8_t> valid_vertex;

  std::size_t vertex_count() const { return vertex_xyz.size(); }
  std::size_t triangle_count() const { return triangles.size(); }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid_vertex) n += (v != 0);
    return n;
  }

  bool triangle_all_valid(std::size_t f) const {
    const auto& t = triangles[f];
    return valid_vertex[t[0]] && valid_vertex[t[1]] && valid_vertex[t[2]];
  }

  void validate() const {
    if (valid_vertex.size() != vertex_xyz.size())
      throw ValidationError("valid flag count does not match vertex count");
    const std::uint32_t v_count = static_cast<std::uint32_t>(vertex_xyz.size());
    for (std::size_t i = 0; i < vertex_xyz.size(); ++i) {
      if (valid_vertex[i] && vertex_xyz[i][2] != 0.0f)
        throw ValidationError("valid vertex " + std::to_string(i) + " has nonzero z");
    }
    for (std::size_t f = 0; f < triangles.size(); ++f) {
      const auto& t = triangles[f];
      for (int k = 0; k < 3; ++k) {
        if (t[k] >= v_count)
          throw ValidationError("triangle " + std::to_string(f) + " references vertex " +
                                std::to_string(t[k]) + " out of range (" +
                                std::to_string(v_count) + " vertices)");
      }
      if (triangle_all_valid(f)) {
        const auto& a = vertex_xyz[t[0]];
        const auto& b = vertex_xyz[t[1]];
        const auto& c = vertex_xyz[t[2]];
        double area2 = static_cast<double>(b[0] - a[0]) * (c[1] - a[1]) -
                       static_cast<double>(b[1] - a[1]) * (c[0] - a[0]);
        if (area2 == 0.0)
          throw ValidationError("degenerate zero-area triangle " + std::to_string(f));
      }
    }
  }
};

// FMESH1: magic "FMESH1\0", u32 V, u32 F, V*3 f32 coords, F*3 u32 indices,
// V u8 valid flags. Little-endian throughout.
inline constexpr char kMeshMagic[] = "FMESH1";  // 7 bytes with NUL

inline void save_mesh(const FlatMesh& mesh, const std::string& path) {
  if (mesh.vertex_count() == 0) throw ValidationError("refusing to save empty mesh");
  ByteWriter w;
  w.magic(kMeshMagic, 7);
  w.u32(static_cast<std::uint32_t>(mesh.vertex_count()));
  w.u32(static_cast<std::uint32_t>(mesh.triangle_count()));
  w.span(mesh.vertex_xyz.data()->data(), mesh.vertex_count() * 3);
  if (!mesh.triangles.empty()) w.span(mesh.triangles.data()->data(), mesh.triangle_count() * 3);
  w.span(mesh.valid_vertex.data(), mesh.vertex_count());
  w.to_file(path);
}

inline FlatMesh load_mesh(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.magic(kMeshMagic, 7);
  std::uint32_t v = r.u32();
  std::uint32_t f = r.u32();
  if (v == 0) throw FormatError("mesh has zero vertices: " + path);
  FlatMesh mesh;
  mesh.vertex_xyz.resize(v);
  mesh.triangles.resize(f);
  mesh.valid_vertex.resize(v);
  r.span(mesh.vertex_xyz.data()->data(), std::size_t(v) * 3);
  if (f) r.span(mesh.triangles.data()->data(), std::size_t(f) * 3);
  r.span(mesh.valid_vertex.data(), v);
  mesh.validate();
  return mesh;
}

// Regular pixel grid over the flat mesh plus sparse barycentric weights.
// Weight rows are CSR over valid pixels in row-major pixel order; each row
// has at most 3 (vertex, weight) entries summing to 1.
struct ResampleGrid {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  double pixel_mm = 0.0;
  double origin_x = 0.0;  // min-x edge of the grid, mm
  double origin_y = 0.0;  // min-y edge of the grid, mm
  std::uint64_t source_vertex_count = 0;
  std::vector<std::uint8_t> valid_pixel;     // height*width
  std::vector<std::uint32_t> weight_offset;  // valid_count+1
  std::vector<std::uint32_t> weight_vertex;
  std::vector<double> weight_value;
  std::vector<std::uint32_t> valid_slot;  // pixel -> index among valid pixels, or npos

  static constexpr std::uint32_t npos = std::numeric_limits<std::uint32_t>::max();

  std::size_t pixel_count() const { return std::size_t(height) * width; }
  std::size_t valid_count() const { return weight_offset.empty() ? 0 : weight_offset.size() - 1; }

  // Pixel centers: column c maps to increasing x, row 0 is the top (max y)
  // so images render with y up.
  std::pair<double, double> pixel_center(std::uint32_t row, std::uint32_t col) const {
    double x = origin_x + (col + 0.5) * pixel_mm;
    double y = origin_y + (height - row - 0.5) * pixel_mm;
    return {x, y};
  }

  std::vector<std::uint8_t> serialize() const {
    ByteWriter w;
    write(w);
    return w.bytes();
  }

  void write(ByteWriter& w) const {
    w.magic("FGRID1", 7);
    w.u32(height);
    w.u32(width);
    w.f64(pixel_mm);
    w.f64(origin_x);
    w.f64(origin_y);
    w.u64(source_vertex_count);
    // valid bitmap, LSB-first
    std::vector<std::uint8_t> bits((pixel_count() + 7) / 8, 0);
    for (std::size_t i = 0; i < pixel_count(); ++i)
      if (valid_pixel[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    w.span(bits.data(), bits.size());
    w.u32(static_cast<std::uint32_t>(valid_count()));
    w.span(weight_offset.data(), weight_offset.size());
    w.u32(static_cast<std::uint32_t>(weight_vertex.size()));
    w.span(weight_vertex.data(), weight_vertex.size());
    w.span(weight_value.data(), weight_value.size());
  }

  static ResampleGrid read(ByteReader& r) {
    ResampleGrid g;
    r.magic("FGRID1", 7);
    g.height = r.u32();
    g.width = r.u32();
    g.pixel_mm = r.f64();
    g.origin_x = r.f64();
    g.origin_y = r.f64();
    g.source_vertex_count = r.u64();
    std::size_t n_px = g.pixel_count();
    std::vector<std::uint8_t> bits((n_px + 7) / 8);
    r.span(bits.data(), bits.size());
    g.valid_pixel.resize(n_px);
    for (std::size_t i = 0; i < n_px; ++i)
      g.valid_pixel[i] = (bits[i / 8] >> (i % 8)) & 1u;
    std::uint32_t n_valid = r.u32();
    g.weight_offset.resize(std::size_t(n_valid) + 1);
    r.span(g.weight_offset.data(), g.weight_offset.size());
    std::uint32_t n_entries = r.u32();
    g.weight_vertex.resize(n_entries);
    r.span(g.weight_vertex.data(), n_entries);
    g.weight_value.resize(n_entries);
    r.span(g.weight_value.data(), n_entries);
    g.rebuild_slots();
    return g;
  }

  void save(const std::string& path) const {
    ByteWriter w;
    write(w);
    w.to_file(path);
  }

  static ResampleGrid load(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    return read(r);
  }

  void rebuild_slots() {
    valid_slot.assign(pixel_count(), npos);
    std::uint32_t slot = 0;
    for (std::size_t i = 0; i < pixel_count(); ++i)
      if (valid_pixel[i]) valid_slot[i] = slot++;
  }

  // Content hash over the serialized form; shard headers carry it so data
  // from different grids cannot be mixed.
  std::array<std::uint8_t, 32> content_hash() const {
    auto bytes = serialize();
    return sha256(bytes.data(), bytes.size());
  }
};

// One scalar image on a grid. Background pixels are exactly 0.
template <typename T>
struct FlatFrame {
  const ResampleGrid* grid = nullptr;
  std::vector<T> pixels;  // height*width, row-major
};

namespace detail {

// Barycentric coordinates of p in triangle (a, b, c) via the 2x2 system.
inline bool barycentric(double px, double py, const float* a, const float* b, const float* c,
                        double& l0, double& l1, double& l2) {
  double v0x = b[0] - a[0], v0y = b[1] - a[1];
  double v1x = c[0] - a[0], v1y = c[1] - a[1];
  double det = v0x * v1y - v1x * v0y;
  if (det == 0.0) return false;
  double dx = px - a[0], dy = py - a[1];
  l1 = (dx * v1y - v1x * dy) / det;
  l2 = (v0x * dy - dx * v0y) / det;
  l0 = 1.0 - l1 - l2;
  return true;
}

}  // namespace detail

// Coordinates slightly outside an edge still count as inside, so shared
// edges leave no cracks.
inline constexpr double kInsideTol = -1e-9;

// Fits a height x width grid to the valid-vertex bounding box (centered,
// physical span = dims * pixel_mm) and stores barycentric weights of each
// covered pixel center. Pixels covered by several triangles take the first
// triangle in face order.
inline ResampleGrid build_grid(const FlatMesh& mesh, std::uint32_t height, std::uint32_t width,
                               double pixel_mm) {
  if (height < 1 || width < 1) throw ConfigError("grid dims must be >= 1");
  if (!(pixel_mm > 0.0)) throw ConfigError("pixel_mm must be > 0");

  std::vector<std::uint32_t> faces;  // all-valid triangles, in face order
  for (std::size_t f = 0; f < mesh.triangle_count(); ++f)
    if (mesh.triangle_all_valid(f)) faces.push_back(static_cast<std::uint32_t>(f));
  if (faces.empty()) throw ValidationError("mesh has no triangle with all-valid vertices");

  double min_x = std::numeric_limits<double>::max(), max_x = -min_x;
  double min_y = std::numeric_limits<double>::max(), max_y = -min_y;
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    if (!mesh.valid_vertex[i]) continue;
    min_x = std::min(min_x, double(mesh.vertex_xyz[i][0]));
    max_x = std::max(max_x, double(mesh.vertex_xyz[i][0]));
    min_y = std::min(min_y, double(mesh.vertex_xyz[i][1]));
    max_y = std::max(max_y, double(mesh.vertex_xyz[i][1]));
  }

  ResampleGrid grid;
  grid.height = height;
  grid.width = width;
  grid.pixel_mm = pixel_mm;
  grid.origin_x = 0.5 * (min_x + max_x) - 0.5 * width * pixel_mm;
  grid.origin_y = 0.5 * (min_y + max_y) - 0.5 * height * pixel_mm;
  grid.source_vertex_count = mesh.vertex_count();
  grid.valid_pixel.assign(grid.pixel_count(), 0);

  // Bin triangles by grid column range so each pixel only tests local faces.
  // Bin lists keep face order, so "first containing face" is preserved.
  const std::uint32_t n_bins_x = width, n_bins_y = height;
  auto col_of = [&](double x) {
    double c = (x - grid.origin_x) / pixel_mm;
    return std::clamp(static_cast<std::int64_t>(std::floor(c)), std::int64_t(0),
                      std::int64_t(n_bins_x - 1));
  };
  auto rowbin_of = [&](double y) {
    double r = (grid.origin_y + height * pixel_mm - y) / pixel_mm;
    return std::clamp(static_cast<std::int64_t>(std::floor(r)), std::int64_t(0),
                      std::int64_t(n_bins_y - 1));
  };
  std::vector<std::vector<std::uint32_t>> bins(std::size_t(n_bins_x) * n_bins_y);
  for (std::uint32_t f : faces) {
    const auto& t = mesh.triangles[f];
    double tmin_x = std::numeric_limits<double>::max(), tmax_x = -tmin_x;
    double tmin_y = std::numeric_limits<double>::max(), tmax_y = -tmin_y;
    for (int k = 0; k < 3; ++k) {
      tmin_x = std::min(tmin_x, double(mesh.vertex_xyz[t[k]][0]));
      tmax_x = std::max(tmax_x, double(mesh.vertex_xyz[t[k]][0]));
      tmin_y = std::min(tmin_y, double(mesh.vertex_xyz[t[k]][1]));
      tmax_y = std::max(tmax_y, double(mesh.vertex_xyz[t[k]][1]));
    }
    std::int64_t c0 = col_of(tmin_x), c1 = col_of(tmax_x);
    std::int64_t r0 = rowbin_of(tmax_y), r1 = rowbin_of(tmin_y);
    for (std::int64_t r = r0; r <= r1; ++r)
      for (std::int64_t c = c0; c <= c1; ++c)
        bins[std::size_t(r) * n_bins_x + std::size_t(c)].push_back(f);
  }

  struct PixelHit {
    std::uint32_t v[3];
    double w[3];
  };
  std::vector<PixelHit> hits(grid.pixel_count());
  std::vector<std::uint8_t> hit_flag(grid.pixel_count(), 0);

  parallel_for(grid.pixel_count(), [&](std::size_t px) {
    std::uint32_t row = static_cast<std::uint32_t>(px / width);
    std::uint32_t col = static_cast<std::uint32_t>(px % width);
    auto [x, y] = grid.pixel_center(row, col);
    for (std::uint32_t f : bins[px]) {
      const auto& t = mesh.triangles[f];
      double l0, l1, l2;
      if (!detail::barycentric(x, y, mesh.vertex_xyz[t[0]].data(), mesh.vertex_xyz[t[1]].data(),
                               mesh.vertex_xyz[t[2]].data(), l0, l1, l2))
        continue;
      if (l0 >= kInsideTol && l1 >= kInsideTol && l2 >= kInsideTol) {
        // Clamp the edge tolerance away and renormalize to an exact
        // partition of unity.
        double w0 = std::max(l0, 0.0), w1 = std::max(l1, 0.0), w2 = std::max(l2, 0.0);
        double s = w0 + w1 + w2;
        hits[px] = {{t[0], t[1], t[2]}, {w0 / s, w1 / s, w2 / s}};
        hit_flag[px] = 1;
        return;
      }
    }
  });

  grid.weight_offset.clear();
  grid.weight_offset.push_back(0);
  for (std::size_t px = 0; px < grid.pixel_count(); ++px) {
    if (!hit_flag[px]) continue;
    grid.valid_pixel[px] = 1;
    for (int k = 0; k < 3; ++k) {
      if (hits[px].w[k] == 0.0) continue;  // drop exact-zero corner weights
      grid.weight_vertex.push_back(hits[px].v[k]);
      grid.weight_value.push_back(hits[px].w[k]);
    }
    grid.weight_offset.push_back(static_cast<std::uint32_t>(grid.weight_vertex.size()));
  }
  grid.rebuild_slots();
  return grid;
}

// Sparse matrix-vector product: vertex values -> pixel image. Weights are
// f64 and accumulation is in double regardless of T.
template <typename T>
FlatFrame<T> resample_frame(const ResampleGrid& grid, const T* vertex_values,
                            std::size_t n_vertices) {
  if (n_vertices != grid.source_vertex_count)
    throw DimensionError("vertex value count " + std::to_string(n_vertices) +
                         " does not match grid source count " +
                         std::to_string(grid.source_vertex_count));
  FlatFrame<T> frame;
  frame.grid = &grid;
  frame.pixels.assign(grid.pixel_count(), T(0));
  std::uint32_t slot = 0;
  for (std::size_t px = 0; px < grid.pixel_count(); ++px) {
    if (!grid.valid_pixel[px]) continue;
    double acc = 0.0;
    for (std::uint32_t k = grid.weight_offset[slot]; k < grid.weight_offset[slot + 1]; ++k)
      acc += grid.weight_value[k] * static_cast<double>(vertex_values[grid.weight_vertex[k]]);
    frame.pixels[px] = static_cast<T>(acc);
    ++slot;
  }
  return frame;
}

template <typename T>
FlatFrame<T> resample_frame(const ResampleGrid& grid, const std::vector<T>& vertex_values) {
  return resample_frame(grid, vertex_values.data(), vertex_values.size());
}

}  // namespace flatmae
