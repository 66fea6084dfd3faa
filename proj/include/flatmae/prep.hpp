// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/flatgeo.hpp"

namespace flatmae {

// One surface-mapped recording: vertex-major V x T matrix plus timing.
struct SurfaceRun {
  std::size_t n_vertices = 0;
  std::size_t n_timepoints = 0;
  double tr = 0.0;  // seconds per frame
  std::string subject_id;
  std::string run_id;
  std::vector<double> values;  // n_vertices * n_timepoints, vertex-major

  double& at(std::size_t v, std::size_t t) { return values[v * n_timepoints + t]; }
  double at(std::size_t v, std::size_t t) const { return values[v * n_timepoints + t]; }

  void validate() const {
    if (n_timepoints < 2) throw ValidationError("run needs >= 2 timepoints");
    if (!(tr > 0.0)) throw ValidationError("run TR must be > 0");
    if (values.size() != n_vertices * n_timepoints)
      throw DimensionError("run value buffer does not match dims");
    for (double v : values)
      if (std::isnan(v)) throw ValidationError("NaN in run values");
  }
};

// A fixed-length T x H x W clip of flat-map frames at 1 s per frame.
struct FlatClip {
  std::uint32_t t = 0, height = 0, width = 0;
  double start_second = 0.0;
  std::vector<float> data;  // t*height*width

  float& at(std::uint32_t f, std::uint32_t r, std::uint32_t c) {
    return data[(std::size_t(f) * height + r) * width + c];
  }
  float at(std::uint32_t f, std::uint32_t r, std::uint32_t c) const {
    return data[(std::size_t(f) * height + r) * width + c];
  }
  std::size_t frame_size() const { return std::size_t(height) * width; }
};

// Population std everywhere (divide by N); constant signals normalize to
// zero instead of dividing by a vanishing std.
inline constexpr double kStdFloor = 1e-12;

namespace detail {

inline std::pair<double, double> mean_std(const double* x, std::size_t n, std::size_t stride = 1) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i * stride];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = x[i * stride] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  return {mean, std::sqrt(var)};
}

}  // namespace detail

// Normalizes each vertex time series to zero mean, unit variance.
inline SurfaceRun znorm_vertices(SurfaceRun run) {
  if (run.n_timepoints < 2) throw ValidationError("znorm needs >= 2 timepoints");
  for (std::size_t v = 0; v < run.n_vertices; ++v) {
    double* row = run.values.data() + v * run.n_timepoints;
    auto [mean, sd] = detail::mean_std(row, run.n_timepoints);
    if (sd <= kStdFloor * std::max(1.0, std::abs(mean))) {
      for (std::size_t t = 0; t < run.n_timepoints; ++t) row[t] = 0.0;
    } else {
      for (std::size_t t = 0; t < run.n_timepoints; ++t) row[t] = (row[t] - mean) / sd;
    }
  }
  return run;
}

// Linear resampling of every vertex series onto {0, tr_out, 2*tr_out, ...},
// clipped to the run duration. No extrapolation past the last sample.
inline SurfaceRun resample_time(const SurfaceRun& run, double tr_out = 1.0) {
  if (!(tr_out > 0.0)) throw ConfigError("tr_out must be > 0");
  double duration = static_cast<double>(run.n_timepoints - 1) * run.tr;
  std::size_t n_out = static_cast<std::size_t>(std::floor(duration / tr_out)) + 1;

  SurfaceRun out;
  out.n_vertices = run.n_vertices;
  out.n_timepoints = n_out;
  out.tr = tr_out;
  out.subject_id = run.subject_id;
  out.run_id = run.run_id;
  out.values.resize(run.n_vertices * n_out);

  double last = static_cast<double>(run.n_timepoints - 1);
  for (std::size_t j = 0; j < n_out; ++j) {
    double src = std::min(static_cast<double>(j) * tr_out / run.tr, last);
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 >= run.n_timepoints - 1) i0 = run.n_timepoints - 2;
    double frac = src - static_cast<double>(i0);
    for (std::size_t v = 0; v < run.n_vertices; ++v)
      out.at(v, j) = (1.0 - frac) * run.at(v, i0) + frac * run.at(v, i0 + 1);
  }
  return out;
}

// Frame-wise spatial normalization over valid pixels only; background stays
// exactly 0. Rejects frames whose background is nonzero.
template <typename T>
FlatFrame<T> frame_norm(FlatFrame<T> frame) {
  const ResampleGrid& grid = *frame.grid;
  std::size_t n_valid = grid.valid_count();
  if (n_valid < 2) throw ValidationError("frame_norm needs >= 2 valid pixels");

  double mean = 0.0;
  for (std::size_t px = 0; px < grid.pixel_count(); ++px) {
    if (grid.valid_pixel[px]) {
      mean += static_cast<double>(frame.pixels[px]);
    } else if (frame.pixels[px] != T(0)) {
      throw ValidationError("background pixel is nonzero before frame_norm");
    }
  }
  mean /= static_cast<double>(n_valid);
  double var = 0.0;
  for (std::size_t px = 0; px < grid.pixel_count(); ++px) {
    if (!grid.valid_pixel[px]) continue;
    double d = static_cast<double>(frame.pixels[px]) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n_valid);
  double sd = std::sqrt(var);

  if (sd <= kStdFloor * std::max(1.0, std::abs(mean))) {
    for (std::size_t px = 0; px < grid.pixel_count(); ++px)
      if (grid.valid_pixel[px]) frame.pixels[px] = T(0);
  } else {
    for (std::size_t px = 0; px < grid.pixel_count(); ++px)
      if (grid.valid_pixel[px])
        frame.pixels[px] = static_cast<T>((static_cast<double>(frame.pixels[px]) - mean) / sd);
  }
  return frame;
}

// Contiguous clip windows out of a T_total x H x W frame stack.
inline std::vector<FlatClip> extract_clips(const std::vector<float>& frames, std::uint32_t t_total,
                                           std::uint32_t height, std::uint32_t width,
                                           const std::vector<std::uint32_t>& starts,
                                           std::uint32_t clip_len = 16, double tr = 1.0) {
  if (frames.size() != std::size_t(t_total) * height * width)
    throw DimensionError("frame stack size does not match dims");
  std::vector<FlatClip> clips;
  clips.reserve(starts.size());
  std::size_t frame_size = std::size_t(height) * width;
  for (std::uint32_t s : starts) {
    if (std::size_t(s) + clip_len > t_total)
      throw Error("clip start " + std::to_string(s) + " + length " + std::to_string(clip_len) +
                  " exceeds run length " + std::to_string(t_total));
    FlatClip clip;
    clip.t = clip_len;
    clip.height = height;
    clip.width = width;
    clip.start_second = s * tr;
    clip.data.assign(frames.begin() + std::ptrdiff_t(s * frame_size),
                     frames.begin() + std::ptrdiff_t((s + std::size_t(clip_len)) * frame_size));
    clips.push_back(std::move(clip));
  }
  return clips;
}

// Full preprocessing chain for one run: vertex znorm -> temporal resample to
// 1 s -> flat-map resample -> per-frame spatial norm. Returns the frame
// stack ready for clip extraction.
inline std::vector<float> run_to_frames(const SurfaceRun& raw, const ResampleGrid& grid,
                                        std::uint32_t* out_frames, double tr_out = 1.0) {
  SurfaceRun run = resample_time(znorm_vertices(raw), tr_out);
  std::size_t t_total = run.n_timepoints;
  std::vector<float> stack(t_total * grid.pixel_count());
  std::vector<double> column(run.n_vertices);
  for (std::size_t t = 0; t < t_total; ++t) {
    for (std::size_t v = 0; v < run.n_vertices; ++v) column[v] = run.at(v, t);
    auto frame = frame_norm(resample_frame(grid, column));
    for (std::size_t px = 0; px < grid.pixel_count(); ++px)
      stack[t * grid.pixel_count() + px] = static_cast<float>(frame.pixels[px]);
  }
  *out_frames = static_cast<std::uint32_t>(t_total);
  return stack;
}

}  // namespace flatmae
