// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/flatgeo.hpp"
#include "flatmae/png.hpp"
#include "flatmae/prep.hpp"
#include "flatmae/token.hpp"

namespace flatmae {

// Rendering constants. Values are z-scored, so a fixed symmetric range
// keeps bytes deterministic across samples.
inline constexpr double kRenderScale = 2.5;
inline constexpr std::uint32_t kGutter = 2;
inline constexpr std::array<std::uint8_t, 3> kBackgroundColor = {40, 40, 40};
inline constexpr std::array<std::uint8_t, 3> kMaskedColor = {128, 128, 128};

// Diverging blue-white-red map over [-1, 1].
inline std::array<std::uint8_t, 3> diverging_color(double t) {
  t = std::clamp(t, -1.0, 1.0);
  static constexpr double lo[3] = {0.23, 0.30, 0.75};
  static constexpr double mid[3] = {0.96, 0.96, 0.96};
  static constexpr double hi[3] = {0.71, 0.02, 0.15};
  std::array<std::uint8_t, 3> c{};
  for (int i = 0; i < 3; ++i) {
    double v = t < 0 ? mid[i] + (-t) * (lo[i] - mid[i]) : mid[i] + t * (hi[i] - mid[i]);
    c[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
  }
  return c;
}

enum class PanelStyle { masked_input, values };

// Paints one H x W frame into the image at (x0, y0). masked_input style
// shows neutral gray at masked spatial patches.
template <typename T>
void paint_panel(Image& img, std::uint32_t x0, std::uint32_t y0, const ResampleGrid& grid,
                 const T* frame, PanelStyle style, const PatchLayout* layout = nullptr,
                 const MaskPlan* plan = nullptr) {
  std::vector<std::uint8_t> masked_pixel;
  if (style == PanelStyle::masked_input) {
    if (!layout || !plan) throw ConfigError("masked panel needs a layout and plan");
    masked_pixel.assign(grid.pixel_count(), 0);
    for (std::size_t s = 0; s < layout->num_spatial(); ++s) {
      if (plan->spatial_is_visible[s]) continue;
      auto [pr, pc] = layout->nonempty_spatial[s];
      for (std::uint32_t dy = 0; dy < layout->p; ++dy)
        for (std::uint32_t dx = 0; dx < layout->p; ++dx)
          masked_pixel[std::size_t(pr * layout->p + dy) * grid.width + pc * layout->p + dx] = 1;
    }
  }
  for (std::uint32_t r = 0; r < grid.height; ++r)
    for (std::uint32_t c = 0; c < grid.width; ++c) {
      std::size_t px = std::size_t(r) * grid.width + c;
      std::array<std::uint8_t, 3> color;
      if (!grid.valid_pixel[px]) {
        color = kBackgroundColor;
      } else if (style == PanelStyle::masked_input && masked_pixel[px]) {
        color = kMaskedColor;
      } else {
        color = diverging_color(static_cast<double>(frame[px]) / kRenderScale);
      }
      img.set(x0 + c, y0 + r, color[0], color[1], color[2]);
    }
}

// 3x3 triptych: rows are frames spaced 4 s apart (top to bottom), columns
// are masked input | prediction | target.
template <typename T>
Image render_triptych(const ResampleGrid& grid, const PatchLayout& layout, const MaskPlan& plan,
                      const std::vector<T>& target_clip, const std::vector<T>& predicted_clip,
                      double tr = 1.0) {
  const std::uint32_t h = grid.height, w = grid.width;
  std::size_t frame_size = grid.pixel_count();
  if (target_clip.size() != std::size_t(layout.clip_t) * frame_size ||
      predicted_clip.size() != target_clip.size())
    throw DimensionError("clip buffers do not match layout");

  std::uint32_t frame_step = static_cast<std::uint32_t>(std::lround(4.0 / tr));
  if (frame_step == 0) frame_step = 1;
  std::array<std::uint32_t, 3> rows_frames{};
  for (std::uint32_t i = 0; i < 3; ++i)
    rows_frames[i] = std::min<std::uint32_t>(i * frame_step, layout.clip_t - 1);

  Image img(3 * w + 4 * kGutter, 3 * h + 4 * kGutter, 255);
  for (std::uint32_t row = 0; row < 3; ++row) {
    const T* target = target_clip.data() + std::size_t(rows_frames[row]) * frame_size;
    const T* pred = predicted_clip.data() + std::size_t(rows_frames[row]) * frame_size;
    std::uint32_t y0 = kGutter + row * (h + kGutter);
    paint_panel(img, kGutter, y0, grid, target, PanelStyle::masked_input, &layout, &plan);
    paint_panel(img, 2 * kGutter + w, y0, grid, pred, PanelStyle::values);
    paint_panel(img, 3 * kGutter + 2 * w, y0, grid, target, PanelStyle::values);
  }
  return img;
}

}  // namespace flatmae
