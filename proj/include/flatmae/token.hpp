// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/flatgeo.hpp"
#include "flatmae/prep.hpp"
#include "flatmae/rng.hpp"

namespace flatmae {

// Spacetime patch layout over a grid. Spatial patches that contain no valid
// pixel are excluded from tokenization entirely; partially-empty patches are
// kept with their invalid positions zero-filled.
struct PatchLayout {
  std::uint32_t p_t = 0, p = 0;
  std::uint32_t grid_t = 0, grid_h = 0, grid_w = 0;
  std::uint32_t clip_t = 0, height = 0, width = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> nonempty_spatial;  // (row, col), row-major
  std::vector<std::uint32_t> valid_pixel_count;  // per nonempty patch
  std::vector<std::uint8_t> patch_valid;         // |nonempty| * p*p spatial validity

  std::size_t num_spatial() const { return nonempty_spatial.size(); }
  std::size_t num_tokens() const { return std::size_t(grid_t) * num_spatial(); }
  std::uint32_t token_dim() const { return p_t * p * p; }

  // Token order is time-major: token = t_index * num_spatial + spatial_index.
  std::uint32_t token_index(std::uint32_t t_index, std::uint32_t spatial_index) const {
    return t_index * static_cast<std::uint32_t>(num_spatial()) + spatial_index;
  }
  std::uint32_t t_of(std::uint32_t token) const {
    return token / static_cast<std::uint32_t>(num_spatial());
  }
  std::uint32_t s_of(std::uint32_t token) const {
    return token % static_cast<std::uint32_t>(num_spatial());
  }
};

inline PatchLayout build_layout(const ResampleGrid& grid, std::uint32_t p_t, std::uint32_t p,
                                std::uint32_t clip_t) {
  if (p == 0 || p_t == 0) throw ConfigError("patch sizes must be >= 1");
  if (grid.height % p != 0 || grid.width % p != 0)
    throw ConfigError("grid " + std::to_string(grid.height) + "x" + std::to_string(grid.width) +
                      " not divisible by spatial patch size " + std::to_string(p));
  if (clip_t % p_t != 0)
    throw ConfigError("clip length " + std::to_string(clip_t) +
                      " not divisible by temporal patch size " + std::to_string(p_t));

  PatchLayout layout;
  layout.p_t = p_t;
  layout.p = p;
  layout.clip_t = clip_t;
  layout.height = grid.height;
  layout.width = grid.width;
  layout.grid_t = clip_t / p_t;
  layout.grid_h = grid.height / p;
  layout.grid_w = grid.width / p;

  for (std::uint32_t pr = 0; pr < layout.grid_h; ++pr) {
    for (std::uint32_t pc = 0; pc < layout.grid_w; ++pc) {
      std::vector<std::uint8_t> mask(std::size_t(p) * p, 0);
      std::uint32_t count = 0;
      for (std::uint32_t dy = 0; dy < p; ++dy) {
        for (std::uint32_t dx = 0; dx < p; ++dx) {
          std::size_t px = std::size_t(pr * p + dy) * grid.width + (pc * p + dx);
          if (grid.valid_pixel[px]) {
            mask[std::size_t(dy) * p + dx] = 1;
            ++count;
          }
        }
      }
      if (count == 0) continue;  // entirely empty patches never become tokens
      layout.nonempty_spatial.emplace_back(pr, pc);
      layout.valid_pixel_count.push_back(count);
      layout.patch_valid.insert(layout.patch_valid.end(), mask.begin(), mask.end());
    }
  }
  return layout;
}

// Flattened patch values for one clip: N x (p_t*p*p), invalid positions 0.
template <typename T>
struct PatchTensor {
  const PatchLayout* layout = nullptr;
  std::vector<T> values;             // num_tokens * token_dim, (dt, dy, dx) within a token
  std::vector<std::uint8_t> valid;   // same shape; spatial validity replicated across dt

  std::size_t num_tokens() const { return layout->num_tokens(); }
  const T* token(std::size_t i) const { return values.data() + i * layout->token_dim(); }
  T* token(std::size_t i) { return values.data() + i * layout->token_dim(); }
  const std::uint8_t* token_valid(std::size_t i) const {
    return valid.data() + i * layout->token_dim();
  }
};

template <typename T, typename Clip>
PatchTensor<T> patchify(const Clip& clip, const PatchLayout& layout) {
  if (clip.t != layout.clip_t || clip.height != layout.height || clip.width != layout.width)
    throw DimensionError("clip dims do not match layout");
  PatchTensor<T> out;
  out.layout = &layout;
  std::uint32_t dim = layout.token_dim();
  out.values.assign(layout.num_tokens() * dim, T(0));
  out.valid.assign(layout.num_tokens() * dim, 0);
  for (std::uint32_t ti = 0; ti < layout.grid_t; ++ti) {
    for (std::uint32_t s = 0; s < layout.num_spatial(); ++s) {
      auto [pr, pc] = layout.nonempty_spatial[s];
      const std::uint8_t* pv = layout.patch_valid.data() + std::size_t(s) * layout.p * layout.p;
      T* dst = out.token(layout.token_index(ti, s));
      std::uint8_t* dstv = out.valid.data() +
                           std::size_t(layout.token_index(ti, s)) * dim;
      for (std::uint32_t dt = 0; dt < layout.p_t; ++dt) {
        std::uint32_t frame = ti * layout.p_t + dt;
        for (std::uint32_t dy = 0; dy < layout.p; ++dy) {
          for (std::uint32_t dx = 0; dx < layout.p; ++dx) {
            std::size_t local = (std::size_t(dt) * layout.p + dy) * layout.p + dx;
            if (!pv[std::size_t(dy) * layout.p + dx]) continue;
            dst[local] = static_cast<T>(clip.at(frame, pr * layout.p + dy, pc * layout.p + dx));
            dstv[local] = 1;
          }
        }
      }
    }
  }
  return out;
}

// Inverse of patchify on valid pixels; background pixels come back 0.
template <typename T>
std::vector<T> unpatchify(const PatchTensor<T>& tokens) {
  const PatchLayout& layout = *tokens.layout;
  std::vector<T> clip(std::size_t(layout.clip_t) * layout.height * layout.width, T(0));
  for (std::uint32_t ti = 0; ti < layout.grid_t; ++ti) {
    for (std::uint32_t s = 0; s < layout.num_spatial(); ++s) {
      auto [pr, pc] = layout.nonempty_spatial[s];
      const std::uint8_t* pv = layout.patch_valid.data() + std::size_t(s) * layout.p * layout.p;
      const T* src = tokens.token(layout.token_index(ti, s));
      for (std::uint32_t dt = 0; dt < layout.p_t; ++dt) {
        std::uint32_t frame = ti * layout.p_t + dt;
        for (std::uint32_t dy = 0; dy < layout.p; ++dy) {
          for (std::uint32_t dx = 0; dx < layout.p; ++dx) {
            if (!pv[std::size_t(dy) * layout.p + dx]) continue;
            std::size_t local = (std::size_t(dt) * layout.p + dy) * layout.p + dx;
            clip[(std::size_t(frame) * layout.height + pr * layout.p + dy) * layout.width +
                 pc * layout.p + dx] = src[local];
          }
        }
      }
    }
  }
  return clip;
}

// Tube mask: a spatial patch is visible either at every time index or none.
struct MaskPlan {
  std::vector<std::uint32_t> visible;  // token indices
  std::vector<std::uint32_t> masked;   // token indices
  std::vector<std::uint32_t> visible_spatial;
  std::vector<std::uint8_t> spatial_is_visible;  // per nonempty spatial patch
  double ratio = 0.0;
  std::uint64_t seed = 0;
};

// Samples floor((1-ratio)*|nonempty_spatial|) visible spatial tubes without
// replacement. num_visible_override >= 0 forces an explicit visible count
// (the "--num-visible" escape hatch).
inline MaskPlan make_mask(const PatchLayout& layout, double ratio, std::uint64_t seed,
                          std::int64_t num_visible_override = -1) {
  if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("masking ratio must be in [0, 1)");
  std::size_t n_spatial = layout.num_spatial();
  std::size_t n_visible =
      num_visible_override >= 0
          ? static_cast<std::size_t>(num_visible_override)
          : static_cast<std::size_t>((1.0 - ratio) * static_cast<double>(n_spatial));
  if (n_visible > n_spatial) throw ConfigError("visible count exceeds nonempty patch count");

  // Partial Fisher-Yates over spatial indices.
  std::vector<std::uint32_t> perm(n_spatial);
  std::iota(perm.begin(), perm.end(), 0u);
  CounterRng rng(seed);
  for (std::size_t i = 0; i < n_visible && i + 1 < n_spatial; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.next_below(n_spatial - i));
    std::swap(perm[i], perm[j]);
  }

  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.spatial_is_visible.assign(n_spatial, 0);
  plan.visible_spatial.assign(perm.begin(), perm.begin() + std::ptrdiff_t(n_visible));
  std::sort(plan.visible_spatial.begin(), plan.visible_spatial.end());
  for (std::uint32_t s : plan.visible_spatial) plan.spatial_is_visible[s] = 1;

  for (std::uint32_t ti = 0; ti < layout.grid_t; ++ti) {
    for (std::uint32_t s = 0; s < n_spatial; ++s) {
      std::uint32_t tok = layout.token_index(ti, s);
      if (plan.spatial_is_visible[s])
        plan.visible.push_back(tok);
      else
        plan.masked.push_back(tok);
    }
  }
  return plan;
}

}  // namespace flatmae
