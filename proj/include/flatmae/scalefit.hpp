// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flatmae/common.hpp"

namespace flatmae {

// One (dataset size, best test loss) point; epoch records the argmin.
struct ScalePoint {
  double n = 0.0;       // dataset size (frames)
  double loss = 0.0;    // best test loss for that size
  std::uint64_t epoch = 0;

  void validate() const {
    if (!(n > 0.0)) throw ValidationError("dataset size must be > 0");
    if (!(loss > 0.0)) throw ValidationError("loss must be > 0 for log-space fitting");
  }
};

// loss = a * n^b with goodness of fit measured in log-log space.
struct PowerLawFit {
  double a = 0.0;
  double b = 0.0;
  double r2 = 0.0;
};

// Per dataset size, pick the epoch with the lowest test loss (ties take the
// earliest epoch).
inline ScalePoint select_point(double n, const std::vector<double>& loss_trace) {
  if (loss_trace.empty()) throw ConfigError("empty loss trace");
  ScalePoint p;
  p.n = n;
  p.loss = loss_trace[0];
  p.epoch = 0;
  for (std::size_t e = 1; e < loss_trace.size(); ++e)
    if (loss_trace[e] < p.loss) {
      p.loss = loss_trace[e];
      p.epoch = e;
    }
  return p;
}

inline std::vector<ScalePoint> select_points(const std::vector<double>& sizes,
                                             const std::vector<std::vector<double>>& traces) {
  if (sizes.size() != traces.size()) throw DimensionError("sizes/traces mismatch");
  std::vector<ScalePoint> pts;
  pts.reserve(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) pts.push_back(select_point(sizes[i], traces[i]));
  return pts;
}

// Least-squares line in (log n, log loss). use_first_k > 0 restricts the
// fit to the k smallest dataset sizes (the truncated-fit analysis).
inline PowerLawFit fit_power_law(std::vector<ScalePoint> points, std::int64_t use_first_k = 0) {
  for (const auto& p : points) p.validate();
  std::sort(points.begin(), points.end(),
            [](const ScalePoint& x, const ScalePoint& y) { return x.n < y.n; });
  if (use_first_k > 0 && static_cast<std::size_t>(use_first_k) < points.size())
    points.resize(static_cast<std::size_t>(use_first_k));
  if (points.size() < 2) throw ConfigError("power-law fit needs >= 2 points");

  double sx = 0.0, sy = 0.0;
  for (const auto& p : points) {
    sx += std::log(p.n);
    sy += std::log(p.loss);
  }
  double mx = sx / double(points.size());
  double my = sy / double(points.size());
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& p : points) {
    double dx = std::log(p.n) - mx;
    double dy = std::log(p.loss) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0.0) throw ConfigError("degenerate fit: all dataset sizes equal");

  PowerLawFit fit;
  fit.b = sxy / sxx;
  fit.a = std::exp(my - fit.b * mx);
  if (syy == 0.0) {
    fit.r2 = 1.0;  // constant losses, exactly reproduced
  } else {
    double ss_res = syy - fit.b * sxy;
    fit.r2 = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  }
  return fit;
}

inline double predict(const PowerLawFit& fit, double n) {
  if (!(n > 0.0)) throw ConfigError("dataset size must be > 0");
  return fit.a * std::pow(n, fit.b);
}

// Relative residual of a held-out point: positive when the observed loss
// sits above the power-law prediction (the saturation signature).
inline double relative_residual(const PowerLawFit& fit, const ScalePoint& point) {
  double pred = predict(fit, point.n);
  return (point.loss - pred) / pred;
}

}  // namespace flatmae
