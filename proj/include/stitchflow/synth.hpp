// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural synthetic suturing clips. Each clip shows a curved needle arc
// and a horizontal tissue band on separate color channels so that downstream
// trajectory extraction is exact rather than learned.
//
// Motion model:
//   - task selects the horizontal travel direction (railroad: left to right,
//     backhand: right to left),
//   - action selects the phase: positioning reorients about a fixed grasp
//     pivot, targeting approaches the tissue from above, driving crosses the
//     tissue band, withdrawal exits upward along the curve,
//   - ideal quality follows a circular arc at constant angular rate;
//     non-ideal quality follows the straight chord between the same
//     endpoints without rotation, with seeded per-frame jitter whose sign
//     alternates frame to frame.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "stitchflow/errors.hpp"
#include "stitchflow/rng.hpp"
#include "stitchflow/taxonomy.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

struct ToyClipSpec {
  SubStitchAnnotation annotation;
  std::uint64_t seed = 0;
  int width = 64;
  int height = 64;
  int frame_count = 17;
};

namespace synth_detail {

// Geometry in normalized units; lengths scale with min(width, height).
inline constexpr double kNeedleRadius = 0.17;
inline constexpr double kNeedleHalfSpan = 1.8;  // radians; arc spans ~206 deg
inline constexpr double kNeedleStroke = 0.027;
inline constexpr double kTissueV = 0.66;
inline constexpr double kTissueHalfThick = 0.032;
inline constexpr double kBackground = -0.9;
inline constexpr double kNeedlePeak = 0.95;
inline constexpr double kTissuePeak = 0.9;

// Jitter amplitudes for non-ideal clips (normalized units). The sign
// alternates deterministically per frame; amplitudes are drawn per frame.
inline constexpr double kZigAmpXLo = 0.020, kZigAmpXHi = 0.036;
inline constexpr double kZigAmpYLo = 0.028, kZigAmpYHi = 0.050;
inline constexpr double kNoiseAmp = 0.012;

struct PathPoint {
  double x = 0.0;      // pixels
  double y = 0.0;      // pixels
  double theta = 0.0;  // arc bisector angle, radians
};

/// Smooth reference trajectory for an ideal execution, sampled at s in [0,1].
inline PathPoint ideal_path_point(Action action, Task task, double s, int width, int height) {
  const double dir = (task == Task::kRailroad) ? 1.0 : -1.0;
  const double scale = static_cast<double>(std::min(width, height));
  const double cx = 0.5 * width;
  const double ty = kTissueV * height;

  PathPoint p;
  switch (action) {
    case Action::kPositioning: {
      // Rotation about a fixed grasp pivot; the body sweeps with the wrist.
      const double pivot_x = cx - dir * 0.05 * scale;
      const double pivot_y = 0.42 * height;
      const double radius = 0.16 * scale;
      const double beta = dir * 1.8 * (s - 0.5);
      p.x = pivot_x + radius * std::sin(beta);
      p.y = pivot_y - radius * (std::cos(beta) - 1.0) - 0.13 * scale;
      p.theta = -M_PI / 2.0 + beta;
      break;
    }
    case Action::kTargeting: {
      // Descent toward the tissue along a gentle arc; ends above the band.
      const double radius = 0.45 * scale;
      const double gamma = -0.6 * (1.0 - s);
      const double mx = cx + dir * 0.125 * scale;
      const double my = ty - 0.09 * scale - radius;
      p.x = mx + dir * radius * std::sin(gamma);
      p.y = my + radius * std::cos(gamma);
      p.theta = -M_PI / 2.0 + dir * (0.3 + 0.5 * s);
      break;
    }
    case Action::kDriving: {
      // Crossing pass: dips below the tissue line mid-way, x monotone.
      const double radius = 0.30 * scale;
      const double delta = 0.85 * (2.0 * s - 1.0);
      const double my = ty + 0.06 * scale - radius;
      p.x = cx + dir * radius * std::sin(delta);
      p.y = my + radius * std::cos(delta);
      p.theta = -M_PI / 2.0 + dir * (1.6 * s - 0.8);
      break;
    }
    case Action::kWithdrawal: {
      // Exit upward along the curve, starting just below the band.
      const double radius = 0.35 * scale;
      const double omega = 0.8 * s;
      const double mx = cx - dir * 0.10 * scale;
      const double my = ty + 0.03 * scale - radius;
      p.x = mx + dir * radius * std::sin(omega);
      p.y = my + radius * std::cos(omega);
      p.theta = -M_PI / 2.0 + dir * (0.4 + 1.2 * s);
      break;
    }
  }
  return p;
}

inline double wrap_angle(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a < -M_PI) a += 2.0 * M_PI;
  return a;
}

inline void render_frame(Video<float>& clip, int frame, const PathPoint& p, int width, int height) {
  const double scale = static_cast<double>(std::min(width, height));
  const double tissue_y = kTissueV * height;
  const double tissue_band = kTissueHalfThick * scale;

  for (int y = 0; y < height; ++y) {
    const double grad = kBackground + 0.3 * static_cast<double>(y) / std::max(1, height - 1);
    const double dy = (static_cast<double>(y) - tissue_y) / tissue_band;
    const double tissue = std::max(0.0, 1.0 - dy * dy);
    for (int x = 0; x < width; ++x) {
      clip(frame, y, x, 0) = static_cast<float>(kBackground);
      clip(frame, y, x, 1) =
          static_cast<float>(kBackground + (kTissuePeak - kBackground) * tissue);
      clip(frame, y, x, 2) = static_cast<float>(grad);
    }
  }

  const double radius = kNeedleRadius * scale;
  const double stroke = kNeedleStroke * scale;
  const int x_lo = std::max(0, static_cast<int>(std::floor(p.x - radius - stroke - 1)));
  const int x_hi = std::min(width - 1, static_cast<int>(std::ceil(p.x + radius + stroke + 1)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(p.y - radius - stroke - 1)));
  const int y_hi = std::min(height - 1, static_cast<int>(std::ceil(p.y + radius + stroke + 1)));

  const double e1x = p.x + radius * std::cos(p.theta - kNeedleHalfSpan);
  const double e1y = p.y + radius * std::sin(p.theta - kNeedleHalfSpan);
  const double e2x = p.x + radius * std::cos(p.theta + kNeedleHalfSpan);
  const double e2y = p.y + radius * std::sin(p.theta + kNeedleHalfSpan);

  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      const double rx = x - p.x;
      const double ry = y - p.y;
      const double r = std::sqrt(rx * rx + ry * ry);
      double d;
      if (std::abs(wrap_angle(std::atan2(ry, rx) - p.theta)) <= kNeedleHalfSpan) {
        d = std::abs(r - radius);
      } else {
        const double d1 = std::hypot(x - e1x, y - e1y);
        const double d2 = std::hypot(x - e2x, y - e2y);
        d = std::min(d1, d2);
      }
      const double u = d / stroke;
      const double soft = std::max(0.0, 1.0 - u * u);
      if (soft > 0.0) {
        const float v = static_cast<float>(kBackground + (kNeedlePeak - kBackground) * soft);
        clip(frame, y, x, 0) = std::max(clip(frame, y, x, 0), v);
      }
    }
  }
}

}  // namespace synth_detail

/// Renders a clip deterministically from its spec. Same spec, same bits.
inline Video<float> synthesize_toy_clip(const ToyClipSpec& spec) {
  validate_annotation(spec.annotation);
  if (spec.width < 8 || spec.height < 8 || spec.frame_count < 1) {
    throw PreconditionViolation("synthesize_toy_clip: canvas must be at least 8x8 with >= 1 frame");
  }
  using namespace synth_detail;

  const Action action = spec.annotation.action;
  const Task task = spec.annotation.task;
  const Quality quality = spec.annotation.quality;
  const int frames = spec.frame_count;
  const double scale = static_cast<double>(std::min(spec.width, spec.height));

  Rng rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(class_index(spec.annotation.triple()))));

  std::vector<PathPoint> path(static_cast<std::size_t>(frames));
  const PathPoint first = ideal_path_point(action, task, 0.0, spec.width, spec.height);
  const PathPoint last = ideal_path_point(action, task, 1.0, spec.width, spec.height);
  for (int f = 0; f < frames; ++f) {
    const double s = (frames == 1) ? 0.0 : static_cast<double>(f) / (frames - 1);
    PathPoint p;
    if (quality == Quality::kIdeal) {
      p = ideal_path_point(action, task, s, spec.width, spec.height);
    } else {
      // Straight chord between the same endpoints, no wrist rotation.
      p.x = (1.0 - s) * first.x + s * last.x;
      p.y = (1.0 - s) * first.y + s * last.y;
      p.theta = first.theta;
      const double sign = (f % 2 == 0) ? 1.0 : -1.0;
      const double zig_x = sign * rng.uniform(kZigAmpXLo, kZigAmpXHi);
      const double zig_y = sign * rng.uniform(kZigAmpYLo, kZigAmpYHi);
      const double noise_x = rng.uniform(-kNoiseAmp, kNoiseAmp);
      const double noise_y = rng.uniform(-kNoiseAmp, kNoiseAmp);
      p.x += (zig_x + noise_x) * scale;
      p.y += (zig_y + noise_y) * scale;
    }
    path[static_cast<std::size_t>(f)] = p;
  }

  Video<float> clip(frames, spec.height, spec.width, kPixelChannels);
  for (int f = 0; f < frames; ++f) {
    render_frame(clip, f, path[static_cast<std::size_t>(f)], spec.width, spec.height);
  }
  return clip;
}

}  // namespace stitchflow
