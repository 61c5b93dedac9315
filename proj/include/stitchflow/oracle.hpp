// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Trajectory oracle: recovers motion labels from rendered clips without any
// learned component. The needle lives on channel 0, so its per-frame centroid
// is exact; task falls out of the net horizontal displacement and quality out
// of a third-difference (jerk) statistic of the centroid track.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stitchflow/errors.hpp"
#include "stitchflow/rng.hpp"
#include "stitchflow/synth.hpp"
#include "stitchflow/taxonomy.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

/// Jerk threshold separating ideal from non-ideal centroid tracks, in
/// resolution-normalized pixels (track scaled so min(width, height) == 64).
/// Calibrated once over 100 seeds per class via calibrate_jerk_threshold.
inline constexpr double kDefaultJerkThreshold = 2.0;

struct OracleConfig {
  double jerk_threshold = kDefaultJerkThreshold;
  double min_mass = 1e-3;  // minimum per-frame positive channel-0 mass
};

struct OracleVerdict {
  Quality quality;
  Task task;
};

/// Per-frame needle centroid in pixel coordinates, weighted by the positive
/// part of channel 0. Throws NoTrackableObject when a frame has no signal.
inline std::vector<Eigen::Vector2d> centroid_track(const Video<float>& clip,
                                                   double min_mass = 1e-3) {
  std::vector<Eigen::Vector2d> track;
  track.reserve(static_cast<std::size_t>(clip.frames()));
  for (int f = 0; f < clip.frames(); ++f) {
    double mass = 0.0, sx = 0.0, sy = 0.0;
    for (int y = 0; y < clip.height(); ++y) {
      for (int x = 0; x < clip.width(); ++x) {
        const double w = std::max(0.0f, clip(f, y, x, 0));
        mass += w;
        sx += w * x;
        sy += w * y;
      }
    }
    if (mass < min_mass) {
      throw NoTrackableObject("centroid_track: frame " + std::to_string(f) +
                              " has no positive needle signal");
    }
    track.emplace_back(sx / mass, sy / mass);
  }
  return track;
}

/// Mean Euclidean norm of the third difference of a centroid track, after
/// rescaling so the clip's short side measures 64 pixels. Needs >= 4 frames.
inline double jerk_statistic(const std::vector<Eigen::Vector2d>& track, int width, int height) {
  if (track.size() < 4) {
    throw NoTrackableObject("jerk_statistic: need at least 4 frames, got " +
                            std::to_string(track.size()));
  }
  const double norm = 64.0 / static_cast<double>(std::min(width, height));
  double total = 0.0;
  const std::size_t windows = track.size() - 3;
  for (std::size_t i = 0; i < windows; ++i) {
    const Eigen::Vector2d d3 =
        track[i + 3] - 3.0 * track[i + 2] + 3.0 * track[i + 1] - track[i];
    total += (d3 * norm).norm();
  }
  return total / static_cast<double>(windows);
}

/// Recovers quality and task from a rendered clip. Throws NoTrackableObject
/// when the needle cannot be tracked or the clip is too short to score.
inline OracleVerdict oracle_classify(const Video<float>& clip, const OracleConfig& cfg = {}) {
  const auto track = centroid_track(clip, cfg.min_mass);
  const double stat = jerk_statistic(track, clip.width(), clip.height());
  OracleVerdict verdict;
  verdict.quality = (stat > cfg.jerk_threshold) ? Quality::kNonIdeal : Quality::kIdeal;
  const double net_dx = track.back().x() - track.front().x();
  verdict.task = (net_dx > 0.0) ? Task::kRailroad : Task::kBackhand;
  return verdict;
}

struct JerkCalibration {
  double max_ideal = 0.0;       // largest statistic seen on ideal clips
  double min_non_ideal = 0.0;   // smallest statistic seen on non-ideal clips
  double threshold = 0.0;       // suggested split point
};

/// Sweeps seeds_per_class clips for every class and proposes a quality
/// threshold at the geometric midpoint of the observed gap.
inline JerkCalibration calibrate_jerk_threshold(int width, int height, int frame_count,
                                                int seeds_per_class, std::uint64_t base_seed = 7) {
  require(seeds_per_class > 0, "calibrate_jerk_threshold: seeds_per_class must be positive");
  double max_ideal = 0.0;
  double min_non_ideal = std::numeric_limits<double>::infinity();
  for (const ClassTriple& triple : all_classes()) {
    for (int s = 0; s < seeds_per_class; ++s) {
      ToyClipSpec spec;
      spec.annotation = SubStitchAnnotation{"calibration", triple.task, triple.action,
                                            triple.quality, 0.0, 1.0};
      spec.seed = Rng::mix(base_seed, static_cast<std::uint64_t>(
                                          class_index(triple) * 100003 + s));
      spec.width = width;
      spec.height = height;
      spec.frame_count = frame_count;
      const Video<float> clip = synthesize_toy_clip(spec);
      const double stat = jerk_statistic(centroid_track(clip), width, height);
      if (triple.quality == Quality::kIdeal) {
        max_ideal = std::max(max_ideal, stat);
      } else {
        min_non_ideal = std::min(min_non_ideal, stat);
      }
    }
  }
  JerkCalibration cal;
  cal.max_ideal = max_ideal;
  cal.min_non_ideal = min_non_ideal;
  cal.threshold = (max_ideal < min_non_ideal)
                      ? std::sqrt(std::max(max_ideal, 1e-12) * min_non_ideal)
                      : 0.5 * (max_ideal + min_non_ideal);
  return cal;
}

}  // namespace stitchflow
