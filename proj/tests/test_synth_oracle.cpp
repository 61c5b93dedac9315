// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "stitchflow/oracle.hpp"
#include "stitchflow/synth.hpp"

using namespace stitchflow;

namespace {

ToyClipSpec make_spec(Quality q, Action a, Task t, std::uint64_t seed, int w = 64, int h = 64,
                      int frames = 17) {
  ToyClipSpec spec;
  spec.annotation = SubStitchAnnotation{"test", t, a, q, 0.0, 1.0};
  spec.seed = seed;
  spec.width = w;
  spec.height = h;
  spec.frame_count = frames;
  return spec;
}

}  // namespace

TEST_CASE("same spec renders bit-identical clips") {
  const auto spec = make_spec(Quality::kNonIdeal, Action::kDriving, Task::kRailroad, 42);
  const Video<float> a = synthesize_toy_clip(spec);
  const Video<float> b = synthesize_toy_clip(spec);
  REQUIRE(a.same_shape(b));
  CHECK((a.flat() == b.flat()).all());

  // A different seed must change a non-ideal clip (jitter is seeded).
  auto spec2 = spec;
  spec2.seed = 43;
  const Video<float> c = synthesize_toy_clip(spec2);
  CHECK_FALSE((a.flat() == c.flat()).all());
}

TEST_CASE("ideal driving centroid moves strictly monotonically in task direction") {
  for (const Task task : {Task::kRailroad, Task::kBackhand}) {
    const auto spec = make_spec(Quality::kIdeal, Action::kDriving, task, 5);
    const auto track = centroid_track(synthesize_toy_clip(spec));
    REQUIRE(track.size() == 17);
    for (std::size_t i = 1; i < track.size(); ++i) {
      if (task == Task::kRailroad) {
        CHECK(track[i].x() > track[i - 1].x());
      } else {
        CHECK(track[i].x() < track[i - 1].x());
      }
    }
  }
}

TEST_CASE("every class moves net in its task direction") {
  for (const ClassTriple& triple : all_classes()) {
    const auto spec = make_spec(triple.quality, triple.action, triple.task, 11);
    const auto track = centroid_track(synthesize_toy_clip(spec));
    const double net_dx = track.back().x() - track.front().x();
    INFO(class_slug(triple));
    if (triple.task == Task::kRailroad) {
      CHECK(net_dx > 1.0);
    } else {
      CHECK(net_dx < -1.0);
    }
  }
}

TEST_CASE("horizontal mirror flips the recovered task") {
  const auto spec = make_spec(Quality::kIdeal, Action::kTargeting, Task::kRailroad, 9);
  const Video<float> clip = synthesize_toy_clip(spec);
  CHECK(oracle_classify(clip).task == Task::kRailroad);
  CHECK(oracle_classify(flip_horizontal(clip)).task == Task::kBackhand);
}

TEST_CASE("non-ideal jitter raises the jerk statistic") {
  for (const Action action : {Action::kPositioning, Action::kTargeting, Action::kDriving,
                              Action::kWithdrawal}) {
    const auto ideal = make_spec(Quality::kIdeal, action, Task::kRailroad, 17);
    const auto rough = make_spec(Quality::kNonIdeal, action, Task::kRailroad, 17);
    const auto ti = centroid_track(synthesize_toy_clip(ideal));
    const auto tn = centroid_track(synthesize_toy_clip(rough));
    const double si = jerk_statistic(ti, 64, 64);
    const double sn = jerk_statistic(tn, 64, 64);
    INFO(action_name(action) << " ideal=" << si << " non_ideal=" << sn);
    CHECK(sn > 4.0 * si);
  }
}

TEST_CASE("untrackable clips are rejected") {
  Video<float> black(8, 32, 32, kPixelChannels);
  black.flat().setConstant(-0.9f);
  CHECK_THROWS_AS(centroid_track(black), NoTrackableObject);
  CHECK_THROWS_AS(oracle_classify(black), NoTrackableObject);

  // Too few frames for a third difference.
  const auto spec = make_spec(Quality::kIdeal, Action::kDriving, Task::kRailroad, 3, 64, 64, 3);
  CHECK_THROWS_AS(oracle_classify(synthesize_toy_clip(spec)), NoTrackableObject);
}

TEST_CASE("oracle recovers labels across resolutions") {
  for (const auto& [w, h] : std::vector<std::pair<int, int>>{{64, 64}, {96, 64}, {48, 48}}) {
    for (const ClassTriple& triple : all_classes()) {
      const auto spec = make_spec(triple.quality, triple.action, triple.task, 23, w, h);
      const OracleVerdict v = oracle_classify(synthesize_toy_clip(spec));
      INFO(class_slug(triple) << " at " << w << "x" << h);
      CHECK(v.quality == triple.quality);
      CHECK(v.task == triple.task);
    }
  }
}

TEST_CASE("default threshold separates qualities over 100 seeds per class") {
  const JerkCalibration cal = calibrate_jerk_threshold(64, 64, 17, 100);
  MESSAGE("calibration: max_ideal=" << cal.max_ideal << " min_non_ideal=" << cal.min_non_ideal
                                    << " suggested=" << cal.threshold);
  CHECK(cal.max_ideal < cal.min_non_ideal);  // clean gap, no overlap
  CHECK(kDefaultJerkThreshold > cal.max_ideal);
  CHECK(kDefaultJerkThreshold < cal.min_non_ideal);

  std::map<int, int> hits, totals;
  for (const ClassTriple& triple : all_classes()) {
    for (int s = 0; s < 100; ++s) {
      const auto spec = make_spec(triple.quality, triple.action, triple.task,
                                  Rng::mix(171, static_cast<std::uint64_t>(
                                                    class_index(triple) * 1009 + s)));
      const OracleVerdict v = oracle_classify(synthesize_toy_clip(spec));
      totals[class_index(triple)]++;
      if (v.quality == triple.quality && v.task == triple.task) hits[class_index(triple)]++;
    }
  }
  for (const ClassTriple& triple : all_classes()) {
    const int idx = class_index(triple);
    INFO(class_slug(triple) << " accuracy " << hits[idx] << "/" << totals[idx]);
    CHECK(hits[idx] >= 95);
  }
}
