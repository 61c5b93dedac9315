// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// The closed sub-stitch label space: 2 tasks x 4 actions x 2 qualities.

#pragma once

#include <array>
#include <string>

#include "stitchflow/errors.hpp"

namespace stitchflow {

enum class Task { kRailroad = 0, kBackhand = 1 };
enum class Action { kPositioning = 0, kTargeting = 1, kDriving = 2, kWithdrawal = 3 };
enum class Quality { kIdeal = 0, kNonIdeal = 1 };

inline constexpr int kNumTasks = 2;
inline constexpr int kNumActions = 4;
inline constexpr int kNumQualities = 2;
inline constexpr int kNumClasses = kNumTasks * kNumActions * kNumQualities;

/// Reserved embedding row used for the unconditional branch.
inline constexpr int kNullConditionId = kNumClasses;

inline const char* task_name(Task t) {
  switch (t) {
    case Task::kRailroad:
      return "railroad";
    case Task::kBackhand:
      return "backhand";
  }
  throw UnknownClassId("task_name: invalid task value");
}

inline const char* action_name(Action a) {
  switch (a) {
    case Action::kPositioning:
      return "positioning";
    case Action::kTargeting:
      return "targeting";
    case Action::kDriving:
      return "driving";
    case Action::kWithdrawal:
      return "withdrawal";
  }
  throw UnknownClassId("action_name: invalid action value");
}

inline const char* quality_name(Quality q) {
  switch (q) {
    case Quality::kIdeal:
      return "ideal";
    case Quality::kNonIdeal:
      return "non_ideal";
  }
  throw UnknownClassId("quality_name: invalid quality value");
}

inline Task parse_task(const std::string& s) {
  if (s == "railroad") return Task::kRailroad;
  if (s == "backhand") return Task::kBackhand;
  throw UnknownClassId("parse_task: unknown task \"" + s + "\"");
}

inline Action parse_action(const std::string& s) {
  if (s == "positioning") return Action::kPositioning;
  if (s == "targeting") return Action::kTargeting;
  if (s == "driving") return Action::kDriving;
  if (s == "withdrawal") return Action::kWithdrawal;
  throw UnknownClassId("parse_action: unknown action \"" + s + "\"");
}

inline Quality parse_quality(const std::string& s) {
  if (s == "ideal") return Quality::kIdeal;
  if (s == "non_ideal") return Quality::kNonIdeal;
  throw UnknownClassId("parse_quality: unknown quality \"" + s + "\"");
}

struct ClassTriple {
  Quality quality = Quality::kIdeal;
  Action action = Action::kPositioning;
  Task task = Task::kRailroad;

  bool operator==(const ClassTriple& o) const {
    return quality == o.quality && action == o.action && task == o.task;
  }
  bool operator!=(const ClassTriple& o) const { return !(*this == o); }
};

inline int class_index(const ClassTriple& c) {
  return static_cast<int>(c.quality) * kNumActions * kNumTasks +
         static_cast<int>(c.action) * kNumTasks + static_cast<int>(c.task);
}

inline ClassTriple class_from_index(int index) {
  if (index < 0 || index >= kNumClasses) {
    throw UnknownClassId("class_from_index: index " + std::to_string(index) + " not in [0, " +
                         std::to_string(kNumClasses) + ")");
  }
  ClassTriple c;
  c.quality = static_cast<Quality>(index / (kNumActions * kNumTasks));
  c.action = static_cast<Action>((index / kNumTasks) % kNumActions);
  c.task = static_cast<Task>(index % kNumTasks);
  return c;
}

inline std::array<ClassTriple, kNumClasses> all_classes() {
  std::array<ClassTriple, kNumClasses> out;
  for (int i = 0; i < kNumClasses; ++i) {
    out[static_cast<std::size_t>(i)] = class_from_index(i);
  }
  return out;
}

/// Compact slug, e.g. "ideal_driving_railroad"; used in clip ids and paths.
inline std::string class_slug(const ClassTriple& c) {
  return std::string(quality_name(c.quality)) + "_" + action_name(c.action) + "_" +
         task_name(c.task);
}

/// One expert label: which sub-stitch happened, how well, and when.
struct SubStitchAnnotation {
  std::string session_id;
  Task task = Task::kRailroad;
  Action action = Action::kPositioning;
  Quality quality = Quality::kIdeal;
  double start_time = 0.0;  // seconds
  double end_time = 0.0;    // seconds

  ClassTriple triple() const { return ClassTriple{quality, action, task}; }
};

inline void validate_annotation(const SubStitchAnnotation& a) {
  require(a.start_time < a.end_time,
          "annotation for session \"" + a.session_id + "\": start_time (" +
              std::to_string(a.start_time) + ") must be < end_time (" +
              std::to_string(a.end_time) + ")");
}

}  // namespace stitchflow
