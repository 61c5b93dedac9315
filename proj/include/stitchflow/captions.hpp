// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Caption templating and its exact inverse. The caption grammar is closed:
// "{An ideal|A non-ideal} clip of a needle {action} action during a {task} task."

#pragma once

#include <string>
#include <string_view>

#include "stitchflow/errors.hpp"
#include "stitchflow/taxonomy.hpp"

namespace stitchflow {

inline std::string generate_caption(const ClassTriple& c) {
  const std::string lead = (c.quality == Quality::kIdeal) ? "An ideal" : "A non-ideal";
  return lead + " clip of a needle " + action_name(c.action) + " action during a " +
         task_name(c.task) + " task.";
}

inline std::string generate_caption(const SubStitchAnnotation& a) {
  validate_annotation(a);
  return generate_caption(a.triple());
}

inline ClassTriple parse_caption(const std::string& caption) {
  constexpr std::string_view kIdealLead = "An ideal clip of a needle ";
  constexpr std::string_view kNonIdealLead = "A non-ideal clip of a needle ";
  constexpr std::string_view kMid = " action during a ";
  constexpr std::string_view kTail = " task.";

  ClassTriple out;
  std::string_view rest = caption;
  if (rest.substr(0, kIdealLead.size()) == kIdealLead) {
    out.quality = Quality::kIdeal;
    rest.remove_prefix(kIdealLead.size());
  } else if (rest.substr(0, kNonIdealLead.size()) == kNonIdealLead) {
    out.quality = Quality::kNonIdeal;
    rest.remove_prefix(kNonIdealLead.size());
  } else {
    throw MalformedCaption("parse_caption: unrecognized opening in \"" + caption + "\"");
  }

  const std::size_t mid = rest.find(kMid);
  if (mid == std::string_view::npos) {
    throw MalformedCaption("parse_caption: missing \"" + std::string(kMid) + "\" in \"" +
                           caption + "\"");
  }
  const std::string action_word(rest.substr(0, mid));
  rest.remove_prefix(mid + kMid.size());

  if (rest.size() <= kTail.size() || rest.substr(rest.size() - kTail.size()) != kTail) {
    throw MalformedCaption("parse_caption: caption must end with \"" + std::string(kTail) +
                           "\": \"" + caption + "\"");
  }
  const std::string task_word(rest.substr(0, rest.size() - kTail.size()));

  try {
    out.action = parse_action(action_word);
    out.task = parse_task(task_word);
  } catch (const UnknownClassId& e) {
    throw MalformedCaption(std::string("parse_caption: ") + e.what());
  }
  return out;
}

}  // namespace stitchflow
