// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Clip records, session cutting, and the bucketed training manifest.
// Manifests and annotation lists are line-delimited tab-separated text.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "stitchflow/captions.hpp"
#include "stitchflow/errors.hpp"
#include "stitchflow/taxonomy.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

struct ClipRecord {
  std::string clip_id;
  std::string frames_path;
  std::string caption;
  SubStitchAnnotation annotation;
  int width = 0;
  int height = 0;
  int frame_count = 0;
};

inline void validate_record(const ClipRecord& r) {
  require(r.frame_count >= 1 && r.width > 0 && r.height > 0,
          "clip record '" + r.clip_id + "' has empty dimensions");
  validate_annotation(r.annotation);
  if (r.caption != generate_caption(r.annotation)) {
    throw PreconditionViolation("clip record '" + r.clip_id +
                                "' caption does not match its annotation");
  }
}

struct Bucket {
  int width = 0;
  int height = 0;
  int frame_count = 0;
  friend bool operator==(const Bucket&, const Bucket&) = default;
};

struct DatasetManifest {
  std::vector<ClipRecord> records;
  std::vector<Bucket> buckets;
};

/// A cut clip: the manifest row plus its pixels (frames_path is assigned
/// when the frames are persisted).
struct CutClip {
  ClipRecord record;
  Video<float> frames;
};

/// Slices a session into one clip per annotation, frame range
/// [floor(start*fps), floor(end*fps)).
inline std::vector<CutClip> cut_clips(const Video<float>& session,
                                      const std::vector<SubStitchAnnotation>& annotations,
                                      double fps) {
  require(fps > 0.0, "cut_clips: fps must be positive");
  std::vector<CutClip> out;
  out.reserve(annotations.size());
  int index = 0;
  for (const SubStitchAnnotation& ann : annotations) {
    validate_annotation(ann);
    const int begin = static_cast<int>(std::floor(ann.start_time * fps));
    const int end = static_cast<int>(std::floor(ann.end_time * fps));
    if (begin < 0 || end > session.frames() || begin >= end) {
      std::ostringstream msg;
      msg << "cut_clips: span [" << ann.start_time << ", " << ann.end_time << ") of session '"
          << ann.session_id << "' maps to frames [" << begin << ", " << end
          << ") outside 0.." << session.frames();
      throw SpanOutOfRange(msg.str());
    }
    CutClip cut{ClipRecord{}, Video<float>(end - begin, session.height(), session.width(),
                                           session.channels())};
    for (int f = begin; f < end; ++f) {
      for (int y = 0; y < session.height(); ++y) {
        for (int x = 0; x < session.width(); ++x) {
          for (int c = 0; c < session.channels(); ++c) {
            cut.frames(f - begin, y, x, c) = session(f, y, x, c);
          }
        }
      }
    }
    std::ostringstream id;
    id << ann.session_id << '_' << std::setw(3) << std::setfill('0') << index++ << '_'
       << class_slug(ann.triple());
    cut.record.clip_id = id.str();
    cut.record.caption = generate_caption(ann);
    cut.record.annotation = ann;
    cut.record.width = session.width();
    cut.record.height = session.height();
    cut.record.frame_count = end - begin;
    out.push_back(std::move(cut));
  }
  return out;
}

/// Assembles a manifest, checking every record against the declared buckets
/// and the frame-count law frame_count == 1 (mod temporal_compression).
inline DatasetManifest build_manifest(const std::vector<ClipRecord>& records,
                                      const std::vector<Bucket>& buckets,
                                      int temporal_compression) {
  require(temporal_compression >= 1, "build_manifest: temporal compression must be >= 1");
  for (const Bucket& b : buckets) {
    if ((b.frame_count - 1) % temporal_compression != 0) {
      std::ostringstream msg;
      msg << "build_manifest: bucket " << b.width << 'x' << b.height << 'x' << b.frame_count
          << " violates frame_count == 1 (mod " << temporal_compression << ")";
      throw BucketMismatch(msg.str());
    }
  }
  for (const ClipRecord& r : records) {
    validate_record(r);
    const Bucket dims{r.width, r.height, r.frame_count};
    if (std::find(buckets.begin(), buckets.end(), dims) == buckets.end()) {
      std::ostringstream msg;
      msg << "build_manifest: clip '" << r.clip_id << "' at " << dims.width << 'x' << dims.height
          << 'x' << dims.frame_count << " matches no declared bucket";
      throw BucketMismatch(msg.str());
    }
  }
  return DatasetManifest{records, buckets};
}

inline std::string serialize_manifest(const DatasetManifest& m) {
  std::ostringstream out;
  for (const Bucket& b : m.buckets) {
    out << "#bucket\t" << b.width << '\t' << b.height << '\t' << b.frame_count << '\n';
  }
  for (const ClipRecord& r : m.records) {
    out << r.clip_id << '\t' << r.frames_path << '\t' << r.caption << '\t'
        << task_name(r.annotation.task) << '\t' << action_name(r.annotation.action) << '\t'
        << quality_name(r.annotation.quality) << '\t' << r.width << '\t' << r.height << '\t'
        << r.frame_count << '\n';
  }
  return out.str();
}

namespace dataset_detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace dataset_detail

/// Inverse of serialize_manifest. Loaded annotations are normalized:
/// session_id = clip_id, span [0, frame_count) seconds.
inline DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = dataset_detail::split_tabs(line);
    if (fields[0] == "#bucket") {
      if (fields.size() != 4) {
        throw ConfigError("manifest line " + std::to_string(line_no) + ": bad bucket header");
      }
      m.buckets.push_back(Bucket{std::stoi(fields[1]), std::stoi(fields[2]),
                                 std::stoi(fields[3])});
      continue;
    }
    if (fields.size() != 9) {
      throw ConfigError("manifest line " + std::to_string(line_no) + ": expected 9 fields, got " +
                        std::to_string(fields.size()));
    }
    ClipRecord r;
    r.clip_id = fields[0];
    r.frames_path = fields[1];
    r.caption = fields[2];
    r.annotation.session_id = r.clip_id;
    r.annotation.task = parse_task(fields[3]);
    r.annotation.action = parse_action(fields[4]);
    r.annotation.quality = parse_quality(fields[5]);
    r.width = std::stoi(fields[6]);
    r.height = std::stoi(fields[7]);
    r.frame_count = std::stoi(fields[8]);
    r.annotation.start_time = 0.0;
    r.annotation.end_time = static_cast<double>(r.frame_count);
    validate_record(r);
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw ArtifactMissing("save_manifest: cannot open " + path.string());
  out << serialize_manifest(m);
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactMissing("load_manifest: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str());
}

/// Annotation lists: one annotation per line, six tab-separated fields
/// (session_id, task, action, quality, start_time, end_time). Lines starting
/// with '#' are comments.
inline std::vector<SubStitchAnnotation> parse_annotations(const std::string& text) {
  std::vector<SubStitchAnnotation> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = dataset_detail::split_tabs(line);
    if (fields.size() != 6) {
      throw ConfigError("annotation line " + std::to_string(line_no) +
                        ": expected 6 fields, got " + std::to_string(fields.size()));
    }
    SubStitchAnnotation ann;
    ann.session_id = fields[0];
    ann.task = parse_task(fields[1]);
    ann.action = parse_action(fields[2]);
    ann.quality = parse_quality(fields[3]);
    ann.start_time = std::stod(fields[4]);
    ann.end_time = std::stod(fields[5]);
    validate_annotation(ann);
    out.push_back(std::move(ann));
  }
  return out;
}

inline std::string serialize_annotations(const std::vector<SubStitchAnnotation>& annotations) {
  std::ostringstream out;
  for (const SubStitchAnnotation& a : annotations) {
    out << a.session_id << '\t' << task_name(a.task) << '\t' << action_name(a.action) << '\t'
        << quality_name(a.quality) << '\t' << a.start_time << '\t' << a.end_time << '\n';
  }
  return out.str();
}

inline std::vector<SubStitchAnnotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactMissing("load_annotations: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_annotations(buf.str());
}

}  // namespace stitchflow
