// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocol: pixel-space L2 reconstruction, mean-of-N-runs latency,
// and class adherence scored by the motion oracle. Reports serialize as flat
// text documents keyed by a config fingerprint so result tables can be
// regenerated from artifacts alone.

#pragma once

#include <chrono>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stitchflow/captions.hpp"
#include "stitchflow/codec.hpp"
#include "stitchflow/dataset.hpp"
#include "stitchflow/denoiser.hpp"
#include "stitchflow/flow.hpp"
#include "stitchflow/guidance.hpp"
#include "stitchflow/oracle.hpp"
#include "stitchflow/synth.hpp"

namespace stitchflow {

// ---------------------------------------------------------------------------
// L2 reconstruction

/// Mean squared error between two clips after mapping pixel values from
/// [-1, 1] to [0, 1]. Symmetric, non-negative, zero iff identical.
template <typename S>
double l2_reconstruction(const Video<S>& generated, const Video<S>& ground_truth) {
  check_same_shape(generated, ground_truth, "l2_reconstruction");
  // (a+1)/2 - (b+1)/2 == (a-b)/2, so the range map is a factor 1/4 on the MSE.
  const auto diff = (generated.flat() - ground_truth.flat()) * S(0.5);
  return static_cast<double>(diff.square().sum()) /
         static_cast<double>(generated.flat().size());
}

// ---------------------------------------------------------------------------
// Latency

struct LatencyReport {
  double mean_s = 0.0;
  std::vector<double> runs_s;
};

/// Times `closure` end to end: one untimed warm-up run, then `runs` timed
/// runs, strictly sequential. The mean is the exact arithmetic mean of the
/// reported samples.
template <typename Fn>
LatencyReport benchmark_latency(Fn&& closure, int runs = 10) {
  require(runs >= 1, "benchmark_latency: runs must be >= 1");
  closure();  // warm-up
  LatencyReport report;
  report.runs_s.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    closure();
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    report.runs_s.push_back(dt.count());
  }
  double sum = 0.0;
  for (const double s : report.runs_s) sum += s;
  report.mean_s = sum / static_cast<double>(runs);
  return report;
}

// ---------------------------------------------------------------------------
// Class adherence

struct AdherenceResult {
  long hits = 0;
  long total = 0;
  double fraction() const {
    return total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  }
};

/// Scores any generator against the oracle: for every requested class,
/// generate `seeds_per_class` clips and count those whose oracle verdict
/// (quality, task) matches the request. Untrackable clips count as misses.
template <typename GenFn>
AdherenceResult score_adherence(GenFn&& generate, const std::vector<ClassTriple>& classes,
                                int seeds_per_class, const OracleConfig& oracle = {}) {
  require(!classes.empty(), "score_adherence: need at least one class");
  require(seeds_per_class >= 1, "score_adherence: seeds_per_class must be >= 1");
  AdherenceResult result;
  for (const ClassTriple& cls : classes) {
    for (int rep = 0; rep < seeds_per_class; ++rep) {
      const Video<float> clip = generate(cls, rep);
      ++result.total;
      try {
        const OracleVerdict verdict = oracle_classify(clip, oracle);
        if (verdict.quality == cls.quality && verdict.task == cls.task) ++result.hits;
      } catch (const NoTrackableObject&) {
        // miss, not an error
      }
    }
  }
  return result;
}

/// Adherence of a trained model: per (class, rep), build the templated
/// caption, sample with the given guidance, decode, and score.
inline AdherenceResult class_adherence(const DenoiserParams<float>& params,
                                       const DenoiserConfig& dcfg,
                                       const LoRAAdapter<float>* adapter,
                                       const CodecParams<float>& codec, const CodecConfig& ccfg,
                                       const GuidanceConfig& guidance, int steps,
                                       const Bucket& bucket,
                                       const std::vector<ClassTriple>& classes,
                                       int seeds_per_class, const OracleConfig& oracle = {},
                                       std::uint64_t base_seed = 0) {
  const auto generate = [&](const ClassTriple& cls, int rep) {
    const std::uint64_t seed = Rng::mix(
        base_seed, (static_cast<std::uint64_t>(class_index(cls)) << 20) |
                       static_cast<std::uint64_t>(rep));
    return generate_video(generate_caption(cls), bucket, params, dcfg, codec, ccfg, guidance,
                          steps, seed, nullptr, adapter);
  };
  return score_adherence(generate, classes, seeds_per_class, oracle);
}

/// The four needle-driving classes (quality x task), the default adherence
/// probe: driving strokes carry the strongest oriented motion signal.
inline std::vector<ClassTriple> driving_classes() {
  std::vector<ClassTriple> out;
  for (const Quality q : {Quality::kIdeal, Quality::kNonIdeal}) {
    for (const Task t : {Task::kRailroad, Task::kBackhand}) {
      out.push_back(ClassTriple{q, Action::kDriving, t});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  double l2_loss = 0.0;
  double latency_mean_s = 0.0;
  int latency_runs = 0;
  double class_adherence = 0.0;
  std::string config_fingerprint;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline void validate_eval_report(const EvalReport& r) {
  require(r.latency_runs >= 1, "eval report: latency_runs must be >= 1");
  require(r.class_adherence >= 0.0 && r.class_adherence <= 1.0,
          "eval report: class_adherence must lie in [0, 1]");
  require(!r.config_fingerprint.empty(), "eval report: config fingerprint missing");
}

/// Fingerprint tying a report to its provenance: model parameter hash,
/// guidance mode/scale, sampler steps, and pixel bucket.
inline std::string config_fingerprint(std::uint64_t model_hash, const GuidanceConfig& guidance,
                                      int steps, const Bucket& bucket) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "model=%016llx guidance=%s scale=%g steps=%d bucket=%dx%dx%d",
                static_cast<unsigned long long>(model_hash),
                guidance_mode_name(guidance.mode).c_str(), guidance.scale, steps, bucket.width,
                bucket.height, bucket.frame_count);
  return std::string(buf);
}

inline std::string serialize_eval_report(const EvalReport& r) {
  validate_eval_report(r);
  std::ostringstream out;
  char num[64];
  std::snprintf(num, sizeof(num), "%.17g", r.l2_loss);
  out << "l2_loss\t" << num << "\n";
  std::snprintf(num, sizeof(num), "%.17g", r.latency_mean_s);
  out << "latency_mean_s\t" << num << "\n";
  out << "latency_runs\t" << r.latency_runs << "\n";
  std::snprintf(num, sizeof(num), "%.17g", r.class_adherence);
  out << "class_adherence\t" << num << "\n";
  out << "config_fingerprint\t" << r.config_fingerprint << "\n";
  return out.str();
}

inline EvalReport parse_eval_report(const std::string& text) {
  std::map<std::string, std::string> fields;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ConfigError("eval report: malformed line \"" + line + "\"");
    }
    fields[line.substr(0, tab)] = line.substr(tab + 1);
  }
  for (const char* key :
       {"l2_loss", "latency_mean_s", "latency_runs", "class_adherence", "config_fingerprint"}) {
    if (fields.find(key) == fields.end()) {
      throw ConfigError(std::string("eval report: missing field \"") + key + "\"");
    }
  }
  EvalReport r;
  try {
    r.l2_loss = std::stod(fields.at("l2_loss"));
    r.latency_mean_s = std::stod(fields.at("latency_mean_s"));
    r.latency_runs = std::stoi(fields.at("latency_runs"));
    r.class_adherence = std::stod(fields.at("class_adherence"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("eval report: unparsable number: ") + e.what());
  }
  r.config_fingerprint = fields.at("config_fingerprint");
  validate_eval_report(r);
  return r;
}

/// One results-table row: fingerprint, reconstruction loss, inference time.
inline std::string eval_table_row(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s\t%.5f\t%.3f", r.config_fingerprint.c_str(), r.l2_loss,
                r.latency_mean_s);
  return std::string(buf);
}

}  // namespace stitchflow
