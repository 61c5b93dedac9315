// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Hierarchical run configuration: a JSON document with sections for data
// synthesis, codec, denoiser, training, sampling, and evaluation. Parsing is
// strict (unknown keys are errors) and every resolved value — defaults
// included — can be echoed back as JSON.

#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "stitchflow/codec.hpp"
#include "stitchflow/dataset.hpp"
#include "stitchflow/denoiser.hpp"
#include "stitchflow/errors.hpp"
#include "stitchflow/flow.hpp"
#include "stitchflow/guidance.hpp"

namespace stitchflow {

struct DataConfig {
  int width = 64;
  int height = 64;
  int frame_count = 17;
  int seeds_per_class = 8;
  double fps = 8.0;
};

struct EvalConfig {
  int latency_runs = 10;
  int seeds_per_class = 20;
  int l2_pairs = 4;
  std::uint64_t holdout_seed = 1234;
};

struct RunConfig {
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  DataConfig data;
  CodecConfig codec;                // c_lat doubles as the denoiser channel count
  CodecTrainOptions codec_train;
  DenoiserConfig denoiser;
  TrainConfig train;
  GuidanceConfig guidance = GuidanceConfig::cfg(3.0);
  int sample_steps = 16;
  EvalConfig eval;

  Bucket bucket() const { return Bucket{data.width, data.height, data.frame_count}; }
};

namespace config_detail {

/// Strict section reader: typed extraction with field-qualified errors, and
/// an unknown-key sweep at the end of each section.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string prefix)
      : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config: section '" + prefix_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: field '" + qualify(key) + "' has the wrong type");
    }
  }

  void read_section(const char* key) { seen_.insert(key); }

  bool has(const char* key) const { return j_.contains(key); }

  const nlohmann::json& sub(const char* key) const { return j_.at(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (seen_.find(key) == seen_.end()) {
        throw ConfigError("config: unknown field '" + qualify(key) + "'");
      }
    }
  }

 private:
  std::string qualify(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

inline void fail_field(const std::string& field, const std::string& why) {
  throw ConfigError("config: field '" + field + "' " + why);
}

}  // namespace config_detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using config_detail::SectionReader;
  RunConfig cfg;
  SectionReader top(j, "");
  top.read("out_dir", cfg.out_dir);
  top.read("seed", cfg.seed);
  top.read("sample_steps", cfg.sample_steps);

  top.read_section("data");
  if (top.has("data")) {
    SectionReader s(top.sub("data"), "data");
    s.read("width", cfg.data.width);
    s.read("height", cfg.data.height);
    s.read("frame_count", cfg.data.frame_count);
    s.read("seeds_per_class", cfg.data.seeds_per_class);
    s.read("fps", cfg.data.fps);
    s.finish();
  }

  top.read_section("codec");
  if (top.has("codec")) {
    SectionReader s(top.sub("codec"), "codec");
    s.read("f_s", cfg.codec.f_s);
    s.read("f_t", cfg.codec.f_t);
    s.read("c_lat", cfg.codec.c_lat);
    s.read("train_steps", cfg.codec_train.steps);
    s.read("lr", cfg.codec_train.lr);
    s.read("batch_clips", cfg.codec_train.batch_clips);
    s.finish();
  }

  top.read_section("denoiser");
  if (top.has("denoiser")) {
    SectionReader s(top.sub("denoiser"), "denoiser");
    s.read("layers", cfg.denoiser.layers);
    s.read("model_width", cfg.denoiser.model_width);
    s.read("heads", cfg.denoiser.heads);
    s.read("qk_normalization", cfg.denoiser.qk_normalization);
    s.finish();
  }

  top.read_section("train");
  if (top.has("train")) {
    SectionReader s(top.sub("train"), "train");
    std::string mode = train_mode_name(cfg.train.mode);
    s.read("mode", mode);
    cfg.train.mode = train_mode_from_name(mode);
    s.read("epochs", cfg.train.epochs);
    s.read("max_steps", cfg.train.max_steps);
    s.read("batch_size", cfg.train.batch_size);
    s.read("learning_rate", cfg.train.learning_rate);
    s.read("condition_dropout_prob", cfg.train.condition_dropout_prob);
    s.read("lora_rank", cfg.train.lora_rank);
    s.read("lora_alpha", cfg.train.lora_alpha);
    s.read("first_frame_conditioning", cfg.train.first_frame_conditioning);
    s.finish();
  }

  top.read_section("sample");
  if (top.has("sample")) {
    SectionReader s(top.sub("sample"), "sample");
    std::string mode = guidance_mode_name(cfg.guidance.mode);
    s.read("guidance", mode);
    try {
      cfg.guidance.mode = guidance_mode_from_name(mode);
    } catch (const InvalidGuidance& e) {
      throw ConfigError(std::string("config: field 'sample.guidance': ") + e.what());
    }
    s.read("scale", cfg.guidance.scale);
    std::vector<int> skip(cfg.guidance.skip_layers.begin(), cfg.guidance.skip_layers.end());
    s.read("skip_layers", skip);
    cfg.guidance.skip_layers = std::set<int>(skip.begin(), skip.end());
    s.read("steps", cfg.sample_steps);
    s.finish();
  }

  top.read_section("eval");
  if (top.has("eval")) {
    SectionReader s(top.sub("eval"), "eval");
    s.read("latency_runs", cfg.eval.latency_runs);
    s.read("seeds_per_class", cfg.eval.seeds_per_class);
    s.read("l2_pairs", cfg.eval.l2_pairs);
    s.read("holdout_seed", cfg.eval.holdout_seed);
    s.finish();
  }

  top.finish();
  return cfg;
}

/// Cross-field validation with the failing field named. Also resolves the
/// denoiser's channel count from the codec and defaults the layer-skip set.
inline void validate_run_config(RunConfig& cfg) {
  using config_detail::fail_field;
  if (cfg.out_dir.empty()) fail_field("out_dir", "must not be empty");
  if (cfg.data.width < 8 || cfg.data.height < 8) {
    fail_field("data.width/height", "must be at least 8");
  }
  if (cfg.data.seeds_per_class < 1) fail_field("data.seeds_per_class", "must be >= 1");
  if (!(cfg.data.fps > 0.0)) fail_field("data.fps", "must be > 0");
  if (cfg.sample_steps < 1) fail_field("sample.steps", "must be >= 1");
  if (cfg.eval.latency_runs < 1) fail_field("eval.latency_runs", "must be >= 1");
  if (cfg.eval.seeds_per_class < 1) fail_field("eval.seeds_per_class", "must be >= 1");
  if (cfg.eval.l2_pairs < 1) fail_field("eval.l2_pairs", "must be >= 1");
  if (cfg.codec_train.steps < 1) fail_field("codec.train_steps", "must be >= 1");

  try {
    validate_codec_config(cfg.codec);
    check_pixel_shape(cfg.data.frame_count, cfg.data.height, cfg.data.width, cfg.codec);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: data/codec shapes: ") + e.what());
  }
  cfg.denoiser.latent_channels = cfg.codec.c_lat;
  try {
    validate_denoiser_config(cfg.denoiser);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: denoiser: ") + e.what());
  }
  try {
    validate_train_config(cfg.train);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: train: ") + e.what());
  }
  if (cfg.guidance.mode == GuidanceMode::kStg && cfg.guidance.skip_layers.empty()) {
    cfg.guidance.skip_layers = default_stg_skip_layers(cfg.denoiser);
  }
  for (const int layer : cfg.guidance.skip_layers) {
    if (layer < 0 || layer >= cfg.denoiser.layers) {
      fail_field("sample.skip_layers", "contains out-of-range layer index " +
                                           std::to_string(layer));
    }
  }
  try {
    validate_guidance(cfg.guidance);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: sample: ") + e.what());
  }
}

/// The complete resolved configuration, defaults included, as JSON.
inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["out_dir"] = cfg.out_dir;
  j["seed"] = cfg.seed;
  j["data"] = {{"width", cfg.data.width},
               {"height", cfg.data.height},
               {"frame_count", cfg.data.frame_count},
               {"seeds_per_class", cfg.data.seeds_per_class},
               {"fps", cfg.data.fps}};
  j["codec"] = {{"f_s", cfg.codec.f_s},
                {"f_t", cfg.codec.f_t},
                {"c_lat", cfg.codec.c_lat},
                {"train_steps", cfg.codec_train.steps},
                {"lr", cfg.codec_train.lr},
                {"batch_clips", cfg.codec_train.batch_clips}};
  j["denoiser"] = {{"layers", cfg.denoiser.layers},
                   {"model_width", cfg.denoiser.model_width},
                   {"heads", cfg.denoiser.heads},
                   {"qk_normalization", cfg.denoiser.qk_normalization}};
  j["train"] = {{"mode", train_mode_name(cfg.train.mode)},
                {"epochs", cfg.train.epochs},
                {"max_steps", cfg.train.max_steps},
                {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate},
                {"condition_dropout_prob", cfg.train.condition_dropout_prob},
                {"lora_rank", cfg.train.lora_rank},
                {"lora_alpha", cfg.train.lora_alpha},
                {"first_frame_conditioning", cfg.train.first_frame_conditioning}};
  j["sample"] = {{"guidance", guidance_mode_name(cfg.guidance.mode)},
                 {"scale", cfg.guidance.scale},
                 {"skip_layers", std::vector<int>(cfg.guidance.skip_layers.begin(),
                                                  cfg.guidance.skip_layers.end())},
                 {"steps", cfg.sample_steps}};
  j["eval"] = {{"latency_runs", cfg.eval.latency_runs},
               {"seeds_per_class", cfg.eval.seeds_per_class},
               {"l2_pairs", cfg.eval.l2_pairs},
               {"holdout_seed", cfg.eval.holdout_seed}};
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace stitchflow
