// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Sampling-time guidance: classifier-free guidance extrapolates away from the
// unconditional prediction, spatiotemporal guidance extrapolates away from a
// layer-skipped (weakened) prediction. Both are pure combinators over
// velocity fields plus a dispatcher that runs the right denoiser calls.

#pragma once

#include <set>
#include <string>

#include "stitchflow/denoiser.hpp"
#include "stitchflow/errors.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

enum class GuidanceMode { kNone, kCfg, kStg };

inline std::string guidance_mode_name(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::kNone: return "none";
    case GuidanceMode::kCfg: return "cfg";
    case GuidanceMode::kStg: return "stg";
  }
  throw PreconditionViolation("unhandled guidance mode");
}

inline GuidanceMode guidance_mode_from_name(const std::string& name) {
  if (name == "none") return GuidanceMode::kNone;
  if (name == "cfg") return GuidanceMode::kCfg;
  if (name == "stg") return GuidanceMode::kStg;
  throw InvalidGuidance("unknown guidance mode '" + name + "' (expected none|cfg|stg)");
}

/// The middle third of the block stack, the default attack point for
/// layer-skip guidance. Never empty for a model with at least one block.
inline std::set<int> default_stg_skip_layers(const DenoiserConfig& config) {
  const int lo = config.layers / 3;
  const int hi = (2 * config.layers) / 3;
  std::set<int> layers;
  for (int i = lo; i < hi; ++i) layers.insert(i);
  if (layers.empty() && config.layers > 0) layers.insert(config.layers / 2);
  return layers;
}

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::kNone;
  double scale = 1.0;
  std::set<int> skip_layers;  // required for stg

  static GuidanceConfig none() { return {GuidanceMode::kNone, 1.0, {}}; }
  static GuidanceConfig cfg(double scale = 3.0) { return {GuidanceMode::kCfg, scale, {}}; }
  static GuidanceConfig stg(const DenoiserConfig& model, double scale = 1.0) {
    return {GuidanceMode::kStg, scale, default_stg_skip_layers(model)};
  }

  bool operator==(const GuidanceConfig&) const = default;
};

inline void validate_guidance(const GuidanceConfig& config) {
  if (!std::isfinite(config.scale)) throw InvalidGuidance("guidance scale must be finite");
  if (config.mode == GuidanceMode::kStg && config.skip_layers.empty()) {
    throw InvalidGuidance("stg requires a non-empty skip layer set");
  }
}

/// v_uncond + scale * (v_cond - v_uncond). scale 0 returns v_uncond exactly,
/// scale 1 returns v_cond exactly.
template <typename S>
Latent<S> cfg_combine(const Latent<S>& v_cond, const Latent<S>& v_uncond, double scale) {
  check_same_shape(v_cond, v_uncond, "cfg_combine");
  Latent<S> out = v_uncond;
  out.flat() += static_cast<S>(scale) * (v_cond.flat() - v_uncond.flat());
  return out;
}

/// v_cond + scale * (v_cond - v_skip). scale 0 returns v_cond exactly.
template <typename S>
Latent<S> stg_combine(const Latent<S>& v_cond, const Latent<S>& v_skip, double scale) {
  check_same_shape(v_cond, v_skip, "stg_combine");
  Latent<S> out = v_cond;
  out.flat() += static_cast<S>(scale) * (v_cond.flat() - v_skip.flat());
  return out;
}

/// One guided velocity estimate. Denoiser call count per mode: none 1,
/// cfg 2 (conditional + class-dropped), stg 2 (full + layer-skipped).
template <typename S>
Latent<S> guided_velocity(const Latent<S>& x_t, double t, const ConditioningSignal<S>& cond,
                          const DenoiserParams<S>& params, const DenoiserConfig& config,
                          const GuidanceConfig& guidance,
                          const LoRAAdapter<std::type_identity_t<S>>* adapter = nullptr,
                          DenoiseTrace* trace = nullptr) {
  validate_guidance(guidance);
  switch (guidance.mode) {
    case GuidanceMode::kNone:
      return denoise(x_t, t, cond, params, config, {}, adapter, trace);
    case GuidanceMode::kCfg: {
      ConditioningSignal<S> uncond = cond;
      uncond.class_ids.reset();
      const Latent<S> v_cond = denoise(x_t, t, cond, params, config, {}, adapter, trace);
      const Latent<S> v_uncond = denoise(x_t, t, uncond, params, config, {}, adapter, trace);
      return cfg_combine(v_cond, v_uncond, guidance.scale);
    }
    case GuidanceMode::kStg: {
      const Latent<S> v_cond = denoise(x_t, t, cond, params, config, {}, adapter, trace);
      const Latent<S> v_skip =
          denoise(x_t, t, cond, params, config, guidance.skip_layers, adapter, trace);
      return stg_combine(v_cond, v_skip, guidance.scale);
    }
  }
  throw PreconditionViolation("unhandled guidance mode");
}

}  // namespace stitchflow
