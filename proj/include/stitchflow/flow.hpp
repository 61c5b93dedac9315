// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Rectified-flow training and sampling. The forward process interpolates
// x_t = (1 - t) * x0 + t * x1 between data x0 and Gaussian noise x1; the
// model regresses the straight-line velocity x1 - x0, and sampling walks an
// Euler integrator from t = 1 back to t = 0.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "stitchflow/adam.hpp"
#include "stitchflow/captions.hpp"
#include "stitchflow/codec.hpp"
#include "stitchflow/dataset.hpp"
#include "stitchflow/denoiser.hpp"
#include "stitchflow/frames_io.hpp"
#include "stitchflow/guidance.hpp"
#include "stitchflow/lora.hpp"
#include "stitchflow/rng.hpp"

namespace stitchflow {

// ---------------------------------------------------------------------------
// Interpolation

template <typename S>
struct FlowMatchSample {
  Latent<S> x0;        // data
  Latent<S> x1;        // noise
  double t = 0.0;      // interpolation time in [0, 1]
  Latent<S> x_t;       // (1 - t) * x0 + t * x1
  Latent<S> v_target;  // x1 - x0
};

template <typename S>
FlowMatchSample<S> make_flow_sample(const Latent<S>& x0, const Latent<S>& x1, double t) {
  require(t >= 0.0 && t <= 1.0, "make_flow_sample: t must lie in [0, 1]");
  check_same_shape(x0, x1, "make_flow_sample");
  FlowMatchSample<S> s{x0, x1, t, x0, x0};
  s.x_t.flat() = static_cast<S>(1.0 - t) * x0.flat() + static_cast<S>(t) * x1.flat();
  s.v_target.flat() = x1.flat() - x0.flat();
  return s;
}

/// Fills a same-shape tensor with standard normal noise from `rng`.
template <typename S>
Latent<S> gaussian_like(const Latent<S>& ref, Rng& rng) {
  Latent<S> z(ref.frames(), ref.height(), ref.width(), ref.channels());
  for (Eigen::Index i = 0; i < z.flat().size(); ++i) {
    z.flat()[i] = static_cast<S>(rng.normal());
  }
  return z;
}

template <typename S>
FlowMatchSample<S> make_flow_sample(const Latent<S>& x0, double t, Rng& rng) {
  return make_flow_sample(x0, gaussian_like(x0, rng), t);
}

/// Copy of the first latent frame as a single-frame latent.
template <typename S>
Latent<S> first_latent_frame(const Latent<S>& z) {
  Latent<S> ff(1, z.height(), z.width(), z.channels());
  ff.flat() = z.flat().head(ff.flat().size());
  return ff;
}

// ---------------------------------------------------------------------------
// Training loss

namespace flow_detail {

/// diff_out = v_hat - v_target with clean frames zeroed; returns the number
/// of latent positions that participate in the loss.
template <typename S>
Eigen::Index masked_diff(const Latent<S>& v_hat, const Latent<S>& v_target,
                         const std::vector<std::uint8_t>& clean_mask, Latent<S>& diff_out) {
  check_same_shape(v_hat, v_target, "velocity loss");
  diff_out = v_hat;
  diff_out.flat() -= v_target.flat();
  const Eigen::Index frame_span = diff_out.flat().size() / diff_out.frames();
  Eigen::Index clean_frames = 0;
  if (!clean_mask.empty()) {
    require(static_cast<int>(clean_mask.size()) == diff_out.frames(),
            "velocity loss: mask length does not match latent frame count");
    for (int f = 0; f < diff_out.frames(); ++f) {
      if (clean_mask[static_cast<std::size_t>(f)] != 0) {
        diff_out.flat().segment(f * frame_span, frame_span).setZero();
        ++clean_frames;
      }
    }
  }
  const Eigen::Index n_pos =
      (diff_out.frames() - clean_frames) * (frame_span / diff_out.channels());
  require(n_pos > 0, "velocity loss: every latent frame is masked out");
  return n_pos;
}

}  // namespace flow_detail

/// Mean over unmasked latent positions of the channel-summed squared velocity
/// error. A model that always predicts zero scores the mean squared norm of
/// the target.
template <typename S>
double velocity_mse(const Latent<S>& v_hat, const Latent<S>& v_target,
                    const std::vector<std::uint8_t>& clean_mask = {}) {
  Latent<S> diff = v_hat;
  const Eigen::Index n_pos = flow_detail::masked_diff(v_hat, v_target, clean_mask, diff);
  return static_cast<double>(diff.flat().square().sum()) / static_cast<double>(n_pos);
}

template <typename S>
struct TrainExample {
  Latent<S> latent;
  ConditioningSignal<S> cond;
};

/// One stochastic flow-matching loss evaluation over a batch: per example,
/// draw t ~ U[0,1] and fresh noise, drop the class condition with probability
/// `condition_dropout_prob`, and average the squared velocity error over all
/// latent positions of non-clean frames. When `grads` is given, parameter
/// gradients of the batch loss are accumulated into it (and adapter gradients
/// into `adapter_grads` when attached).
template <typename S>
double flow_matching_loss(const std::vector<TrainExample<S>>& batch,
                          const DenoiserParams<S>& params, const DenoiserConfig& cfg, Rng& rng,
                          double condition_dropout_prob = 0.1,
                          const LoRAAdapter<std::type_identity_t<S>>* adapter = nullptr,
                          DenoiserParams<std::type_identity_t<S>>* grads = nullptr,
                          LoRAAdapter<std::type_identity_t<S>>* adapter_grads = nullptr) {
  require(!batch.empty(), "flow_matching_loss: empty batch");
  require(condition_dropout_prob >= 0.0 && condition_dropout_prob <= 1.0,
          "flow_matching_loss: dropout probability must lie in [0, 1]");
  const auto b = static_cast<double>(batch.size());
  double total = 0.0;

  for (const TrainExample<S>& ex : batch) {
    const double t = rng.uniform01();
    FlowMatchSample<S> s = make_flow_sample(ex.latent, t, rng);
    ConditioningSignal<S> cond = ex.cond;
    if (rng.bernoulli(condition_dropout_prob)) cond.class_ids.reset();
    if (cond.first_frame_latent.has_value()) {
      s.x_t = apply_first_frame_conditioning(s.x_t, cond);
    }

    const std::vector<std::uint8_t> mask = cond.effective_clean_mask(s.x_t.frames());

    ForwardCache<S> cache;
    const Latent<S> v_hat = denoise(s.x_t, t, cond, params, cfg, {}, adapter, nullptr,
                                    grads != nullptr ? &cache : nullptr);

    Latent<S> diff = v_hat;
    const Eigen::Index n_pos = flow_detail::masked_diff(v_hat, s.v_target, mask, diff);
    total += static_cast<double>(diff.flat().square().sum()) / static_cast<double>(n_pos);

    if (grads != nullptr) {
      Latent<S> dv = diff;
      dv.flat() *= static_cast<S>(2.0 / (b * static_cast<double>(n_pos)));
      denoise_backward(dv, cache, params, cfg, *grads, adapter, adapter_grads);
    }
  }
  return total / b;
}

// ---------------------------------------------------------------------------
// Training loop

enum class TrainMode { kFullFinetune, kLora };

inline std::string train_mode_name(TrainMode mode) {
  return mode == TrainMode::kLora ? "lora" : "full_finetune";
}

inline TrainMode train_mode_from_name(const std::string& name) {
  if (name == "lora") return TrainMode::kLora;
  if (name == "full_finetune" || name == "full") return TrainMode::kFullFinetune;
  throw ConfigError("unknown train mode '" + name + "' (expected lora|full_finetune)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::kLora;
  int epochs = 3;      // text-to-video default; image-to-video runs use ~10x more
  int max_steps = 0;   // 0 = derive step count from epochs
  int batch_size = 1;
  double learning_rate = 1e-3;
  double condition_dropout_prob = 0.1;
  std::uint64_t seed = 0;
  int lora_rank = 8;
  double lora_alpha = 8.0;
  std::vector<std::string> lora_targets;  // empty = attention + feed-forward linears
  bool first_frame_conditioning = false;  // train with the first latent frame held clean
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1 && cfg.max_steps < 1) {
    throw ConfigError("train config: need epochs >= 1 or max_steps >= 1");
  }
  if (cfg.batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be > 0");
  if (cfg.condition_dropout_prob < 0.0 || cfg.condition_dropout_prob > 1.0) {
    throw ConfigError("train config: condition_dropout_prob must lie in [0, 1]");
  }
  if (cfg.mode == TrainMode::kLora && cfg.lora_rank < 1) {
    throw ConfigError("train config: lora_rank must be >= 1");
  }
}

struct StepMetric {
  long step = 0;       // 1-based
  double loss = 0.0;   // batch loss at this step
  double seconds = 0.0;
};

struct TrainResult {
  DenoiserParams<float> params;  // trained weights (untouched base copy in adapter mode)
  LoRAAdapter<float> adapter;    // populated iff has_adapter
  bool has_adapter = false;
  std::vector<StepMetric> metrics;
};

namespace flow_detail {

struct FlatView {
  float* data = nullptr;
  Eigen::Index n = 0;
};

template <typename P>
std::vector<FlatView> tensor_views(P& params) {
  std::vector<FlatView> views;
  params.visit([&views](const std::string&, auto& tensor) {
    views.push_back({tensor.data(), tensor.size()});
  });
  return views;
}

inline std::vector<FlatView> adapter_views(LoRAAdapter<float>& adapter) {
  std::vector<FlatView> views;
  for (auto& [target, entry] : adapter.entries) {
    views.push_back({entry.a.data(), entry.a.size()});
    views.push_back({entry.b.data(), entry.b.size()});
  }
  return views;
}

inline void adam_step_all(std::vector<Adam<float>>& bank, const std::vector<FlatView>& params,
                          const std::vector<FlatView>& grads) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Eigen::Map<Eigen::VectorXf> p(params[i].data, params[i].n);
    Eigen::Map<const Adam<float>::Flat> g(grads[i].data, grads[i].n);
    bank[i].step(p, g);
  }
}

}  // namespace flow_detail

/// Fine-tunes on pre-encoded latents. In adapter mode the base weights are
/// bitwise frozen and only the injected low-rank factors move; in full mode
/// every parameter moves.
inline TrainResult train_on_latents(const std::vector<TrainExample<float>>& examples,
                                    const DenoiserParams<float>& base, const DenoiserConfig& dcfg,
                                    const TrainConfig& tcfg) {
  if (examples.empty()) throw EmptyManifest("training set has no clips");
  validate_train_config(tcfg);
  validate_denoiser_config(dcfg);

  TrainResult result;
  result.params = base;
  const long n = static_cast<long>(examples.size());
  const long steps_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
  const long steps =
      tcfg.max_steps > 0 ? tcfg.max_steps : static_cast<long>(tcfg.epochs) * steps_per_epoch;

  Rng rng(Rng::mix(tcfg.seed, 0x747261696eULL));
  const AdamConfig<float> acfg{static_cast<float>(tcfg.learning_rate), 0.9f, 0.999f, 1e-8f};

  DenoiserParams<float> grads = alloc_denoiser<float>(dcfg);
  const std::vector<flow_detail::FlatView> grad_views = flow_detail::tensor_views(grads);

  std::vector<flow_detail::FlatView> param_views;
  std::vector<flow_detail::FlatView> adapter_grad_views;
  LoRAAdapter<float> adapter_grads;
  if (tcfg.mode == TrainMode::kLora) {
    const std::vector<std::string> targets =
        tcfg.lora_targets.empty() ? lora_linear_targets(dcfg) : tcfg.lora_targets;
    result.adapter = inject(result.params, targets, tcfg.lora_rank, tcfg.lora_alpha,
                            Rng::mix(tcfg.seed, 0x696e6a65637400ULL));
    result.has_adapter = true;
    adapter_grads = zero_like(result.adapter);
    param_views = flow_detail::adapter_views(result.adapter);
    adapter_grad_views = flow_detail::adapter_views(adapter_grads);
  } else {
    param_views = flow_detail::tensor_views(result.params);
  }
  std::vector<Adam<float>> bank(param_views.size(), Adam<float>(acfg));

  std::vector<TrainExample<float>> batch;
  for (long step = 1; step <= steps; ++step) {
    const auto started = std::chrono::steady_clock::now();
    batch.clear();
    for (int i = 0; i < tcfg.batch_size; ++i) {
      batch.push_back(examples[static_cast<std::size_t>(rng.uniform_int(0, n - 1))]);
    }
    for (const flow_detail::FlatView& v : grad_views) {
      Eigen::Map<Eigen::VectorXf>(v.data, v.n).setZero();
    }
    double loss = 0.0;
    if (tcfg.mode == TrainMode::kLora) {
      for (const flow_detail::FlatView& v : adapter_grad_views) {
        Eigen::Map<Eigen::VectorXf>(v.data, v.n).setZero();
      }
      loss = flow_matching_loss(batch, result.params, dcfg, rng, tcfg.condition_dropout_prob,
                                &result.adapter, &grads, &adapter_grads);
      flow_detail::adam_step_all(bank, param_views, adapter_grad_views);
    } else {
      loss = flow_matching_loss(batch, result.params, dcfg, rng, tcfg.condition_dropout_prob,
                                nullptr, &grads, nullptr);
      flow_detail::adam_step_all(bank, param_views, grad_views);
    }
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - started;
    result.metrics.push_back({step, loss, elapsed.count()});
  }
  return result;
}

/// Encodes every manifest clip through the codec and fine-tunes the denoiser.
/// `frames_root` anchors the per-record frame directories.
inline TrainResult train(const DatasetManifest& manifest,
                         const std::filesystem::path& frames_root,
                         const CodecParams<float>& codec, const CodecConfig& codec_cfg,
                         const DenoiserParams<float>& base, const DenoiserConfig& dcfg,
                         const TrainConfig& tcfg) {
  if (manifest.records.empty()) throw EmptyManifest("training manifest has no clips");
  if (codec_cfg.c_lat != dcfg.latent_channels) {
    throw ConfigMismatch("codec produces " + std::to_string(codec_cfg.c_lat) +
                         " latent channels but the denoiser expects " +
                         std::to_string(dcfg.latent_channels));
  }
  std::vector<TrainExample<float>> examples;
  examples.reserve(manifest.records.size());
  for (const ClipRecord& record : manifest.records) {
    const Video<float> clip = read_clip_frames(frames_root / record.frames_path);
    if (clip.frames() != record.frame_count || clip.height() != record.height ||
        clip.width() != record.width) {
      throw ShapeError("clip '" + record.clip_id + "' on disk is " + clip.shape_str() +
                       " but the manifest says " + std::to_string(record.frame_count) + "x" +
                       std::to_string(record.height) + "x" + std::to_string(record.width));
    }
    TrainExample<float> ex{encode(clip, codec, codec_cfg), {}};
    ex.cond.class_ids = record.annotation.triple();
    if (tcfg.first_frame_conditioning) {
      ex.cond.first_frame_latent = first_latent_frame(ex.latent);
    }
    examples.push_back(std::move(ex));
  }
  return train_on_latents(examples, base, dcfg, tcfg);
}

/// Writes step metrics as tab-separated lines: step, loss, wall seconds.
inline void write_metrics(const std::filesystem::path& path,
                          const std::vector<StepMetric>& metrics) {
  std::ofstream out(path);
  if (!out) throw ArtifactMissing("cannot write metrics file " + path.string());
  out << "#step\tloss\tseconds\n";
  char line[96];
  for (const StepMetric& m : metrics) {
    std::snprintf(line, sizeof(line), "%ld\t%.10g\t%.6f\n", m.step, m.loss, m.seconds);
    out << line;
  }
}

// ---------------------------------------------------------------------------
// Sampling

/// Euler integration of dx/dt = v(x, t) from t = 1 down to t = 0 on a uniform
/// grid of `steps` intervals: x <- x - dt * v(x, t).
template <typename S, typename VelocityFn>
Latent<S> integrate_flow(const Latent<S>& x_init, int steps, VelocityFn&& velocity) {
  require(steps >= 1, "integrate_flow: steps must be >= 1");
  Latent<S> x = x_init;
  const double dt = 1.0 / static_cast<double>(steps);
  for (int i = 0; i < steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    const Latent<S> v = velocity(x, t);
    check_same_shape(x, v, "integrate_flow");
    x.flat() -= static_cast<S>(dt) * v.flat();
  }
  return x;
}

/// Draws a latent by integrating the guided velocity field from seeded noise.
/// With first-frame conditioning the clean frame is imposed on the initial
/// noise and re-imposed after every Euler step, so it is exact at every time.
template <typename S>
Latent<S> sample(const DenoiserParams<S>& params, const DenoiserConfig& cfg,
                 const ConditioningSignal<S>& cond, const GuidanceConfig& guidance, int steps,
                 int latent_frames, int latent_height, int latent_width, std::uint64_t seed,
                 const LoRAAdapter<std::type_identity_t<S>>* adapter = nullptr,
                 DenoiseTrace* trace = nullptr) {
  require(steps >= 1, "sample: steps must be >= 1");
  validate_guidance(guidance);
  Rng rng(Rng::mix(seed, 0x73616d706c65ULL));
  Latent<S> x(latent_frames, latent_height, latent_width, cfg.latent_channels);
  for (Eigen::Index i = 0; i < x.flat().size(); ++i) {
    x.flat()[i] = static_cast<S>(rng.normal());
  }
  const bool i2v = cond.first_frame_latent.has_value();
  if (i2v) x = apply_first_frame_conditioning(x, cond);
  const double dt = 1.0 / static_cast<double>(steps);
  for (int i = 0; i < steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    const Latent<S> v = guided_velocity(x, t, cond, params, cfg, guidance, adapter, trace);
    x.flat() -= static_cast<S>(dt) * v.flat();
    if (i2v) x = apply_first_frame_conditioning(x, cond);
  }
  return x;
}

/// Caption in, pixels out: parse the caption to a class triple, sample a
/// latent for the requested bucket, decode. When `first_frame` is given the
/// generation is conditioned on it (image-to-video).
template <typename S>
Video<S> generate_video(const std::string& caption, const Bucket& bucket,
                        const DenoiserParams<S>& dparams, const DenoiserConfig& dcfg,
                        const CodecParams<S>& cparams, const CodecConfig& ccfg,
                        const GuidanceConfig& guidance, int steps, std::uint64_t seed,
                        const Video<std::type_identity_t<S>>* first_frame = nullptr,
                        const LoRAAdapter<std::type_identity_t<S>>* adapter = nullptr,
                        DenoiseTrace* trace = nullptr) {
  if (ccfg.c_lat != dcfg.latent_channels) {
    throw ConfigMismatch("codec produces " + std::to_string(ccfg.c_lat) +
                         " latent channels but the denoiser expects " +
                         std::to_string(dcfg.latent_channels));
  }
  check_pixel_shape(bucket.frame_count, bucket.height, bucket.width, ccfg);
  const int tp = latent_frames(bucket.frame_count, ccfg);
  const int hp = bucket.height / ccfg.f_s, wp = bucket.width / ccfg.f_s;

  ConditioningSignal<S> cond;
  cond.class_ids = parse_caption(caption);
  if (first_frame != nullptr) {
    if (first_frame->frames() != 1 || first_frame->height() != bucket.height ||
        first_frame->width() != bucket.width) {
      throw ShapeError("first frame " + first_frame->shape_str() +
                       " does not match the requested bucket");
    }
    cond.first_frame_latent = encode(*first_frame, cparams, ccfg);
  }
  const Latent<S> z =
      sample(dparams, dcfg, cond, guidance, steps, tp, hp, wp, seed, adapter, trace);
  return decode(z, cparams, ccfg);
}

}  // namespace stitchflow
