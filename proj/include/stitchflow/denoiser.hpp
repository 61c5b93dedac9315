// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Velocity-prediction transformer over latent videos.
//
// Token layout: [time token, condition token, latent tokens...] where latent
// tokens enumerate (t', h', w') positions row-major. Latent channels enter
// through in_proj and leave through out_proj (applied to latent rows only).
// Blocks are pre-LN attention + MLP with optional per-head QK normalization
// and per-block skipping; every linear can carry a low-rank adapter delta.
//
// Forward passes can record a ForwardCache, through which
// denoise_backward() propagates exact analytic gradients.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stitchflow/errors.hpp"
#include "stitchflow/rng.hpp"
#include "stitchflow/taxonomy.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

struct DenoiserConfig {
  int layers = 4;
  int model_width = 64;
  int heads = 4;
  bool qk_normalization = true;
  int latent_channels = 8;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

inline void validate_denoiser_config(const DenoiserConfig& cfg) {
  require(cfg.layers >= 1 && cfg.model_width >= 6 && cfg.heads >= 1 && cfg.latent_channels >= 1,
          "denoiser config: all dimensions must be positive (width >= 6)");
  require(cfg.model_width % cfg.heads == 0, "denoiser config: width must divide into heads");
  require(cfg.model_width % 2 == 0, "denoiser config: width must be even for sin/cos pairs");
}

inline constexpr int kPrefixTokens = 2;      // time token + condition token
inline constexpr double kQkNormFloor = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Parameters

template <typename S>
struct LinearP {
  Mat<S> w;
  Vec<S> b;
};

template <typename S>
struct LayerNormP {
  Vec<S> gamma, beta;
};

template <typename S>
struct BlockP {
  LayerNormP<S> ln1, ln2;
  LinearP<S> wq, wk, wv, wo;  // D x D
  LinearP<S> fc1;             // 4D x D
  LinearP<S> fc2;             // D x 4D
};

template <typename S>
struct DenoiserParams {
  LinearP<S> in_proj;    // D x C
  LinearP<S> time_proj;  // D x D
  Mat<S> cond_table;     // D x (kNumClasses + 1); column kNullConditionId = null
  std::vector<BlockP<S>> blocks;
  LayerNormP<S> ln_f;
  LinearP<S> out_proj;  // C x D

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f("in_proj.w", self.in_proj.w);
    f("in_proj.b", self.in_proj.b);
    f("time_proj.w", self.time_proj.w);
    f("time_proj.b", self.time_proj.b);
    f("cond_table", self.cond_table);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& blk = self.blocks[i];
      const std::string base = "blocks." + std::to_string(i) + ".";
      f(base + "ln1.gamma", blk.ln1.gamma);
      f(base + "ln1.beta", blk.ln1.beta);
      f(base + "attn.q.w", blk.wq.w);
      f(base + "attn.q.b", blk.wq.b);
      f(base + "attn.k.w", blk.wk.w);
      f(base + "attn.k.b", blk.wk.b);
      f(base + "attn.v.w", blk.wv.w);
      f(base + "attn.v.b", blk.wv.b);
      f(base + "attn.o.w", blk.wo.w);
      f(base + "attn.o.b", blk.wo.b);
      f(base + "ln2.gamma", blk.ln2.gamma);
      f(base + "ln2.beta", blk.ln2.beta);
      f(base + "mlp.fc1.w", blk.fc1.w);
      f(base + "mlp.fc1.b", blk.fc1.b);
      f(base + "mlp.fc2.w", blk.fc2.w);
      f(base + "mlp.fc2.b", blk.fc2.b);
    }
    f("ln_f.gamma", self.ln_f.gamma);
    f("ln_f.beta", self.ln_f.beta);
    f("out_proj.w", self.out_proj.w);
    f("out_proj.b", self.out_proj.b);
  }
};

/// Allocates zero parameters of the configured shapes.
template <typename S>
DenoiserParams<S> alloc_denoiser(const DenoiserConfig& cfg) {
  validate_denoiser_config(cfg);
  const int d = cfg.model_width;
  const int c = cfg.latent_channels;
  DenoiserParams<S> p;
  const auto zeros = [](LinearP<S>& lin, int rows, int cols) {
    lin.w = Mat<S>::Zero(rows, cols);
    lin.b = Vec<S>::Zero(rows);
  };
  zeros(p.in_proj, d, c);
  zeros(p.time_proj, d, d);
  p.cond_table = Mat<S>::Zero(d, kNumClasses + 1);
  p.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& blk : p.blocks) {
    blk.ln1 = {Vec<S>::Zero(d), Vec<S>::Zero(d)};
    blk.ln2 = {Vec<S>::Zero(d), Vec<S>::Zero(d)};
    zeros(blk.wq, d, d);
    zeros(blk.wk, d, d);
    zeros(blk.wv, d, d);
    zeros(blk.wo, d, d);
    zeros(blk.fc1, 4 * d, d);
    zeros(blk.fc2, d, 4 * d);
  }
  p.ln_f = {Vec<S>::Zero(d), Vec<S>::Zero(d)};
  zeros(p.out_proj, c, d);
  return p;
}

/// Random initialization. The output projection starts at zero so an
/// untrained model predicts zero velocity; layer norms start at identity.
template <typename S>
DenoiserParams<S> init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  DenoiserParams<S> p = alloc_denoiser<S>(cfg);
  const S w_std = static_cast<S>(0.02);
  const auto fill = [&rng](Mat<S>& m, S std) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<S>(rng.normal()) * std;
    }
  };
  fill(p.in_proj.w, w_std);
  fill(p.time_proj.w, w_std);
  fill(p.cond_table, static_cast<S>(1));
  for (auto& blk : p.blocks) {
    blk.ln1.gamma.setOnes();
    blk.ln2.gamma.setOnes();
    fill(blk.wq.w, w_std);
    fill(blk.wk.w, w_std);
    fill(blk.wv.w, w_std);
    fill(blk.wo.w, w_std);
    fill(blk.fc1.w, w_std);
    fill(blk.fc2.w, w_std);
  }
  p.ln_f.gamma.setOnes();
  return p;
}

inline std::uint64_t fnv1a_bytes(const void* data, std::size_t n,
                                 std::uint64_t h = 1469598103934665603ull) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

/// Order-stable content hash of every parameter tensor (frozen-base checks).
template <typename S>
std::uint64_t denoiser_param_hash(const DenoiserParams<S>& p) {
  std::uint64_t h = 1469598103934665603ull;
  p.visit([&h](const std::string& name, const auto& tensor) {
    h = fnv1a_bytes(name.data(), name.size(), h);
    h = fnv1a_bytes(tensor.data(), sizeof(S) * static_cast<std::size_t>(tensor.size()), h);
  });
  return h;
}

// ---------------------------------------------------------------------------
// Low-rank adapter attachment (construction and persistence live in lora.hpp)

template <typename S>
struct LoRAEntry {
  Mat<S> a;  // rank x d_in
  Mat<S> b;  // d_out x rank
};

template <typename S>
struct LoRAAdapter {
  int rank = 0;
  double alpha = 0.0;
  std::map<std::string, LoRAEntry<S>> entries;  // keyed by linear target name

  S scale() const { return static_cast<S>(alpha / static_cast<double>(rank)); }
};

/// Linear targets eligible for adapter injection, in visitation order.
inline std::vector<std::string> lora_linear_targets(const DenoiserConfig& cfg) {
  std::vector<std::string> out;
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string base = "blocks." + std::to_string(i) + ".";
    for (const char* leaf : {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"}) {
      out.push_back(base + leaf);
    }
  }
  return out;
}

namespace denoiser_detail {

template <typename S>
Mat<S> effective_weight(const LinearP<S>& lin, const std::string& target,
                        const LoRAAdapter<S>* adapter) {
  if (adapter != nullptr) {
    const auto it = adapter->entries.find(target);
    if (it != adapter->entries.end()) {
      return lin.w + adapter->scale() * (it->second.b * it->second.a);
    }
  }
  return lin.w;
}

/// Routes a gradient w.r.t. an effective weight into base and adapter grads.
template <typename S>
void route_weight_grad(const Mat<S>& dw_eff, const std::string& target,
                       const LoRAAdapter<S>* adapter, Mat<S>& dw_base,
                       LoRAAdapter<S>* adapter_grads) {
  dw_base += dw_eff;
  if (adapter != nullptr && adapter_grads != nullptr) {
    const auto it = adapter->entries.find(target);
    if (it != adapter->entries.end()) {
      auto& g = adapter_grads->entries.at(target);
      g.a += adapter->scale() * it->second.b.transpose() * dw_eff;
      g.b += adapter->scale() * dw_eff * it->second.a.transpose();
    }
  }
}

}  // namespace denoiser_detail

// ---------------------------------------------------------------------------
// Conditioning

template <typename S>
struct ConditioningSignal {
  /// Class triple, or std::nullopt for the reserved null condition.
  std::optional<ClassTriple> class_ids;
  /// Present iff sampling/training image-to-video: latent of shape (1, H', W', C).
  std::optional<Latent<S>> first_frame_latent;
  /// Optional per-latent-frame mask; 1 = clean frame excluded from the loss.
  std::vector<std::uint8_t> clean_frame_mask;

  /// Frames excluded from the loss: the explicit mask if set, else frame 0
  /// when first-frame conditioning is active.
  std::vector<std::uint8_t> effective_clean_mask(int latent_frames) const {
    if (!clean_frame_mask.empty()) {
      require(static_cast<int>(clean_frame_mask.size()) == latent_frames,
              "conditioning mask length does not match latent frame count");
      return clean_frame_mask;
    }
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(latent_frames), 0);
    if (first_frame_latent.has_value() && latent_frames > 0) mask[0] = 1;
    return mask;
  }
};

template <typename S>
int condition_index(const ConditioningSignal<S>& cond) {
  if (!cond.class_ids.has_value()) return kNullConditionId;
  const int idx = class_index(*cond.class_ids);
  if (idx < 0 || idx >= kNumClasses) {
    throw UnknownClassId("condition class index " + std::to_string(idx) + " out of range");
  }
  return idx;
}

/// The learned embedding column for a conditioning signal.
template <typename S>
Vec<S> embed_condition(const ConditioningSignal<S>& cond, const DenoiserParams<S>& params) {
  return params.cond_table.col(condition_index(cond));
}

/// Replaces latent frame 0 with the conditioning frame; frames >= 1 unchanged.
template <typename S>
Latent<S> apply_first_frame_conditioning(const Latent<S>& x_t,
                                         const ConditioningSignal<S>& cond) {
  if (!cond.first_frame_latent.has_value()) {
    throw PreconditionViolation("apply_first_frame_conditioning: first_frame_latent is absent");
  }
  const Latent<S>& ff = *cond.first_frame_latent;
  if (ff.frames() != 1 || ff.height() != x_t.height() || ff.width() != x_t.width() ||
      ff.channels() != x_t.channels()) {
    throw ShapeError("first-frame latent " + ff.shape_str() + " incompatible with " +
                     x_t.shape_str());
  }
  Latent<S> out = x_t;
  const Eigen::Index frame_span = out.flat().size() / out.frames();
  out.flat().head(frame_span) = ff.flat();
  return out;
}

// ---------------------------------------------------------------------------
// Embeddings

/// Sinusoidal features of the scaled timestep (input u = 1000 * t).
template <typename S>
Vec<S> time_features(double t, int width) {
  const double u = 1000.0 * t;
  Vec<S> feat(width);
  const int pairs = width / 2;
  for (int j = 0; j < pairs; ++j) {
    const double omega = std::exp(-std::log(10000.0) * static_cast<double>(j) / pairs);
    feat[2 * j] = static_cast<S>(std::sin(u * omega));
    feat[2 * j + 1] = static_cast<S>(std::cos(u * omega));
  }
  return feat;
}

/// Factorized 3D sinusoidal positions: sin/cos pairs split across the
/// (t', h', w') axes, concatenated along the feature dimension.
template <typename S>
Mat<S> factorized_pos_embedding(const DenoiserConfig& cfg, int tp, int hp, int wp) {
  const int pairs = cfg.model_width / 2;
  const int pt = pairs / 3;
  const int ph = pairs / 3;
  const int pw = pairs - pt - ph;
  Mat<S> pe(cfg.model_width, static_cast<Eigen::Index>(tp) * hp * wp);
  const auto fill_axis = [&pe](int row0, int axis_pairs, int pos, Eigen::Index col) {
    for (int j = 0; j < axis_pairs; ++j) {
      const double omega =
          std::exp(-std::log(10000.0) * static_cast<double>(j) / std::max(1, axis_pairs));
      pe(row0 + 2 * j, col) = static_cast<S>(std::sin(omega * pos));
      pe(row0 + 2 * j + 1, col) = static_cast<S>(std::cos(omega * pos));
    }
  };
  Eigen::Index col = 0;
  for (int t = 0; t < tp; ++t) {
    for (int y = 0; y < hp; ++y) {
      for (int x = 0; x < wp; ++x, ++col) {
        fill_axis(0, pt, t, col);
        fill_axis(2 * pt, ph, y, col);
        fill_axis(2 * (pt + ph), pw, x, col);
      }
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Forward pass

struct DenoiseTrace {
  int denoise_calls = 0;
  /// max | ||q or k|| - 1 | across attention inputs (qk_normalization on).
  double max_qk_norm_dev = 0.0;
};

template <typename S>
struct HeadCache {
  Mat<S> qraw, kraw;  // dh x N (pre-normalization)
  Mat<S> qn, kn, v;   // dh x N
  Mat<S> p;           // N x N attention rows (row = query)
};

template <typename S>
struct BlockCache {
  bool skipped = false;
  Mat<S> x_in;  // D x N
  Mat<S> xn1;   // LN1 normalized (pre gamma/beta) D x N
  Vec<S> rstd1;
  Mat<S> ln1_out;
  std::vector<HeadCache<S>> heads;
  Mat<S> attn_concat;  // D x N input to wo
  Mat<S> x_mid;        // after attention residual
  Mat<S> xn2;
  Vec<S> rstd2;
  Mat<S> ln2_out;
  Mat<S> h_pre, h_act;  // 4D x N
};

template <typename S>
struct ForwardCache {
  int tp = 0, hp = 0, wp = 0;
  Mat<S> latent_tokens;  // C x N_lat
  Vec<S> time_feat;      // D
  int cond_index = 0;
  std::vector<BlockCache<S>> blocks;
  Mat<S> xf;   // output of the block stack, D x N
  Mat<S> xnf;  // final LN normalized
  Vec<S> rstdf;
};

namespace denoiser_detail {

/// y = gamma * xhat + beta with xhat cached; returns y.
template <typename S>
Mat<S> layer_norm_forward(const Mat<S>& x, const LayerNormP<S>& ln, Mat<S>& xhat_out,
                          Vec<S>& rstd_out) {
  const Eigen::Index d = x.rows(), n = x.cols();
  xhat_out.resize(d, n);
  rstd_out.resize(n);
  Mat<S> y(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const S mean = x.col(j).mean();
    const S var = (x.col(j).array() - mean).square().mean();
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    rstd_out[j] = rstd;
    xhat_out.col(j) = (x.col(j).array() - mean) * rstd;
    y.col(j) = (xhat_out.col(j).array() * ln.gamma.array() + ln.beta.array()).matrix();
  }
  return y;
}

/// Backward of layer_norm_forward; accumulates parameter grads, returns dx.
template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dout, const Mat<S>& xhat, const Vec<S>& rstd,
                           const LayerNormP<S>& ln, LayerNormP<S>& dln) {
  const Eigen::Index d = xhat.rows(), n = xhat.cols();
  dln.gamma += (dout.array() * xhat.array()).rowwise().sum().matrix();
  dln.beta += dout.rowwise().sum();
  Mat<S> dx(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vec<S> dxhat = (dout.col(j).array() * ln.gamma.array()).matrix();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat.array() * xhat.col(j).array()).mean();
    dx.col(j) = (rstd[j] * (dxhat.array() - m1 - xhat.col(j).array() * m2)).matrix();
  }
  return dx;
}

template <typename S>
S gelu_scalar(S x) {
  return static_cast<S>(0.5) * x * (S(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
}

template <typename S>
S gelu_grad_scalar(S x) {
  const S phi = std::exp(-x * x / S(2)) * static_cast<S>(0.3989422804014327);
  return static_cast<S>(0.5) * (S(1) + std::erf(x * static_cast<S>(M_SQRT1_2))) + x * phi;
}

/// Normalizes columns to unit length (with a tiny floor); returns norms.
template <typename S>
Vec<S> normalize_columns(const Mat<S>& m, Mat<S>& out) {
  const Eigen::Index n = m.cols();
  Vec<S> norms(n);
  out.resize(m.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const S norm = m.col(j).norm();
    norms[j] = norm;
    out.col(j) = m.col(j) / std::max(norm, static_cast<S>(kQkNormFloor));
  }
  return norms;
}

template <typename S>
void block_forward(const BlockP<S>& blk, const std::string& base, const DenoiserConfig& cfg,
                   const LoRAAdapter<S>* adapter, Mat<S>& x, BlockCache<S>* cache,
                   DenoiseTrace* trace) {
  const int d = cfg.model_width;
  const int dh = d / cfg.heads;
  const Eigen::Index n = x.cols();

  Mat<S> xhat1;
  Vec<S> rstd1;
  const Mat<S> ln1_out = layer_norm_forward(x, blk.ln1, xhat1, rstd1);

  const Mat<S> wq = effective_weight(blk.wq, base + "attn.q", adapter);
  const Mat<S> wk = effective_weight(blk.wk, base + "attn.k", adapter);
  const Mat<S> wv = effective_weight(blk.wv, base + "attn.v", adapter);
  const Mat<S> wo = effective_weight(blk.wo, base + "attn.o", adapter);
  const Mat<S> qf = (wq * ln1_out).colwise() + blk.wq.b;
  const Mat<S> kf = (wk * ln1_out).colwise() + blk.wk.b;
  const Mat<S> vf = (wv * ln1_out).colwise() + blk.wv.b;

  Mat<S> concat(d, n);
  std::vector<HeadCache<S>> head_caches;
  if (cache != nullptr) head_caches.resize(static_cast<std::size_t>(cfg.heads));
  for (int h = 0; h < cfg.heads; ++h) {
    const Mat<S> qraw = qf.middleRows(h * dh, dh);
    const Mat<S> kraw = kf.middleRows(h * dh, dh);
    const Mat<S> v = vf.middleRows(h * dh, dh);
    Mat<S> qn, kn;
    S logit_scale;
    if (cfg.qk_normalization) {
      normalize_columns(qraw, qn);
      normalize_columns(kraw, kn);
      logit_scale = std::sqrt(static_cast<S>(dh));
      if (trace != nullptr) {
        for (Eigen::Index j = 0; j < n; ++j) {
          trace->max_qk_norm_dev =
              std::max(trace->max_qk_norm_dev,
                       std::abs(static_cast<double>(qn.col(j).norm()) - 1.0));
          trace->max_qk_norm_dev =
              std::max(trace->max_qk_norm_dev,
                       std::abs(static_cast<double>(kn.col(j).norm()) - 1.0));
        }
      }
    } else {
      qn = qraw;
      kn = kraw;
      logit_scale = S(1) / std::sqrt(static_cast<S>(dh));
    }
    Mat<S> logits = logit_scale * (qn.transpose() * kn);  // N x N, row = query
    Mat<S> p(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S row_max = logits.row(i).maxCoeff();
      const auto ex = (logits.row(i).array() - row_max).exp();
      p.row(i) = (ex / ex.sum()).matrix();
    }
    concat.middleRows(h * dh, dh) = v * p.transpose();
    if (cache != nullptr) {
      auto& hc = head_caches[static_cast<std::size_t>(h)];
      hc.qraw = qraw;
      hc.kraw = kraw;
      hc.qn = std::move(qn);
      hc.kn = std::move(kn);
      hc.v = v;
      hc.p = std::move(p);
    }
  }
  const Mat<S> attn_out = (wo * concat).colwise() + blk.wo.b;
  const Mat<S> x_mid = x + attn_out;

  Mat<S> xhat2;
  Vec<S> rstd2;
  const Mat<S> ln2_out = layer_norm_forward(x_mid, blk.ln2, xhat2, rstd2);
  const Mat<S> w1 = effective_weight(blk.fc1, base + "mlp.fc1", adapter);
  const Mat<S> w2 = effective_weight(blk.fc2, base + "mlp.fc2", adapter);
  const Mat<S> h_pre = (w1 * ln2_out).colwise() + blk.fc1.b;
  const Mat<S> h_act = h_pre.unaryExpr([](S v) { return gelu_scalar(v); });
  const Mat<S> mlp_out = (w2 * h_act).colwise() + blk.fc2.b;

  if (cache != nullptr) {
    cache->x_in = x;
    cache->xn1 = std::move(xhat1);
    cache->rstd1 = std::move(rstd1);
    cache->ln1_out = ln1_out;
    cache->heads = std::move(head_caches);
    cache->attn_concat = std::move(concat);
    cache->x_mid = x_mid;
    cache->xn2 = std::move(xhat2);
    cache->rstd2 = std::move(rstd2);
    cache->ln2_out = ln2_out;
    cache->h_pre = h_pre;
    cache->h_act = h_act;
  }
  x = x_mid + mlp_out;
}

}  // namespace denoiser_detail

/// Predicts flow-matching velocity for a noised latent. Pure in its inputs;
/// `skip_layers` drops whole transformer blocks (STG's weak branch), and an
/// attached adapter perturbs the targeted linears without mutating params.
template <typename S>
Latent<S> denoise(const Latent<S>& x_t, double t, const ConditioningSignal<S>& cond,
                  const DenoiserParams<S>& params, const DenoiserConfig& cfg,
                  const std::set<int>& skip_layers = {},
                  const LoRAAdapter<std::type_identity_t<S>>* adapter = nullptr,
                  DenoiseTrace* trace = nullptr,
                  ForwardCache<std::type_identity_t<S>>* cache = nullptr) {
  validate_denoiser_config(cfg);
  if (x_t.channels() != cfg.latent_channels) {
    throw ShapeError("denoise: latent has " + std::to_string(x_t.channels()) +
                     " channels, config expects " + std::to_string(cfg.latent_channels));
  }
  if (t < 0.0 || t > 1.0) {
    throw PreconditionViolation("denoise: t must lie in [0, 1]");
  }
  for (const int layer : skip_layers) {
    if (layer < 0 || layer >= cfg.layers) {
      throw InvalidLayerIndex("skip layer " + std::to_string(layer) + " outside 0.." +
                              std::to_string(cfg.layers - 1));
    }
  }
  if (trace != nullptr) ++trace->denoise_calls;

  const int d = cfg.model_width;
  const Eigen::Index n_lat = static_cast<Eigen::Index>(x_t.frames()) * x_t.height() * x_t.width();
  const Eigen::Index n = n_lat + kPrefixTokens;

  const Eigen::Map<const Mat<S>> latent_tokens(x_t.flat().data(), cfg.latent_channels, n_lat);
  const Vec<S> tfeat = time_features<S>(t, d);
  const int cidx = condition_index(cond);

  Mat<S> x(d, n);
  x.col(0) = denoiser_detail::effective_weight(params.time_proj, "time_proj", adapter) * tfeat +
             params.time_proj.b;
  x.col(1) = params.cond_table.col(cidx);
  x.rightCols(n_lat) =
      ((denoiser_detail::effective_weight(params.in_proj, "in_proj", adapter) * latent_tokens)
           .colwise() +
       params.in_proj.b) +
      factorized_pos_embedding<S>(cfg, x_t.frames(), x_t.height(), x_t.width());

  if (cache != nullptr) {
    cache->tp = x_t.frames();
    cache->hp = x_t.height();
    cache->wp = x_t.width();
    cache->latent_tokens = latent_tokens;
    cache->time_feat = tfeat;
    cache->cond_index = cidx;
    cache->blocks.assign(static_cast<std::size_t>(cfg.layers), BlockCache<S>{});
  }

  for (int layer = 0; layer < cfg.layers; ++layer) {
    BlockCache<S>* bc = (cache != nullptr) ? &cache->blocks[static_cast<std::size_t>(layer)]
                                           : nullptr;
    if (skip_layers.count(layer) != 0) {
      if (bc != nullptr) bc->skipped = true;
      continue;
    }
    const std::string base = "blocks." + std::to_string(layer) + ".";
    denoiser_detail::block_forward(params.blocks[static_cast<std::size_t>(layer)], base, cfg,
                                   adapter, x, bc, trace);
  }

  Mat<S> xnf;
  Vec<S> rstdf;
  const Mat<S> ln_out = denoiser_detail::layer_norm_forward(x, params.ln_f, xnf, rstdf);
  if (cache != nullptr) {
    cache->xf = x;
    cache->xnf = std::move(xnf);
    cache->rstdf = std::move(rstdf);
  }

  const Mat<S> v =
      (denoiser_detail::effective_weight(params.out_proj, "out_proj", adapter) *
       ln_out.rightCols(n_lat))
          .colwise() +
      params.out_proj.b;
  Latent<S> out(x_t.frames(), x_t.height(), x_t.width(), cfg.latent_channels);
  Eigen::Map<Mat<S>>(out.flat().data(), cfg.latent_channels, n_lat) = v;
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

/// Propagates dL/d(velocity) through a cached forward pass, accumulating into
/// `grads` (same layout as params) and, when given, adapter gradients for the
/// attached adapter's targets.
template <typename S>
void denoise_backward(const Latent<S>& dv, const ForwardCache<S>& cache,
                      const DenoiserParams<S>& params, const DenoiserConfig& cfg,
                      DenoiserParams<S>& grads, const LoRAAdapter<S>* adapter = nullptr,
                      LoRAAdapter<S>* adapter_grads = nullptr) {
  using namespace denoiser_detail;
  const int d = cfg.model_width;
  const int dh = d / cfg.heads;
  const Eigen::Index n_lat = cache.latent_tokens.cols();
  const Eigen::Index n = n_lat + kPrefixTokens;

  const Eigen::Map<const Mat<S>> dv_mat(dv.flat().data(), cfg.latent_channels, n_lat);

  // Final projection (latent rows only) and final layer norm.
  const Mat<S> ln_out_lat =
      ((cache.xnf.rightCols(n_lat).array().colwise() * params.ln_f.gamma.array()).colwise() +
       params.ln_f.beta.array())
          .matrix();
  route_weight_grad<S>(dv_mat * ln_out_lat.transpose(), "out_proj", adapter, grads.out_proj.w,
                       adapter_grads);
  grads.out_proj.b += dv_mat.rowwise().sum();
  Mat<S> dln_out = Mat<S>::Zero(d, n);
  dln_out.rightCols(n_lat) =
      effective_weight(params.out_proj, "out_proj", adapter).transpose() * dv_mat;
  Mat<S> dx = layer_norm_backward(dln_out, cache.xnf, cache.rstdf, params.ln_f, grads.ln_f);

  for (int layer = cfg.layers - 1; layer >= 0; --layer) {
    const BlockCache<S>& bc = cache.blocks[static_cast<std::size_t>(layer)];
    if (bc.skipped) continue;
    const BlockP<S>& blk = params.blocks[static_cast<std::size_t>(layer)];
    BlockP<S>& gblk = grads.blocks[static_cast<std::size_t>(layer)];
    const std::string base = "blocks." + std::to_string(layer) + ".";

    const Mat<S> w1 = effective_weight(blk.fc1, base + "mlp.fc1", adapter);
    const Mat<S> w2 = effective_weight(blk.fc2, base + "mlp.fc2", adapter);
    const Mat<S> wq = effective_weight(blk.wq, base + "attn.q", adapter);
    const Mat<S> wk = effective_weight(blk.wk, base + "attn.k", adapter);
    const Mat<S> wv = effective_weight(blk.wv, base + "attn.v", adapter);
    const Mat<S> wo = effective_weight(blk.wo, base + "attn.o", adapter);

    // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
    const Mat<S>& dmlp_out = dx;  // residual add passes dx through
    route_weight_grad<S>(dmlp_out * bc.h_act.transpose(), base + "mlp.fc2", adapter, gblk.fc2.w,
                         adapter_grads);
    gblk.fc2.b += dmlp_out.rowwise().sum();
    Mat<S> dh_act = w2.transpose() * dmlp_out;
    const Mat<S> dh_pre =
        (dh_act.array() * bc.h_pre.unaryExpr([](S v) { return gelu_grad_scalar(v); }).array())
            .matrix();
    route_weight_grad<S>(dh_pre * bc.ln2_out.transpose(), base + "mlp.fc1", adapter, gblk.fc1.w,
                         adapter_grads);
    gblk.fc1.b += dh_pre.rowwise().sum();
    const Mat<S> dln2_out = w1.transpose() * dh_pre;
    Mat<S> dx_mid = dx + layer_norm_backward(dln2_out, bc.xn2, bc.rstd2, blk.ln2, gblk.ln2);

    // Attention branch: x_mid = x_in + wo(concat(heads(ln1(x_in)))).
    const Mat<S>& dattn_out = dx_mid;
    route_weight_grad<S>(dattn_out * bc.attn_concat.transpose(), base + "attn.o", adapter,
                         gblk.wo.w, adapter_grads);
    gblk.wo.b += dattn_out.rowwise().sum();
    const Mat<S> dconcat = wo.transpose() * dattn_out;

    Mat<S> dqf(d, n), dkf(d, n), dvf(d, n);
    const S logit_scale = cfg.qk_normalization ? std::sqrt(static_cast<S>(dh))
                                               : S(1) / std::sqrt(static_cast<S>(dh));
    for (int h = 0; h < cfg.heads; ++h) {
      const HeadCache<S>& hc = bc.heads[static_cast<std::size_t>(h)];
      const Mat<S> dout_h = dconcat.middleRows(h * dh, dh);
      // head_out = v * p^T
      dvf.middleRows(h * dh, dh) = dout_h * hc.p;
      Mat<S> dp = dout_h.transpose() * hc.v;  // N x N
      Mat<S> dlogits(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const S dot = dp.row(i).dot(hc.p.row(i));
        dlogits.row(i) = (hc.p.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      const Mat<S> dqn = logit_scale * (hc.kn * dlogits.transpose());
      const Mat<S> dkn = logit_scale * (hc.qn * dlogits);
      if (cfg.qk_normalization) {
        for (Eigen::Index j = 0; j < n; ++j) {
          const S qnorm = hc.qraw.col(j).norm();
          if (qnorm > static_cast<S>(kQkNormFloor)) {
            const S dot = hc.qn.col(j).dot(dqn.col(j));
            dqf.col(j).segment(h * dh, dh) = (dqn.col(j) - hc.qn.col(j) * dot) / qnorm;
          } else {
            dqf.col(j).segment(h * dh, dh) = dqn.col(j) / static_cast<S>(kQkNormFloor);
          }
          const S knorm = hc.kraw.col(j).norm();
          if (knorm > static_cast<S>(kQkNormFloor)) {
            const S dot = hc.kn.col(j).dot(dkn.col(j));
            dkf.col(j).segment(h * dh, dh) = (dkn.col(j) - hc.kn.col(j) * dot) / knorm;
          } else {
            dkf.col(j).segment(h * dh, dh) = dkn.col(j) / static_cast<S>(kQkNormFloor);
          }
        }
      } else {
        dqf.middleRows(h * dh, dh) = dqn;
        dkf.middleRows(h * dh, dh) = dkn;
      }
    }
    route_weight_grad<S>(dqf * bc.ln1_out.transpose(), base + "attn.q", adapter, gblk.wq.w,
                         adapter_grads);
    gblk.wq.b += dqf.rowwise().sum();
    route_weight_grad<S>(dkf * bc.ln1_out.transpose(), base + "attn.k", adapter, gblk.wk.w,
                         adapter_grads);
    gblk.wk.b += dkf.rowwise().sum();
    route_weight_grad<S>(dvf * bc.ln1_out.transpose(), base + "attn.v", adapter, gblk.wv.w,
                         adapter_grads);
    gblk.wv.b += dvf.rowwise().sum();
    const Mat<S> dln1_out =
        wq.transpose() * dqf + wk.transpose() * dkf + wv.transpose() * dvf;
    dx = dx_mid + layer_norm_backward(dln1_out, bc.xn1, bc.rstd1, blk.ln1, gblk.ln1);
  }

  // Embedding gradients.
  route_weight_grad<S>(dx.col(0) * cache.time_feat.transpose(), "time_proj", adapter,
                       grads.time_proj.w, adapter_grads);
  grads.time_proj.b += dx.col(0);
  grads.cond_table.col(cache.cond_index) += dx.col(1);
  const Mat<S> dlat = dx.rightCols(n_lat);
  route_weight_grad<S>(dlat * cache.latent_tokens.transpose(), "in_proj", adapter,
                       grads.in_proj.w, adapter_grads);
  grads.in_proj.b += dlat.rowwise().sum();
}

// ---------------------------------------------------------------------------
// Persistence

}  // namespace stitchflow

#include "stitchflow/checkpoint.hpp"

namespace stitchflow {

inline void save_denoiser(const std::filesystem::path& path, const DenoiserParams<float>& params,
                          const DenoiserConfig& cfg) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "denoiser";
  ckpt.metadata["layers"] = cfg.layers;
  ckpt.metadata["model_width"] = cfg.model_width;
  ckpt.metadata["heads"] = cfg.heads;
  ckpt.metadata["qk_normalization"] = cfg.qk_normalization;
  ckpt.metadata["latent_channels"] = cfg.latent_channels;
  ckpt.metadata["positional_embedding"] = "factorized_sin3d";
  params.visit([&ckpt](const std::string& name, const auto& tensor) {
    using T = std::decay_t<decltype(tensor)>;
    if constexpr (std::is_same_v<T, Mat<float>>) {
      ckpt.put_matrix(name, tensor);
    } else {
      ckpt.put_vector(name, tensor);
    }
  });
  save_checkpoint(path, ckpt);
}

inline std::pair<DenoiserParams<float>, DenoiserConfig> load_denoiser(
    const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  expect_metadata<std::string>(ckpt, "kind", "denoiser");
  DenoiserConfig cfg;
  try {
    cfg.layers = ckpt.metadata.at("layers").get<int>();
    cfg.model_width = ckpt.metadata.at("model_width").get<int>();
    cfg.heads = ckpt.metadata.at("heads").get<int>();
    cfg.qk_normalization = ckpt.metadata.at("qk_normalization").get<bool>();
    cfg.latent_channels = ckpt.metadata.at("latent_channels").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("denoiser metadata incomplete: ") + e.what());
  }
  validate_denoiser_config(cfg);
  DenoiserParams<float> p = alloc_denoiser<float>(cfg);
  p.visit([&ckpt](const std::string& name, auto& tensor) {
    using T = std::decay_t<decltype(tensor)>;
    if constexpr (std::is_same_v<T, Mat<float>>) {
      const Mat<float> loaded = ckpt.matrix<float>(name);
      if (loaded.rows() != tensor.rows() || loaded.cols() != tensor.cols()) {
        throw CorruptCheckpoint("tensor '" + name + "' shape disagrees with config");
      }
      tensor = loaded;
    } else {
      const Vec<float> loaded = ckpt.vector<float>(name);
      if (loaded.size() != tensor.size()) {
        throw CorruptCheckpoint("tensor '" + name + "' size disagrees with config");
      }
      tensor = loaded;
    }
  });
  return {std::move(p), cfg};
}

}  // namespace stitchflow
