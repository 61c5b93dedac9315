// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Compressive video autoencoder. Pixel clips are split into an f_s x f_s
// patch of frame 0 (its own pathway, so the first latent frame depends on
// pixel frame 0 alone) and f_s x f_s x f_t tubes of the remaining frames.
// Both pathways are linear maps to c_lat channels; decoding is the linear
// transpose shape-wise followed by tanh to pin pixels to [-1, 1].
//
// Shape law: (T, H, W, 3) -> (1 + (T-1)/f_t, H/f_s, W/f_s, c_lat).

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "stitchflow/adam.hpp"
#include "stitchflow/checkpoint.hpp"
#include "stitchflow/errors.hpp"
#include "stitchflow/rng.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

struct CodecConfig {
  int f_s = 8;   // spatial compression factor
  int f_t = 4;   // temporal compression factor
  int c_lat = 8;
  long param_budget = 1L << 26;

  friend bool operator==(const CodecConfig&, const CodecConfig&) = default;
};

inline void validate_codec_config(const CodecConfig& cfg) {
  require(cfg.f_s >= 1 && cfg.f_t >= 1 && cfg.c_lat >= 1,
          "codec config: compression factors and latent channels must be >= 1");
}

inline int body_patch_dim(const CodecConfig& cfg) {
  return cfg.f_t * cfg.f_s * cfg.f_s * kPixelChannels;
}
inline int first_patch_dim(const CodecConfig& cfg) {
  return cfg.f_s * cfg.f_s * kPixelChannels;
}

inline long codec_param_count(const CodecConfig& cfg) {
  const long d = body_patch_dim(cfg);
  const long d0 = first_patch_dim(cfg);
  const long c = cfg.c_lat;
  return 2 * c * d + 2 * c * d0 + 2 * c + d + d0;
}

/// Latent frame count for a pixel clip of T frames; throws on invalid T.
inline int latent_frames(int t, const CodecConfig& cfg) {
  if (t < 1 || (t - 1) % cfg.f_t != 0) {
    throw ShapeError("frame count " + std::to_string(t) + " is not 1 (mod " +
                     std::to_string(cfg.f_t) + ")");
  }
  return 1 + (t - 1) / cfg.f_t;
}

inline void check_pixel_shape(int t, int h, int w, const CodecConfig& cfg) {
  (void)latent_frames(t, cfg);
  if (h % cfg.f_s != 0) {
    throw ShapeError("height " + std::to_string(h) + " not divisible by f_s=" +
                     std::to_string(cfg.f_s));
  }
  if (w % cfg.f_s != 0) {
    throw ShapeError("width " + std::to_string(w) + " not divisible by f_s=" +
                     std::to_string(cfg.f_s));
  }
}

template <typename S>
struct CodecParams {
  Mat<S> w_enc, w0_enc;  // c_lat x body_dim, c_lat x first_dim
  Vec<S> b_enc, b0_enc;  // c_lat
  Mat<S> w_dec, w0_dec;  // body_dim x c_lat, first_dim x c_lat
  Vec<S> b_dec, b0_dec;  // body_dim, first_dim

  template <typename F>
  void visit(F&& f) {
    f("w_enc", w_enc);
    f("w0_enc", w0_enc);
    f("w_dec", w_dec);
    f("w0_dec", w0_dec);
    f("b_enc", b_enc);
    f("b0_enc", b0_enc);
    f("b_dec", b_dec);
    f("b0_dec", b0_dec);
  }

  template <typename F>
  void visit(F&& f) const {
    f("w_enc", w_enc);
    f("w0_enc", w0_enc);
    f("w_dec", w_dec);
    f("w0_dec", w0_dec);
    f("b_enc", b_enc);
    f("b0_enc", b0_enc);
    f("b_dec", b_dec);
    f("b0_dec", b0_dec);
  }
};

template <typename S>
CodecParams<S> init_codec(const CodecConfig& cfg, Rng& rng) {
  validate_codec_config(cfg);
  require(codec_param_count(cfg) <= cfg.param_budget,
          "codec config exceeds its parameter budget");
  const int d = body_patch_dim(cfg);
  const int d0 = first_patch_dim(cfg);
  CodecParams<S> p;
  const auto fill = [&rng](Mat<S>& m, int rows, int cols, double scale) {
    m.resize(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        m(i, j) = static_cast<S>(rng.normal() * scale);
      }
    }
  };
  fill(p.w_enc, cfg.c_lat, d, 1.0 / std::sqrt(static_cast<double>(d)));
  fill(p.w0_enc, cfg.c_lat, d0, 1.0 / std::sqrt(static_cast<double>(d0)));
  fill(p.w_dec, d, cfg.c_lat, 1.0 / std::sqrt(static_cast<double>(cfg.c_lat)));
  fill(p.w0_dec, d0, cfg.c_lat, 1.0 / std::sqrt(static_cast<double>(cfg.c_lat)));
  p.b_enc = Vec<S>::Zero(cfg.c_lat);
  p.b0_enc = Vec<S>::Zero(cfg.c_lat);
  p.b_dec = Vec<S>::Zero(d);
  p.b0_dec = Vec<S>::Zero(d0);
  return p;
}

namespace codec_detail {

// Column layout: first-frame patches at (y', x') -> y'*W' + x'; body tubes at
// (k, y', x'), k = 1..T'-1 -> ((k-1)*H' + y')*W' + x'. Within a column the
// order is (dt, dy, dx, channel), channel fastest.

template <typename S>
Mat<S> gather_first(const Video<S>& clip, const CodecConfig& cfg) {
  const int hp = clip.height() / cfg.f_s, wp = clip.width() / cfg.f_s;
  Mat<S> x0(first_patch_dim(cfg), hp * wp);
  for (int yp = 0; yp < hp; ++yp) {
    for (int xp = 0; xp < wp; ++xp) {
      int row = 0;
      for (int dy = 0; dy < cfg.f_s; ++dy) {
        for (int dx = 0; dx < cfg.f_s; ++dx) {
          for (int c = 0; c < kPixelChannels; ++c) {
            x0(row++, yp * wp + xp) = clip(0, yp * cfg.f_s + dy, xp * cfg.f_s + dx, c);
          }
        }
      }
    }
  }
  return x0;
}

template <typename S>
Mat<S> gather_body(const Video<S>& clip, const CodecConfig& cfg) {
  const int tp = latent_frames(clip.frames(), cfg);
  const int hp = clip.height() / cfg.f_s, wp = clip.width() / cfg.f_s;
  Mat<S> x(body_patch_dim(cfg), static_cast<Eigen::Index>(tp - 1) * hp * wp);
  for (int k = 1; k < tp; ++k) {
    for (int yp = 0; yp < hp; ++yp) {
      for (int xp = 0; xp < wp; ++xp) {
        const Eigen::Index col = (static_cast<Eigen::Index>(k - 1) * hp + yp) * wp + xp;
        int row = 0;
        for (int dt = 0; dt < cfg.f_t; ++dt) {
          const int frame = 1 + (k - 1) * cfg.f_t + dt;
          for (int dy = 0; dy < cfg.f_s; ++dy) {
            for (int dx = 0; dx < cfg.f_s; ++dx) {
              for (int c = 0; c < kPixelChannels; ++c) {
                x(row++, col) = clip(frame, yp * cfg.f_s + dy, xp * cfg.f_s + dx, c);
              }
            }
          }
        }
      }
    }
  }
  return x;
}

template <typename S>
void scatter_first(const Mat<S>& y0, Video<S>& clip, const CodecConfig& cfg) {
  const int hp = clip.height() / cfg.f_s, wp = clip.width() / cfg.f_s;
  for (int yp = 0; yp < hp; ++yp) {
    for (int xp = 0; xp < wp; ++xp) {
      int row = 0;
      for (int dy = 0; dy < cfg.f_s; ++dy) {
        for (int dx = 0; dx < cfg.f_s; ++dx) {
          for (int c = 0; c < kPixelChannels; ++c) {
            clip(0, yp * cfg.f_s + dy, xp * cfg.f_s + dx, c) = y0(row++, yp * wp + xp);
          }
        }
      }
    }
  }
}

template <typename S>
void scatter_body(const Mat<S>& y, Video<S>& clip, const CodecConfig& cfg) {
  const int tp = latent_frames(clip.frames(), cfg);
  const int hp = clip.height() / cfg.f_s, wp = clip.width() / cfg.f_s;
  for (int k = 1; k < tp; ++k) {
    for (int yp = 0; yp < hp; ++yp) {
      for (int xp = 0; xp < wp; ++xp) {
        const Eigen::Index col = (static_cast<Eigen::Index>(k - 1) * hp + yp) * wp + xp;
        int row = 0;
        for (int dt = 0; dt < cfg.f_t; ++dt) {
          const int frame = 1 + (k - 1) * cfg.f_t + dt;
          for (int dy = 0; dy < cfg.f_s; ++dy) {
            for (int dx = 0; dx < cfg.f_s; ++dx) {
              for (int c = 0; c < kPixelChannels; ++c) {
                clip(frame, yp * cfg.f_s + dy, xp * cfg.f_s + dx, c) = y(row++, col);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace codec_detail

template <typename S>
Latent<S> encode(const Video<S>& clip, const CodecParams<S>& p, const CodecConfig& cfg) {
  validate_codec_config(cfg);
  require(clip.channels() == kPixelChannels, "encode: expected 3-channel pixels");
  check_pixel_shape(clip.frames(), clip.height(), clip.width(), cfg);
  const int tp = latent_frames(clip.frames(), cfg);
  const int hp = clip.height() / cfg.f_s, wp = clip.width() / cfg.f_s;

  Latent<S> z(tp, hp, wp, cfg.c_lat);
  const Mat<S> z0 = (p.w0_enc * codec_detail::gather_first(clip, cfg)).colwise() + p.b0_enc;
  for (int yp = 0; yp < hp; ++yp) {
    for (int xp = 0; xp < wp; ++xp) {
      for (int c = 0; c < cfg.c_lat; ++c) z(0, yp, xp, c) = z0(c, yp * wp + xp);
    }
  }
  if (tp > 1) {
    const Mat<S> zb = (p.w_enc * codec_detail::gather_body(clip, cfg)).colwise() + p.b_enc;
    for (int k = 1; k < tp; ++k) {
      for (int yp = 0; yp < hp; ++yp) {
        for (int xp = 0; xp < wp; ++xp) {
          const Eigen::Index col = (static_cast<Eigen::Index>(k - 1) * hp + yp) * wp + xp;
          for (int c = 0; c < cfg.c_lat; ++c) z(k, yp, xp, c) = zb(c, col);
        }
      }
    }
  }
  return z;
}

template <typename S>
Video<S> decode(const Latent<S>& z, const CodecParams<S>& p, const CodecConfig& cfg) {
  validate_codec_config(cfg);
  if (z.channels() != cfg.c_lat) {
    throw ShapeError("decode: latent has " + std::to_string(z.channels()) +
                     " channels, config expects " + std::to_string(cfg.c_lat));
  }
  const int tp = z.frames(), hp = z.height(), wp = z.width();
  const int t = 1 + (tp - 1) * cfg.f_t;

  Mat<S> z0(cfg.c_lat, hp * wp);
  for (int yp = 0; yp < hp; ++yp) {
    for (int xp = 0; xp < wp; ++xp) {
      for (int c = 0; c < cfg.c_lat; ++c) z0(c, yp * wp + xp) = z(0, yp, xp, c);
    }
  }
  Video<S> clip(t, hp * cfg.f_s, wp * cfg.f_s, kPixelChannels);
  const Mat<S> y0 = (((p.w0_dec * z0).colwise() + p.b0_dec).array().tanh()).matrix();
  codec_detail::scatter_first(y0, clip, cfg);
  if (tp > 1) {
    Mat<S> zb(cfg.c_lat, static_cast<Eigen::Index>(tp - 1) * hp * wp);
    for (int k = 1; k < tp; ++k) {
      for (int yp = 0; yp < hp; ++yp) {
        for (int xp = 0; xp < wp; ++xp) {
          const Eigen::Index col = (static_cast<Eigen::Index>(k - 1) * hp + yp) * wp + xp;
          for (int c = 0; c < cfg.c_lat; ++c) zb(c, col) = z(k, yp, xp, c);
        }
      }
    }
    const Mat<S> y = (((p.w_dec * zb).colwise() + p.b_dec).array().tanh()).matrix();
    codec_detail::scatter_body(y, clip, cfg);
  }
  return clip;
}

struct CodecTrainOptions {
  int steps = 500;
  std::uint64_t seed = 0;
  double lr = 2e-3;
  int batch_clips = 8;
  bool normalize_latents = true;  // fold latent std into the weights post-hoc
};

struct CodecTrainResult {
  CodecParams<float> params;
  std::vector<double> loss_curve;  // per-step batch MSE
};

/// Trains the autoencoder on pixel reconstruction MSE with Adam.
/// Deterministic for a fixed seed. When normalize_latents is set, per-channel
/// latent scale is folded into the weights afterwards so encode() emits
/// roughly unit-variance latents; decode(encode(x)) is unchanged by folding.
inline CodecTrainResult train_codec(const std::vector<Video<float>>& clips,
                                    const CodecConfig& cfg, const CodecTrainOptions& opt = {}) {
  require(opt.steps >= 1, "train_codec: steps must be >= 1");
  require(!clips.empty(), "train_codec: need at least one clip");
  for (const auto& clip : clips) {
    check_pixel_shape(clip.frames(), clip.height(), clip.width(), cfg);
  }

  Rng rng(Rng::mix(opt.seed, 0x636f646563ULL));
  CodecTrainResult result;
  result.params = init_codec<float>(cfg, rng);
  CodecParams<float>& p = result.params;

  AdamConfig<float> acfg;
  acfg.lr = static_cast<float>(opt.lr);
  Adam<float> opt_w_enc(acfg), opt_w0_enc(acfg), opt_w_dec(acfg), opt_w0_dec(acfg);
  Adam<float> opt_b_enc(acfg), opt_b0_enc(acfg), opt_b_dec(acfg), opt_b0_dec(acfg);

  const int batch = std::min<int>(opt.batch_clips, static_cast<int>(clips.size()));
  for (int step = 0; step < opt.steps; ++step) {
    Mat<float> dw_enc = Mat<float>::Zero(p.w_enc.rows(), p.w_enc.cols());
    Mat<float> dw0_enc = Mat<float>::Zero(p.w0_enc.rows(), p.w0_enc.cols());
    Mat<float> dw_dec = Mat<float>::Zero(p.w_dec.rows(), p.w_dec.cols());
    Mat<float> dw0_dec = Mat<float>::Zero(p.w0_dec.rows(), p.w0_dec.cols());
    Vec<float> db_enc = Vec<float>::Zero(p.b_enc.size());
    Vec<float> db0_enc = Vec<float>::Zero(p.b0_enc.size());
    Vec<float> db_dec = Vec<float>::Zero(p.b_dec.size());
    Vec<float> db0_dec = Vec<float>::Zero(p.b0_dec.size());

    std::vector<int> picks(static_cast<std::size_t>(batch));
    long element_count = 0;
    for (int b = 0; b < batch; ++b) {
      picks[static_cast<std::size_t>(b)] =
          rng.uniform_int(0, static_cast<int>(clips.size()) - 1);
      const Video<float>& clip = clips[static_cast<std::size_t>(picks[b])];
      element_count += clip.flat().size();
    }

    double loss = 0.0;
    const float inv_n = 1.0f / static_cast<float>(element_count);
    for (int b = 0; b < batch; ++b) {
      const Video<float>& clip = clips[static_cast<std::size_t>(picks[b])];
      const Mat<float> x0 = codec_detail::gather_first(clip, cfg);
      const Mat<float> z0 = (p.w0_enc * x0).colwise() + p.b0_enc;
      const Mat<float> y0 = (((p.w0_dec * z0).colwise() + p.b0_dec).array().tanh()).matrix();
      const Mat<float> g0 = 2.0f * inv_n * (y0 - x0);
      loss += static_cast<double>((y0 - x0).squaredNorm());
      const Mat<float> g0pre = (g0.array() * (1.0f - y0.array().square())).matrix();
      dw0_dec.noalias() += g0pre * z0.transpose();
      db0_dec += g0pre.rowwise().sum();
      const Mat<float> dz0 = p.w0_dec.transpose() * g0pre;
      dw0_enc.noalias() += dz0 * x0.transpose();
      db0_enc += dz0.rowwise().sum();

      if (clip.frames() > 1) {
        const Mat<float> x = codec_detail::gather_body(clip, cfg);
        const Mat<float> z = (p.w_enc * x).colwise() + p.b_enc;
        const Mat<float> y = (((p.w_dec * z).colwise() + p.b_dec).array().tanh()).matrix();
        const Mat<float> g = 2.0f * inv_n * (y - x);
        loss += static_cast<double>((y - x).squaredNorm());
        const Mat<float> gpre = (g.array() * (1.0f - y.array().square())).matrix();
        dw_dec.noalias() += gpre * z.transpose();
        db_dec += gpre.rowwise().sum();
        const Mat<float> dz = p.w_dec.transpose() * gpre;
        dw_enc.noalias() += dz * x.transpose();
        db_enc += dz.rowwise().sum();
      }
    }
    result.loss_curve.push_back(loss / static_cast<double>(element_count));

    using FlatV = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, 1>>;
    using FlatC = Tensor4<float>::Flat;
    const auto flat = [](Mat<float>& m) { return FlatV(m.data(), m.size()); };
    const auto flatg = [](const Mat<float>& m) {
      return FlatC(Eigen::Map<const FlatC>(m.data(), m.size()));
    };
    opt_w_enc.step(flat(p.w_enc), flatg(dw_enc));
    opt_w0_enc.step(flat(p.w0_enc), flatg(dw0_enc));
    opt_w_dec.step(flat(p.w_dec), flatg(dw_dec));
    opt_w0_dec.step(flat(p.w0_dec), flatg(dw0_dec));
    opt_b_enc.step(FlatV(p.b_enc.data(), p.b_enc.size()),
                   Eigen::Map<const FlatC>(db_enc.data(), db_enc.size()));
    opt_b0_enc.step(FlatV(p.b0_enc.data(), p.b0_enc.size()),
                    Eigen::Map<const FlatC>(db0_enc.data(), db0_enc.size()));
    opt_b_dec.step(FlatV(p.b_dec.data(), p.b_dec.size()),
                   Eigen::Map<const FlatC>(db_dec.data(), db_dec.size()));
    opt_b0_dec.step(FlatV(p.b0_dec.data(), p.b0_dec.size()),
                    Eigen::Map<const FlatC>(db0_dec.data(), db0_dec.size()));
  }

  if (opt.normalize_latents) {
    // Per-channel latent std over the training set, folded into the weights.
    Vec<double> sum = Vec<double>::Zero(cfg.c_lat);
    Vec<double> sumsq = Vec<double>::Zero(cfg.c_lat);
    long count = 0;
    for (const auto& clip : clips) {
      const Latent<float> z = encode(clip, p, cfg);
      const long positions = z.flat().size() / cfg.c_lat;
      for (long i = 0; i < positions; ++i) {
        for (int c = 0; c < cfg.c_lat; ++c) {
          const double v = z.flat()[i * cfg.c_lat + c];
          sum[c] += v;
          sumsq[c] += v * v;
        }
      }
      count += positions;
    }
    // Affine fold: z' = (z - mean) / std. Encoder rows absorb 1/std and the
    // shift; decoder columns absorb std and redeposit the mean in the bias,
    // so decode(encode(x)) is unchanged.
    const Mat<float> w_dec_old = p.w_dec;
    const Mat<float> w0_dec_old = p.w0_dec;
    for (int c = 0; c < cfg.c_lat; ++c) {
      const double mean = sum[c] / static_cast<double>(count);
      const double var = sumsq[c] / static_cast<double>(count) - mean * mean;
      const float scale = static_cast<float>(std::max(std::sqrt(std::max(var, 0.0)), 1e-4));
      const float shift = static_cast<float>(mean);
      p.w_enc.row(c) /= scale;
      p.w0_enc.row(c) /= scale;
      p.b_enc[c] = (p.b_enc[c] - shift) / scale;
      p.b0_enc[c] = (p.b0_enc[c] - shift) / scale;
      p.w_dec.col(c) *= scale;
      p.w0_dec.col(c) *= scale;
      p.b_dec += w_dec_old.col(c) * shift;
      p.b0_dec += w0_dec_old.col(c) * shift;
    }
  }
  return result;
}

inline void save_codec(const std::filesystem::path& path, const CodecParams<float>& params,
                       const CodecConfig& cfg) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "codec";
  ckpt.metadata["f_s"] = cfg.f_s;
  ckpt.metadata["f_t"] = cfg.f_t;
  ckpt.metadata["c_lat"] = cfg.c_lat;
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

inline std::pair<CodecParams<float>, CodecConfig> load_codec(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  expect_metadata<std::string>(ckpt, "kind", "codec");
  CodecConfig cfg;
  if (!ckpt.metadata.contains("f_s") || !ckpt.metadata.contains("f_t") ||
      !ckpt.metadata.contains("c_lat")) {
    throw CorruptCheckpoint("codec checkpoint metadata missing compression fields");
  }
  cfg.f_s = ckpt.metadata.at("f_s").get<int>();
  cfg.f_t = ckpt.metadata.at("f_t").get<int>();
  cfg.c_lat = ckpt.metadata.at("c_lat").get<int>();
  validate_codec_config(cfg);

  CodecParams<float> p;
  p.w_enc = ckpt.matrix<float>("w_enc");
  p.w0_enc = ckpt.matrix<float>("w0_enc");
  p.w_dec = ckpt.matrix<float>("w_dec");
  p.w0_dec = ckpt.matrix<float>("w0_dec");
  p.b_enc = ckpt.vector<float>("b_enc");
  p.b0_enc = ckpt.vector<float>("b0_enc");
  p.b_dec = ckpt.vector<float>("b_dec");
  p.b0_dec = ckpt.vector<float>("b0_dec");
  if (p.w_enc.rows() != cfg.c_lat || p.w_enc.cols() != body_patch_dim(cfg) ||
      p.w_dec.rows() != body_patch_dim(cfg) || p.w0_enc.cols() != first_patch_dim(cfg)) {
    throw CorruptCheckpoint("codec tensor shapes disagree with stored config");
  }
  return {std::move(p), cfg};
}

/// Loads a codec and insists it matches the expected compression settings.
inline CodecParams<float> load_codec(const std::filesystem::path& path,
                                     const CodecConfig& expected) {
  const Checkpoint ckpt = load_checkpoint(path);
  expect_metadata<std::string>(ckpt, "kind", "codec");
  expect_metadata<int>(ckpt, "f_s", expected.f_s);
  expect_metadata<int>(ckpt, "f_t", expected.f_t);
  expect_metadata<int>(ckpt, "c_lat", expected.c_lat);
  return load_codec(path).first;
}

}  // namespace stitchflow
