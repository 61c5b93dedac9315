// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "stitchflow/codec.hpp"
#include "stitchflow/synth.hpp"

using namespace stitchflow;

namespace {

Video<float> noise_clip(int t, int h, int w, std::uint64_t seed) {
  Video<float> clip(t, h, w, kPixelChannels);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < clip.flat().size(); ++i) {
    clip.flat()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  return clip;
}

}  // namespace

TEST_CASE("encode obeys the latent shape law") {
  SUBCASE("full-scale reference shape") {
    CodecConfig cfg{32, 8, 128, 1L << 26};
    Rng rng(1);
    const auto p = init_codec<float>(cfg, rng);
    Video<float> clip(49, 512, 768, kPixelChannels);
    clip.flat().setZero();
    const Latent<float> z = encode(clip, p, cfg);
    CHECK(z.frames() == 7);
    CHECK(z.height() == 16);
    CHECK(z.width() == 24);
    CHECK(z.channels() == 128);
  }
  SUBCASE("desk-scale shape") {
    CodecConfig cfg;  // 8, 4, 8
    Rng rng(1);
    const auto p = init_codec<float>(cfg, rng);
    const Latent<float> z = encode(noise_clip(17, 64, 64, 2), p, cfg);
    CHECK(z.frames() == 5);
    CHECK(z.height() == 8);
    CHECK(z.width() == 8);
    CHECK(z.channels() == 8);
  }
  SUBCASE("violations name the broken divisibility") {
    CodecConfig cfg;
    Rng rng(1);
    const auto p = init_codec<float>(cfg, rng);
    CHECK_THROWS_WITH_AS(static_cast<void>(encode(noise_clip(18, 64, 64, 3), p, cfg)),
                         doctest::Contains("mod 4"), ShapeError);
    CHECK_THROWS_WITH_AS(static_cast<void>(encode(noise_clip(17, 60, 64, 3), p, cfg)),
                         doctest::Contains("height"), ShapeError);
    CHECK_THROWS_WITH_AS(static_cast<void>(encode(noise_clip(17, 64, 60, 3), p, cfg)),
                         doctest::Contains("width"), ShapeError);
  }
  SUBCASE("randomized valid shapes round trip") {
    CodecConfig cfg;
    cfg.f_s = 4;
    cfg.f_t = 2;
    cfg.c_lat = 6;
    Rng rng(7);
    const auto p = init_codec<float>(cfg, rng);
    for (int trial = 0; trial < 20; ++trial) {
      const int t = 1 + cfg.f_t * rng.uniform_int(0, 6);
      const int h = cfg.f_s * rng.uniform_int(1, 6);
      const int w = cfg.f_s * rng.uniform_int(1, 6);
      const Latent<float> z = encode(noise_clip(t, h, w, 100 + trial), p, cfg);
      CHECK(z.frames() == 1 + (t - 1) / cfg.f_t);
      CHECK(z.height() == h / cfg.f_s);
      CHECK(z.width() == w / cfg.f_s);
      const Video<float> back = decode(z, p, cfg);
      CHECK(back.frames() == t);
      CHECK(back.height() == h);
      CHECK(back.width() == w);
    }
  }
}

TEST_CASE("decode pins values to [-1, 1] and inverts the shape law") {
  CodecConfig cfg;
  Rng rng(5);
  const auto p = init_codec<float>(cfg, rng);
  Latent<float> z(5, 8, 8, 8);
  z.flat().setZero();
  const Video<float> clip = decode(z, p, cfg);
  CHECK(clip.frames() == 17);
  CHECK(clip.height() == 64);
  CHECK(clip.width() == 64);
  CHECK(clip.flat().maxCoeff() <= 1.0f);
  CHECK(clip.flat().minCoeff() >= -1.0f);

  Latent<float> wrong(5, 8, 8, 4);
  wrong.flat().setZero();
  CHECK_THROWS_AS(static_cast<void>(decode(wrong, p, cfg)), ShapeError);
}

TEST_CASE("first latent frame depends only on pixel frame 0") {
  CodecConfig cfg;
  Rng rng(11);
  const auto p = init_codec<float>(cfg, rng);
  Video<float> clip = noise_clip(17, 64, 64, 21);
  const Latent<float> before = encode(clip, p, cfg);
  // Perturb every frame except frame 0.
  for (int f = 1; f < clip.frames(); ++f) {
    for (int y = 0; y < clip.height(); ++y) {
      for (int x = 0; x < clip.width(); ++x) {
        for (int c = 0; c < 3; ++c) clip(f, y, x, c) = -clip(f, y, x, c);
      }
    }
  }
  const Latent<float> after = encode(clip, p, cfg);
  for (int y = 0; y < before.height(); ++y) {
    for (int x = 0; x < before.width(); ++x) {
      for (int c = 0; c < before.channels(); ++c) {
        CHECK(before(0, y, x, c) == after(0, y, x, c));
      }
    }
  }
  // Later latent frames did change.
  CHECK_FALSE((before.flat() == after.flat()).all());
}

TEST_CASE("training reconstructs compressible clips and is deterministic") {
  CodecConfig cfg;
  std::vector<Video<float>> clips;
  for (int i = 0; i < 8; ++i) {
    Video<float> c(17, 64, 64, kPixelChannels);
    c.flat().setConstant(-0.8f + 0.2f * static_cast<float>(i));
    clips.push_back(std::move(c));
  }
  CodecTrainOptions opt;
  opt.steps = 500;
  opt.seed = 13;
  const CodecTrainResult run1 = train_codec(clips, cfg, opt);
  REQUIRE(run1.loss_curve.size() == 500);
  CHECK(run1.loss_curve.back() < run1.loss_curve.front());
  CHECK(run1.loss_curve.back() < 0.01);

  const CodecTrainResult run2 = train_codec(clips, cfg, opt);
  CHECK(run1.loss_curve == run2.loss_curve);
  CHECK(run1.params.w_enc == run2.params.w_enc);
  CHECK(run1.params.b_dec == run2.params.b_dec);

  CodecTrainOptions bad = opt;
  bad.steps = 0;
  CHECK_THROWS_AS(static_cast<void>(train_codec(clips, cfg, bad)), PreconditionViolation);
}

TEST_CASE("latent folding normalizes scale without changing reconstructions") {
  CodecConfig cfg;
  std::vector<Video<float>> clips;
  for (int i = 0; i < 4; ++i) {
    ToyClipSpec spec;
    spec.annotation = SubStitchAnnotation{"codec", Task::kRailroad, Action::kDriving,
                                          Quality::kIdeal, 0.0, 1.0};
    spec.seed = static_cast<std::uint64_t>(i);
    clips.push_back(synthesize_toy_clip(spec));
  }
  CodecTrainOptions raw;
  raw.steps = 300;
  raw.seed = 3;
  raw.normalize_latents = false;
  CodecTrainOptions folded = raw;
  folded.normalize_latents = true;

  const auto r_raw = train_codec(clips, cfg, raw);
  const auto r_fold = train_codec(clips, cfg, folded);
  CHECK(r_raw.loss_curve == r_fold.loss_curve);

  // Folding leaves decode(encode(x)) unchanged up to float rounding.
  const Video<float> a = decode(encode(clips[0], r_raw.params, cfg), r_raw.params, cfg);
  const Video<float> b = decode(encode(clips[0], r_fold.params, cfg), r_fold.params, cfg);
  CHECK((a.flat() - b.flat()).abs().maxCoeff() < 1e-4f);

  // Folded latents have roughly unit scale per channel over the set.
  double sumsq = 0.0;
  long n = 0;
  for (const auto& clip : clips) {
    const Latent<float> z = encode(clip, r_fold.params, cfg);
    sumsq += static_cast<double>(z.flat().square().sum());
    n += z.flat().size();
  }
  const double rms = std::sqrt(sumsq / static_cast<double>(n));
  CHECK(rms > 0.5);
  CHECK(rms < 2.0);
}

TEST_CASE("codec checkpoints round trip and reject config mismatches") {
  CodecConfig cfg;
  Rng rng(17);
  const auto p = init_codec<float>(cfg, rng);
  const auto path = std::filesystem::temp_directory_path() / "stitchflow_codec_ckpt.bin";
  save_codec(path, p, cfg);

  const auto [loaded, loaded_cfg] = load_codec(path);
  CHECK(loaded_cfg == CodecConfig{cfg.f_s, cfg.f_t, cfg.c_lat, loaded_cfg.param_budget});
  CHECK(loaded.w_enc == p.w_enc);
  CHECK(loaded.b0_dec == p.b0_dec);

  CodecConfig other = cfg;
  other.f_s = 4;
  CHECK_THROWS_WITH_AS(static_cast<void>(load_codec(path, other)), doctest::Contains("'f_s'"),
                       CorruptCheckpoint);
  CHECK_NOTHROW(static_cast<void>(load_codec(path, cfg)));
  std::filesystem::remove(path);
}
