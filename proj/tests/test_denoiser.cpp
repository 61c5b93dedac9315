// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "stitchflow/denoiser.hpp"

using namespace stitchflow;

namespace {

Latent<float> noise_latent(int t, int h, int w, int c, std::uint64_t seed) {
  Latent<float> z(t, h, w, c);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < z.flat().size(); ++i) {
    z.flat()[i] = static_cast<float>(rng.normal());
  }
  return z;
}

ConditioningSignal<float> cond_for(Quality q, Action a, Task t) {
  ConditioningSignal<float> cond;
  cond.class_ids = ClassTriple{q, a, t};
  return cond;
}

}  // namespace

TEST_CASE("denoise preserves shape and is deterministic") {
  DenoiserConfig cfg;
  Rng rng(1);
  const auto p = init_denoiser<float>(cfg, rng);
  for (const auto& [t, h, w] : std::vector<std::array<int, 3>>{{5, 8, 8}, {3, 4, 6}, {1, 2, 2}}) {
    const Latent<float> x = noise_latent(t, h, w, cfg.latent_channels, 7);
    const Latent<float> v1 = denoise(x, 0.5, cond_for(Quality::kIdeal, Action::kDriving,
                                                      Task::kRailroad), p, cfg);
    CHECK(v1.same_shape(x));
    const Latent<float> v2 = denoise(x, 0.5, cond_for(Quality::kIdeal, Action::kDriving,
                                                      Task::kRailroad), p, cfg);
    CHECK((v1.flat() == v2.flat()).all());
  }

  const Latent<float> bad = noise_latent(5, 8, 8, cfg.latent_channels + 1, 3);
  CHECK_THROWS_AS(static_cast<void>(denoise(bad, 0.5, ConditioningSignal<float>{}, p, cfg)),
                  ShapeError);
  const Latent<float> ok = noise_latent(5, 8, 8, cfg.latent_channels, 3);
  CHECK_THROWS_AS(static_cast<void>(denoise(ok, 1.5, ConditioningSignal<float>{}, p, cfg)),
                  PreconditionViolation);
}

TEST_CASE("untrained model predicts zero velocity") {
  // out_proj starts at zero, so the initial model is the zero-velocity map.
  DenoiserConfig cfg;
  Rng rng(2);
  const auto p = init_denoiser<float>(cfg, rng);
  const Latent<float> x = noise_latent(5, 8, 8, cfg.latent_channels, 11);
  const Latent<float> v = denoise(x, 0.3, ConditioningSignal<float>{}, p, cfg);
  CHECK(v.flat().abs().maxCoeff() == 0.0f);
}

TEST_CASE("skip layers") {
  DenoiserConfig cfg;
  cfg.layers = 4;
  Rng rng(3);
  const auto p = init_denoiser<float>(cfg, rng);
  const Latent<float> x = noise_latent(3, 4, 4, cfg.latent_channels, 5);
  const auto cond = cond_for(Quality::kNonIdeal, Action::kTargeting, Task::kBackhand);

  SUBCASE("empty set equals omitted argument") {
    const auto a = denoise(x, 0.7, cond, p, cfg);
    const auto b = denoise(x, 0.7, cond, p, cfg, std::set<int>{});
    CHECK((a.flat() == b.flat()).all());
  }
  SUBCASE("skipping layers equals a model built without them") {
    DenoiserConfig small = cfg;
    small.layers = 2;
    auto q = alloc_denoiser<float>(small);
    q.in_proj = p.in_proj;
    q.time_proj = p.time_proj;
    q.cond_table = p.cond_table;
    q.ln_f = p.ln_f;
    q.out_proj = p.out_proj;
    q.blocks[0] = p.blocks[0];
    q.blocks[1] = p.blocks[3];
    const auto skipped = denoise(x, 0.2, cond, p, cfg, std::set<int>{1, 2});
    const auto rebuilt = denoise(x, 0.2, cond, q, small);
    CHECK((skipped.flat() == rebuilt.flat()).all());
  }
  SUBCASE("skipping every layer leaves the embedded input's projection") {
    auto trained = p;
    Rng r2(9);
    for (Eigen::Index j = 0; j < trained.out_proj.w.cols(); ++j) {
      for (Eigen::Index i = 0; i < trained.out_proj.w.rows(); ++i) {
        trained.out_proj.w(i, j) = static_cast<float>(r2.normal()) * 0.1f;
      }
    }
    const auto v = denoise(x, 0.4, cond, trained, cfg, std::set<int>{0, 1, 2, 3});

    // Expected: out_proj(ln_f(embedded tokens)) on latent rows.
    const Eigen::Index n_lat = static_cast<Eigen::Index>(x.frames()) * x.height() * x.width();
    const Eigen::Map<const Mat<float>> tokens(x.flat().data(), cfg.latent_channels, n_lat);
    Mat<float> emb(cfg.model_width, n_lat + kPrefixTokens);
    emb.col(0) = trained.time_proj.w * time_features<float>(0.4, cfg.model_width) +
                 trained.time_proj.b;
    emb.col(1) = trained.cond_table.col(condition_index(cond));
    emb.rightCols(n_lat) =
        ((trained.in_proj.w * tokens).colwise() + trained.in_proj.b) +
        factorized_pos_embedding<float>(cfg, x.frames(), x.height(), x.width());
    Mat<float> xhat;
    Vec<float> rstd;
    const Mat<float> ln = denoiser_detail::layer_norm_forward(emb, trained.ln_f, xhat, rstd);
    const Mat<float> expect =
        (trained.out_proj.w * ln.rightCols(n_lat)).colwise() + trained.out_proj.b;
    const Eigen::Map<const Mat<float>> got(v.flat().data(), cfg.latent_channels, n_lat);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-6f);
  }
  SUBCASE("invalid indices are rejected") {
    CHECK_THROWS_AS(static_cast<void>(denoise(x, 0.5, cond, p, cfg, std::set<int>{4})),
                    InvalidLayerIndex);
    CHECK_THROWS_AS(static_cast<void>(denoise(x, 0.5, cond, p, cfg, std::set<int>{-1})),
                    InvalidLayerIndex);
  }
}

TEST_CASE("qk normalization yields unit query/key vectors") {
  DenoiserConfig cfg;
  REQUIRE(cfg.qk_normalization);
  Rng rng(4);
  const auto p = init_denoiser<float>(cfg, rng);
  const Latent<float> x = noise_latent(5, 8, 8, cfg.latent_channels, 13);
  DenoiseTrace trace;
  static_cast<void>(denoise(x, 0.5, ConditioningSignal<float>{}, p, cfg, std::set<int>{}, nullptr, &trace));
  CHECK(trace.denoise_calls == 1);
  CHECK(trace.max_qk_norm_dev <= 1e-5);

  DenoiserConfig off = cfg;
  off.qk_normalization = false;
  Rng rng2(4);
  const auto p2 = init_denoiser<float>(off, rng2);
  DenoiseTrace trace2;
  const auto v_off =
      denoise(x, 0.5, ConditioningSignal<float>{}, p2, off, std::set<int>{}, nullptr, &trace2);
  CHECK(trace2.max_qk_norm_dev == 0.0);  // instrumentation idle when off
  CHECK(v_off.same_shape(x));
}

TEST_CASE("condition embeddings") {
  DenoiserConfig cfg;
  Rng rng(5);
  const auto p = init_denoiser<float>(cfg, rng);

  ConditioningSignal<float> null_cond;
  const Vec<float> null_vec = embed_condition(null_cond, p);
  CHECK(null_vec == p.cond_table.col(kNullConditionId));

  const Vec<float> a =
      embed_condition(cond_for(Quality::kIdeal, Action::kDriving, Task::kRailroad), p);
  const Vec<float> b =
      embed_condition(cond_for(Quality::kNonIdeal, Action::kDriving, Task::kRailroad), p);
  CHECK((a - b).norm() > 0.0f);
  CHECK((a - null_vec).norm() > 0.0f);

  // All 16 classes embed distinctly at random init.
  for (const auto& t1 : all_classes()) {
    for (const auto& t2 : all_classes()) {
      if (class_index(t1) == class_index(t2)) continue;
      ConditioningSignal<float> c1, c2;
      c1.class_ids = t1;
      c2.class_ids = t2;
      CHECK((embed_condition(c1, p) - embed_condition(c2, p)).norm() > 0.0f);
    }
  }

  ConditioningSignal<float> bad;
  bad.class_ids = ClassTriple{static_cast<Quality>(7), Action::kDriving, Task::kRailroad};
  CHECK_THROWS_AS(static_cast<void>(embed_condition(bad, p)), UnknownClassId);
}

TEST_CASE("first-frame conditioning substitutes frame 0 only") {
  const Latent<float> x = noise_latent(5, 4, 4, 8, 17);
  Latent<float> ff(1, 4, 4, 8);
  ff.flat().setConstant(0.25f);

  ConditioningSignal<float> cond;
  cond.first_frame_latent = ff;
  const Latent<float> out = apply_first_frame_conditioning(x, cond);
  const Eigen::Index span = out.flat().size() / out.frames();
  CHECK((out.flat().head(span) == ff.flat()).all());
  CHECK((out.flat().tail(out.flat().size() - span) ==
         x.flat().tail(x.flat().size() - span)).all());

  CHECK(cond.effective_clean_mask(5) == std::vector<std::uint8_t>{1, 0, 0, 0, 0});
  ConditioningSignal<float> no_ff;
  CHECK(no_ff.effective_clean_mask(3) == std::vector<std::uint8_t>{0, 0, 0});
  CHECK_THROWS_AS(static_cast<void>(apply_first_frame_conditioning(x, no_ff)),
                  PreconditionViolation);

  ConditioningSignal<float> wrong;
  wrong.first_frame_latent = Latent<float>(1, 2, 2, 8);
  wrong.first_frame_latent->flat().setZero();
  CHECK_THROWS_AS(static_cast<void>(apply_first_frame_conditioning(x, wrong)), ShapeError);
}

TEST_CASE("denoiser checkpoints round trip with config metadata") {
  DenoiserConfig cfg;
  cfg.layers = 2;
  cfg.model_width = 32;
  cfg.heads = 2;
  Rng rng(6);
  const auto p = init_denoiser<float>(cfg, rng);
  const auto path = std::filesystem::temp_directory_path() / "stitchflow_denoiser_ckpt.bin";
  save_denoiser(path, p, cfg);

  const auto [loaded, loaded_cfg] = load_denoiser(path);
  CHECK(loaded_cfg == cfg);
  CHECK(denoiser_param_hash(loaded) == denoiser_param_hash(p));

  const Latent<float> x = noise_latent(3, 4, 4, cfg.latent_channels, 19);
  const auto v1 = denoise(x, 0.5, ConditioningSignal<float>{}, p, cfg);
  const auto v2 = denoise(x, 0.5, ConditioningSignal<float>{}, loaded, loaded_cfg);
  CHECK((v1.flat() == v2.flat()).all());
  std::filesystem::remove(path);
}
