// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-difference verification of the hand-derived backward pass, in
// double precision on a small but fully featured model.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "stitchflow/flow.hpp"

using namespace stitchflow;

namespace {

DenoiserConfig check_config() {
  DenoiserConfig cfg;
  cfg.layers = 2;
  cfg.model_width = 32;
  cfg.heads = 2;
  cfg.latent_channels = 4;
  return cfg;
}

using Views = std::vector<std::pair<double*, Eigen::Index>>;

Views views_of(DenoiserParams<double>& p) {
  Views v;
  p.visit([&v](const std::string&, auto& t) { v.push_back({t.data(), t.size()}); });
  return v;
}

Views views_of(LoRAAdapter<double>& a) {
  Views v;
  for (auto& [target, entry] : a.entries) {
    v.push_back({entry.a.data(), entry.a.size()});
    v.push_back({entry.b.data(), entry.b.size()});
  }
  return v;
}

std::vector<TrainExample<double>> fixed_batch() {
  Rng rng(2024);
  std::vector<TrainExample<double>> batch;
  for (int i = 0; i < 2; ++i) {
    TrainExample<double> ex{Latent<double>(2, 2, 2, 4), {}};
    for (Eigen::Index j = 0; j < ex.latent.flat().size(); ++j) {
      ex.latent.flat()[j] = rng.normal();
    }
    if (i == 0) {
      ex.cond.class_ids = class_from_index(10);
    }  // second example exercises the null-condition column
    batch.push_back(std::move(ex));
  }
  return batch;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Checks `n_coords` randomly chosen coordinates with non-negligible analytic
/// gradient against central differences of the loss.
void check_coordinates(const Views& work_views, const Views& grad_views,
                       const std::function<double()>& loss, int n_coords, double h,
                       std::uint64_t select_seed) {
  Rng sel(select_seed);
  int checked = 0, tries = 0;
  double worst = 0.0;
  while (checked < n_coords) {
    REQUIRE(++tries < 5000);
    const auto ti = static_cast<std::size_t>(
        sel.uniform_int(0, static_cast<int>(work_views.size()) - 1));
    const auto oi = static_cast<Eigen::Index>(
        sel.uniform_int(0, static_cast<int>(work_views[ti].second) - 1));
    const double analytic = grad_views[ti].first[oi];
    if (std::abs(analytic) < 1e-6) continue;  // skip inert coordinates (unused classes etc.)

    double* coord = work_views[ti].first + oi;
    const double saved = *coord;
    *coord = saved + h;
    const double lp = loss();
    *coord = saved - h;
    const double lm = loss();
    *coord = saved;

    const double numeric = (lp - lm) / (2.0 * h);
    const double err = relative_error(analytic, numeric);
    worst = std::max(worst, err);
    CHECK(err < 1e-3);
    ++checked;
  }
  MESSAGE("worst relative error: " << worst);
}

}  // namespace

TEST_CASE("backward pass matches central differences on model parameters") {
  const DenoiserConfig cfg = check_config();
  Rng rng(77);
  DenoiserParams<double> params = init_denoiser<double>(cfg, rng);
  // Give the output projection life so gradients reach every layer.
  for (Eigen::Index j = 0; j < params.out_proj.w.cols(); ++j) {
    for (Eigen::Index i = 0; i < params.out_proj.w.rows(); ++i) {
      params.out_proj.w(i, j) = 0.05 * rng.normal();
    }
  }
  const auto batch = fixed_batch();

  // The rng is re-seeded per evaluation, so the loss is a deterministic
  // function of the parameters alone.
  const auto loss = [&batch, &params, &cfg]() {
    Rng r(4242);
    return flow_matching_loss(batch, params, cfg, r, 0.0);
  };

  DenoiserParams<double> grads = alloc_denoiser<double>(cfg);
  {
    Rng r(4242);
    (void)flow_matching_loss(batch, params, cfg, r, 0.0, nullptr, &grads);
  }

  check_coordinates(views_of(params), views_of(grads), loss, 10, 1e-5, 31337);
}

TEST_CASE("backward pass matches central differences on adapter factors") {
  const DenoiserConfig cfg = check_config();
  Rng rng(78);
  DenoiserParams<double> params = init_denoiser<double>(cfg, rng);
  for (Eigen::Index j = 0; j < params.out_proj.w.cols(); ++j) {
    for (Eigen::Index i = 0; i < params.out_proj.w.rows(); ++i) {
      params.out_proj.w(i, j) = 0.05 * rng.normal();
    }
  }
  LoRAAdapter<double> adapter =
      inject(params,
             {"blocks.0.attn.q", "blocks.0.mlp.fc1", "blocks.1.attn.o", "in_proj", "time_proj",
              "out_proj"},
             3, 3.0, 5);
  // Nonzero B so that gradients reach the A factors as well.
  for (auto& [target, entry] : adapter.entries) {
    for (Eigen::Index j = 0; j < entry.b.cols(); ++j) {
      for (Eigen::Index i = 0; i < entry.b.rows(); ++i) {
        entry.b(i, j) = 0.05 * rng.normal();
      }
    }
  }
  const auto batch = fixed_batch();

  const auto loss = [&batch, &params, &cfg, &adapter]() {
    Rng r(999);
    return flow_matching_loss(batch, params, cfg, r, 0.0, &adapter);
  };

  DenoiserParams<double> grads = alloc_denoiser<double>(cfg);
  LoRAAdapter<double> adapter_grads = zero_like(adapter);
  {
    Rng r(999);
    (void)flow_matching_loss(batch, params, cfg, r, 0.0, &adapter, &grads, &adapter_grads);
  }

  check_coordinates(views_of(adapter), views_of(adapter_grads), loss, 8, 1e-5, 271828);
}

TEST_CASE("backward pass respects the clean-frame mask") {
  const DenoiserConfig cfg = check_config();
  Rng rng(79);
  DenoiserParams<double> params = init_denoiser<double>(cfg, rng);
  for (Eigen::Index j = 0; j < params.out_proj.w.cols(); ++j) {
    for (Eigen::Index i = 0; i < params.out_proj.w.rows(); ++i) {
      params.out_proj.w(i, j) = 0.05 * rng.normal();
    }
  }
  std::vector<TrainExample<double>> batch;
  {
    TrainExample<double> ex{Latent<double>(3, 2, 2, 4), {}};
    Rng drng(80);
    for (Eigen::Index j = 0; j < ex.latent.flat().size(); ++j) {
      ex.latent.flat()[j] = drng.normal();
    }
    ex.cond.class_ids = class_from_index(4);
    ex.cond.first_frame_latent = first_latent_frame(ex.latent);
    batch.push_back(std::move(ex));
  }

  const auto loss = [&batch, &params, &cfg]() {
    Rng r(555);
    return flow_matching_loss(batch, params, cfg, r, 0.0);
  };
  DenoiserParams<double> grads = alloc_denoiser<double>(cfg);
  {
    Rng r(555);
    (void)flow_matching_loss(batch, params, cfg, r, 0.0, nullptr, &grads);
  }
  check_coordinates(views_of(params), views_of(grads), loss, 6, 1e-5, 161803);
}
