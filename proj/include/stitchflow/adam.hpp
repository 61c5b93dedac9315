// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Adam with bias correction, operating on flat parameter/gradient views.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "stitchflow/errors.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

template <typename S>
struct AdamConfig {
  S lr = static_cast<S>(1e-3);
  S beta1 = static_cast<S>(0.9);
  S beta2 = static_cast<S>(0.999);
  S eps = static_cast<S>(1e-8);
};

/// One optimizer instance per parameter tensor; callers keep them in the
/// same order as their parameter visitation.
template <typename S>
class Adam {
 public:
  using Flat = typename Tensor4<S>::Flat;

  explicit Adam(AdamConfig<S> cfg = {}) : cfg_(cfg) {}

  void step(Eigen::Ref<Eigen::Matrix<S, Eigen::Dynamic, 1>> param, const Flat& grad) {
    if (m_.size() == 0) {
      m_ = Flat::Zero(param.size());
      v_ = Flat::Zero(param.size());
    }
    require(param.size() == grad.size() && param.size() == m_.size(),
            "Adam::step: parameter/gradient size changed between steps");
    ++t_;
    m_ = cfg_.beta1 * m_ + (S(1) - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (S(1) - cfg_.beta2) * grad.square();
    const S bias1 = S(1) - std::pow(cfg_.beta1, static_cast<S>(t_));
    const S bias2 = S(1) - std::pow(cfg_.beta2, static_cast<S>(t_));
    const Flat update = (m_ / bias1) / ((v_ / bias2).sqrt() + cfg_.eps);
    param.array() -= cfg_.lr * update;
  }

  const AdamConfig<S>& config() const { return cfg_; }
  void set_lr(S lr) { cfg_.lr = lr; }

 private:
  AdamConfig<S> cfg_;
  Flat m_, v_;
  long t_ = 0;
};

}  // namespace stitchflow
