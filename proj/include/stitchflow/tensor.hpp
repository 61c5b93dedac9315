// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense video/latent tensors. Layout is (frames, height, width, channels)
// with channels fastest, so the whole tensor doubles as a row-major
// (frames*height*width) x channels token matrix.

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <sstream>
#include <string>

#include "stitchflow/errors.hpp"

namespace stitchflow {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename Scalar>
class Tensor4 {
 public:
  using Flat = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor4() = default;

  Tensor4(int frames, int height, int width, int channels)
      : t_(frames), h_(height), w_(width), c_(channels) {
    if (frames < 1 || height < 1 || width < 1 || channels < 1) {
      throw ShapeError("Tensor4: all dimensions must be >= 1, got " +
                       shape_string(frames, height, width, channels));
    }
    data_ = Flat::Zero(static_cast<std::int64_t>(frames) * height * width * channels);
  }

  int frames() const { return t_; }
  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }
  std::int64_t size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar& operator()(int f, int y, int x, int ch) { return data_[index(f, y, x, ch)]; }
  Scalar operator()(int f, int y, int x, int ch) const { return data_[index(f, y, x, ch)]; }

  Flat& flat() { return data_; }
  const Flat& flat() const { return data_; }

  bool same_shape(const Tensor4& other) const {
    return t_ == other.t_ && h_ == other.h_ && w_ == other.w_ && c_ == other.c_;
  }

  std::string shape_str() const { return shape_string(t_, h_, w_, c_); }

  /// Row-major view: one row per (frame, y, x) site, one column per channel.
  Eigen::Map<RowMat<Scalar>> tokens() {
    return Eigen::Map<RowMat<Scalar>>(data_.data(), static_cast<std::int64_t>(t_) * h_ * w_, c_);
  }
  Eigen::Map<const RowMat<Scalar>> tokens() const {
    return Eigen::Map<const RowMat<Scalar>>(data_.data(), static_cast<std::int64_t>(t_) * h_ * w_,
                                            c_);
  }

  static std::string shape_string(int t, int h, int w, int c) {
    std::ostringstream os;
    os << "(" << t << ", " << h << ", " << w << ", " << c << ")";
    return os.str();
  }

 private:
  std::int64_t index(int f, int y, int x, int ch) const {
    return ((static_cast<std::int64_t>(f) * h_ + y) * w_ + x) * c_ + ch;
  }

  int t_ = 0;
  int h_ = 0;
  int w_ = 0;
  int c_ = 0;
  Flat data_;
};

// Pixel-space clips carry 3 channels and values in [-1, 1]; latent clips carry
// whatever the codec config says. The aliases only document intent.
template <typename S>
using Video = Tensor4<S>;
template <typename S>
using Latent = Tensor4<S>;

inline constexpr int kPixelChannels = 3;

template <typename S>
void check_same_shape(const Tensor4<S>& a, const Tensor4<S>& b, const char* where) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

template <typename S>
Tensor4<S> flip_horizontal(const Tensor4<S>& v) {
  Tensor4<S> out(v.frames(), v.height(), v.width(), v.channels());
  for (int f = 0; f < v.frames(); ++f) {
    for (int y = 0; y < v.height(); ++y) {
      for (int x = 0; x < v.width(); ++x) {
        for (int c = 0; c < v.channels(); ++c) {
          out(f, y, x, c) = v(f, y, v.width() - 1 - x, c);
        }
      }
    }
  }
  return out;
}

template <typename S>
void clamp_pixels(Tensor4<S>& v) {
  v.flat() = v.flat().min(S(1)).max(S(-1));
}

template <typename S, typename T>
Tensor4<T> cast_tensor(const Tensor4<S>& v) {
  Tensor4<T> out(v.frames(), v.height(), v.width(), v.channels());
  out.flat() = v.flat().template cast<T>();
  return out;
}

}  // namespace stitchflow
