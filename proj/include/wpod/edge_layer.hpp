// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fixed Sobel edge branch. Produces three channels per pixel: horizontal
// gradient, vertical gradient and gradient magnitude of the grayscale image.

#pragma once

#include <array>

#include "wpod/tensor.hpp"

namespace wpod::edge {

/// Row-major 3x3 cross-correlation kernels.
struct SobelKernels {
  static constexpr std::array<double, 9> kGx{-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static constexpr std::array<double, 9> kGy{-1, -2, -1, 0, 0, 0, 1, 2, 1};

  /// 3x3x1x1 kernel tensors, no gradient.
  static nn::Tensor gx_tensor();
  static nn::Tensor gy_tensor();
};

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};
inline constexpr double kMagnitudeEpsilon = 1e-12;

/// B x H x W x 3 in [0,1] -> B x H x W x 1 luminance.
nn::Tensor rgb_to_gray(const nn::Tensor& image);

/// 3x3 binomial smoothing with replicate borders; identity when disabled.
nn::Tensor gaussian_presmooth(const nn::Tensor& gray, bool enabled);

/// B x H x W x 1 -> B x H x W x 3 (gx, gy, sqrt(gx^2 + gy^2 + 1e-12)).
/// gx_kernel / gy_kernel are 3x3x1x1; the model passes its frozen parameters.
nn::Tensor sobel_features(const nn::Tensor& gray, const nn::Tensor& gx_kernel,
                          const nn::Tensor& gy_kernel);
nn::Tensor sobel_features(const nn::Tensor& gray);

}  // namespace wpod::edge
