// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/edge_layer.hpp"

#include <vector>

#include "wpod/ops.hpp"

namespace wpod::edge {

nn::Tensor SobelKernels::gx_tensor() {
  return nn::Tensor({3, 3, 1, 1}, std::vector<double>(kGx.begin(), kGx.end()));
}

nn::Tensor SobelKernels::gy_tensor() {
  return nn::Tensor({3, 3, 1, 1}, std::vector<double>(kGy.begin(), kGy.end()));
}

nn::Tensor rgb_to_gray(const nn::Tensor& image) {
  if (image.rank() != 4 || image.dim(3) != 3) {
    throw nn::ShapeError("rgb_to_gray expects B x H x W x 3, got " + nn::to_string(image.shape()));
  }
  static const nn::Tensor weights(
      {1, 1, 3, 1}, std::vector<double>(kLumaWeights.begin(), kLumaWeights.end()));
  return nn::conv2d(image, weights, nn::Tensor(), 1, nn::Padding::kValid);
}

nn::Tensor gaussian_presmooth(const nn::Tensor& gray, bool enabled) {
  if (!enabled) return gray;
  static const nn::Tensor kernel({3, 3, 1, 1}, std::vector<double>{1.0 / 16, 2.0 / 16, 1.0 / 16,
                                                                   2.0 / 16, 4.0 / 16, 2.0 / 16,
                                                                   1.0 / 16, 2.0 / 16, 1.0 / 16});
  return nn::conv2d(gray, kernel, nn::Tensor(), 1, nn::Padding::kReplicate);
}

nn::Tensor sobel_features(const nn::Tensor& gray, const nn::Tensor& gx_kernel,
                          const nn::Tensor& gy_kernel) {
  if (gray.rank() != 4 || gray.dim(3) != 1 || gray.dim(1) < 3 || gray.dim(2) < 3) {
    throw nn::ShapeError("sobel_features expects B x H x W x 1 with H, W >= 3, got " +
                         nn::to_string(gray.shape()));
  }
  const auto gx = nn::conv2d(gray, gx_kernel, nn::Tensor(), 1, nn::Padding::kReplicate);
  const auto gy = nn::conv2d(gray, gy_kernel, nn::Tensor(), 1, nn::Padding::kReplicate);
  const auto mag = nn::magnitude(gx, gy, kMagnitudeEpsilon);
  return nn::concat_channels(nn::concat_channels(gx, gy), mag);
}

nn::Tensor sobel_features(const nn::Tensor& gray) {
  return sobel_features(gray, SobelKernels::gx_tensor(), SobelKernels::gy_tensor());
}

}  // namespace wpod::edge
