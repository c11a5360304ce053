// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Images are H x W x 3 tensors with values in [0, 1]. Pixel (row i, col j)
// covers the unit square [j, j+1] x [i, i+1]; its center is (j + 0.5, i + 0.5).

#pragma once

#include <cstddef>
#include <optional>

#include "wpod/geometry.hpp"
#include "wpod/tensor.hpp"

namespace wpod::image {

inline std::size_t height(const nn::Tensor& img) { return img.dim(0); }
inline std::size_t width(const nn::Tensor& img) { return img.dim(1); }

/// Throws nn::ShapeError unless img is H x W x 3 with H, W >= 1.
void require_rgb(const nn::Tensor& img);

/// Bilinear sample at continuous coordinate (x, y); coordinates beyond the
/// outermost pixel centers clamp to the edge.
double sample_bilinear(const nn::Tensor& img, double x, double y, std::size_t channel);

/// Output pixel centers are mapped through out_to_in and sampled bilinearly.
/// Samples landing outside [0, W] x [0, H] take `fill` when given and clamp
/// to the edge otherwise.
nn::Tensor warp_affine(const nn::Tensor& img, const geometry::AffineMap& out_to_in,
                       std::size_t out_h, std::size_t out_w, std::optional<double> fill);

}  // namespace wpod::image
