// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/image.hpp"

#include <algorithm>
#include <cmath>

namespace wpod::image {

void require_rgb(const nn::Tensor& img) {
  if (img.rank() != 3 || img.dim(2) != 3 || img.dim(0) == 0 || img.dim(1) == 0) {
    throw nn::ShapeError("expected an H x W x 3 image, got " + nn::to_string(img.shape()));
  }
}

double sample_bilinear(const nn::Tensor& img, double x, double y, std::size_t channel) {
  const auto h = static_cast<double>(height(img));
  const auto w = static_cast<double>(width(img));
  const double u = std::clamp(x - 0.5, 0.0, w - 1.0);
  const double v = std::clamp(y - 0.5, 0.0, h - 1.0);
  const auto j0 = static_cast<std::size_t>(u);
  const auto i0 = static_cast<std::size_t>(v);
  const std::size_t j1 = std::min(j0 + 1, width(img) - 1);
  const std::size_t i1 = std::min(i0 + 1, height(img) - 1);
  const double fu = u - static_cast<double>(j0);
  const double fv = v - static_cast<double>(i0);
  const auto d = img.data();
  const std::size_t row = width(img) * 3;
  auto px = [&](std::size_t i, std::size_t j) { return d[i * row + j * 3 + channel]; };
  const double top = fu == 0.0 ? px(i0, j0) : (1 - fu) * px(i0, j0) + fu * px(i0, j1);
  const double bot = fu == 0.0 ? px(i1, j0) : (1 - fu) * px(i1, j0) + fu * px(i1, j1);
  return fv == 0.0 ? top : (1 - fv) * top + fv * bot;
}

nn::Tensor warp_affine(const nn::Tensor& img, const geometry::AffineMap& out_to_in,
                       std::size_t out_h, std::size_t out_w, std::optional<double> fill) {
  require_rgb(img);
  const auto h = static_cast<double>(height(img));
  const auto w = static_cast<double>(width(img));
  nn::Tensor out({out_h, out_w, 3});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const auto p = geometry::apply_affine(
          out_to_in, geometry::Point2{static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5});
      const bool outside = p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h;
      for (std::size_t c = 0; c < 3; ++c) {
        o[(i * out_w + j) * 3 + c] =
            outside && fill ? *fill : sample_bilinear(img, p.x, p.y, c);
      }
    }
  }
  return out;
}

}  // namespace wpod::image
