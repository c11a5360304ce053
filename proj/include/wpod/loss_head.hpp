// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-cell affine decode, label normalization, training targets, loss and
// detection decode. A cell (m, n) owns the pixel block starting at
// (16 n, 16 m); its center is (16 n + 8, 16 m + 8).

#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "wpod/geometry.hpp"
#include "wpod/network.hpp"
#include "wpod/tensor.hpp"

namespace wpod::loss {

using geometry::AffineMap;
using geometry::Point2;
using geometry::Quad;

/// Unit square centered at the origin, in Quad corner order.
inline constexpr std::array<Point2, 4> kCanonicalSquare{
    Point2{-0.5, -0.5}, Point2{0.5, -0.5}, Point2{0.5, 0.5}, Point2{-0.5, 0.5}};

inline constexpr double kProbabilityFloor = 1e-12;

/// v holds v3..v8. Linear part [[max(v3,0), v4], [v5, max(v6,0)]],
/// translation (v7, v8).
AffineMap decode_affine(std::span<const double, 6> v);

Point2 normalize_point(const Point2& p, std::size_t m, std::size_t n, double alpha,
                       double stride = net::kStride);
Point2 denormalize_point(const Point2& u, std::size_t m, std::size_t n, double alpha,
                         double stride = net::kStride);

struct CellTarget {
  std::size_t m = 0;
  std::size_t n = 0;
  bool object = false;
  std::array<Point2, 4> normalized_corners{};  // meaningful only when object
};

class TargetGrid {
 public:
  TargetGrid(std::size_t rows, std::size_t cols);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const CellTarget& at(std::size_t m, std::size_t n) const { return cells_[m * cols_ + n]; }
  CellTarget& at(std::size_t m, std::size_t n) { return cells_[m * cols_ + n]; }
  std::size_t positive_count() const;

 private:
  std::size_t rows_, cols_;
  std::vector<CellTarget> cells_;
};

/// A cell is positive iff its center lies inside some quad. When several
/// quads contain the center, the one whose centroid is nearest wins.
/// Throws std::invalid_argument when height or width is not a stride multiple.
TargetGrid build_target_grid(std::span<const Quad> quads, std::size_t height, std::size_t width,
                             double alpha);

/// Sum over the four corners of the squared 2-D distance between
/// decode_affine(v)(q_i) and the normalized target corner. Throws
/// std::invalid_argument for a negative cell.
double location_loss(std::span<const double, 6> v, const CellTarget& target);

/// Two-term log loss over softmax(v1, v2), probabilities clamped to
/// [1e-12, 1 - 1e-12].
double confidence_loss(double v1, double v2, bool object);

struct LossBreakdown {
  double location = 0.0;
  double confidence = 0.0;
  double total = 0.0;
  std::size_t positive_cells = 0;
};

struct LossResult {
  nn::Tensor total;  // differentiable scalar
  LossBreakdown parts;
};

/// Per image: sum over cells of object * location + confidence. The batch
/// value is the mean over images. Throws nn::ShapeError when the grid and
/// targets disagree.
LossResult total_loss(const net::FeatureGrid& grid, std::span<const TargetGrid> targets);

struct Detection {
  Quad quad;
  double confidence = 0.0;
  std::size_t m = 0;
  std::size_t n = 0;
};

/// Cells of image `batch_index` whose object probability exceeds tau,
/// decoded to image pixels, degenerate quads dropped, then suppressed by nms.
std::vector<Detection> decode_detections(const net::FeatureGrid& grid, std::size_t batch_index,
                                         double tau, double nms_threshold, double alpha);

/// v3..v8 whose decode reproduces the least-squares affine fit from the
/// canonical square onto `normalized_corners`. Throws std::invalid_argument
/// for degenerate corners.
std::array<double, 6> encode_affine(const std::array<Point2, 4>& normalized_corners);

/// Least-squares affine from quad corners onto (0,0), (w,0), (w,h), (0,h),
/// inverted and sampled bilinearly with edge clamping. Throws
/// std::invalid_argument on a degenerate quad or zero output size.
nn::Tensor rectify_plate(const nn::Tensor& image, const Quad& quad, std::size_t out_w,
                         std::size_t out_h);

}  // namespace wpod::loss
