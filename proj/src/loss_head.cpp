// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/loss_head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "wpod/image.hpp"

namespace wpod::loss {
namespace {

struct SoftmaxPair {
  double p_object;
  double p_background;
};

SoftmaxPair softmax2(double v1, double v2) {
  const double hi = std::max(v1, v2);
  const double e1 = std::exp(v1 - hi);
  const double e2 = std::exp(v2 - hi);
  return {e1 / (e1 + e2), e2 / (e1 + e2)};
}

// Loss and d/d(v1, v2) of the two-term log loss. Clamped probabilities are
// constant, so their gradient is zero.
double confidence_term(double v1, double v2, bool object, double* g1, double* g2) {
  const auto p = softmax2(v1, v2);
  const double target = object ? p.p_object : p.p_background;
  const double clamped = std::clamp(target, kProbabilityFloor, 1.0 - kProbabilityFloor);
  if (clamped != target) {
    *g1 = *g2 = 0.0;
  } else if (object) {
    *g1 = p.p_object - 1.0;
    *g2 = p.p_background;
  } else {
    *g1 = p.p_object;
    *g2 = p.p_background - 1.0;
  }
  return -std::log(clamped);
}

// Location loss and its gradient with respect to v3..v8.
double location_term(std::span<const double, 6> v, const CellTarget& t, double* grad) {
  const double a11 = std::max(v[0], 0.0);
  const double a22 = std::max(v[3], 0.0);
  std::fill(grad, grad + 6, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& q = kCanonicalSquare[i];
    const double rx = a11 * q.x + v[1] * q.y + v[4] - t.normalized_corners[i].x;
    const double ry = v[2] * q.x + a22 * q.y + v[5] - t.normalized_corners[i].y;
    loss += rx * rx + ry * ry;
    if (v[0] > 0.0) grad[0] += 2.0 * rx * q.x;
    grad[1] += 2.0 * rx * q.y;
    grad[2] += 2.0 * ry * q.x;
    if (v[3] > 0.0) grad[3] += 2.0 * ry * q.y;
    grad[4] += 2.0 * rx;
    grad[5] += 2.0 * ry;
  }
  return loss;
}

Point2 cell_center(std::size_t m, std::size_t n) {
  return {static_cast<double>(n * net::kStride) + net::kStride / 2.0,
          static_cast<double>(m * net::kStride) + net::kStride / 2.0};
}

}  // namespace

AffineMap decode_affine(std::span<const double, 6> v) {
  return {std::max(v[0], 0.0), v[1], v[2], std::max(v[3], 0.0), v[4], v[5]};
}

Point2 normalize_point(const Point2& p, std::size_t m, std::size_t n, double alpha,
                       double stride) {
  return {(p.x / stride - static_cast<double>(n)) / alpha,
          (p.y / stride - static_cast<double>(m)) / alpha};
}

Point2 denormalize_point(const Point2& u, std::size_t m, std::size_t n, double alpha,
                         double stride) {
  return {stride * (alpha * u.x + static_cast<double>(n)),
          stride * (alpha * u.y + static_cast<double>(m))};
}

TargetGrid::TargetGrid(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), cells_(rows * cols) {
  for (std::size_t m = 0; m < rows; ++m) {
    for (std::size_t n = 0; n < cols; ++n) {
      at(m, n).m = m;
      at(m, n).n = n;
    }
  }
}

std::size_t TargetGrid::positive_count() const {
  return static_cast<std::size_t>(
      std::count_if(cells_.begin(), cells_.end(), [](const CellTarget& c) { return c.object; }));
}

TargetGrid build_target_grid(std::span<const Quad> quads, std::size_t height, std::size_t width,
                             double alpha) {
  if (height % net::kStride != 0 || width % net::kStride != 0) {
    throw std::invalid_argument("target grid needs dimensions divisible by 16, got " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  TargetGrid grid(height / net::kStride, width / net::kStride);
  std::vector<Point2> centroids;
  for (const auto& q : quads) centroids.push_back(q.centroid());

  for (std::size_t m = 0; m < grid.rows(); ++m) {
    for (std::size_t n = 0; n < grid.cols(); ++n) {
      const Point2 c = cell_center(m, n);
      const Quad* best = nullptr;
      double best_d2 = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < quads.size(); ++k) {
        if (!geometry::point_in_convex(c, quads[k].corners)) continue;
        const double dx = centroids[k].x - c.x, dy = centroids[k].y - c.y;
        if (dx * dx + dy * dy < best_d2) {
          best_d2 = dx * dx + dy * dy;
          best = &quads[k];
        }
      }
      if (!best) continue;
      auto& cell = grid.at(m, n);
      cell.object = true;
      for (std::size_t i = 0; i < 4; ++i) {
        cell.normalized_corners[i] = normalize_point(best->corners[i], m, n, alpha);
      }
    }
  }
  return grid;
}

double location_loss(std::span<const double, 6> v, const CellTarget& target) {
  if (!target.object) {
    throw std::invalid_argument("location_loss called on a cell without an object");
  }
  double unused[6];
  return location_term(v, target, unused);
}

double confidence_loss(double v1, double v2, bool object) {
  double g1, g2;
  return confidence_term(v1, v2, object, &g1, &g2);
}

LossResult total_loss(const net::FeatureGrid& grid, std::span<const TargetGrid> targets) {
  const auto& values = grid.values;
  if (values.rank() != 4 || values.dim(3) != net::kGridChannels) {
    throw nn::ShapeError("feature grid must be B x M x N x 8, got " +
                         nn::to_string(values.shape()));
  }
  if (targets.size() != grid.batch()) {
    throw nn::ShapeError("loss got " + std::to_string(targets.size()) + " target grids for batch " +
                         std::to_string(grid.batch()));
  }
  for (const auto& t : targets) {
    if (t.rows() != grid.rows() || t.cols() != grid.cols()) {
      throw nn::ShapeError("target grid " + std::to_string(t.rows()) + "x" +
                           std::to_string(t.cols()) + " does not match feature grid " +
                           std::to_string(grid.rows()) + "x" + std::to_string(grid.cols()));
    }
  }

  const double inv_batch = grid.batch() == 0 ? 0.0 : 1.0 / static_cast<double>(grid.batch());
  LossResult result;
  std::vector<double> local(values.size(), 0.0);
  for (std::size_t b = 0; b < grid.batch(); ++b) {
    for (std::size_t m = 0; m < grid.rows(); ++m) {
      for (std::size_t n = 0; n < grid.cols(); ++n) {
        const auto v = grid.cell(b, m, n);
        const auto& target = targets[b].at(m, n);
        double* g = local.data() + ((b * grid.rows() + m) * grid.cols() + n) * net::kGridChannels;
        result.parts.confidence += confidence_term(v[0], v[1], target.object, g, g + 1);
        if (target.object) {
          result.parts.location += location_term(v.subspan<2, 6>(), target, g + 2);
          ++result.parts.positive_cells;
        }
      }
    }
  }
  result.parts.location *= inv_batch;
  result.parts.confidence *= inv_batch;
  result.parts.total = result.parts.location + result.parts.confidence;
  for (auto& g : local) g *= inv_batch;

  result.total = nn::Tensor::make_result(
      {1}, {result.parts.total}, {values}, [local = std::move(local)](nn::detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const double upstream = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += upstream * local[i];
      });
  return result;
}

std::vector<Detection> decode_detections(const net::FeatureGrid& grid, std::size_t batch_index,
                                         double tau, double nms_threshold, double alpha) {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
  std::vector<geometry::ScoredQuad> candidates;
  std::vector<Detection> cells;
  for (std::size_t m = 0; m < grid.rows(); ++m) {
    for (std::size_t n = 0; n < grid.cols(); ++n) {
      const auto v = grid.cell(batch_index, m, n);
      const double p = softmax2(v[0], v[1]).p_object;
      if (!(p > tau)) continue;
      const AffineMap t = decode_affine(v.subspan<2, 6>());
      std::array<Point2, 4> corners;
      for (std::size_t i = 0; i < 4; ++i) {
        corners[i] = denormalize_point(geometry::apply_affine(t, kCanonicalSquare[i]), m, n, alpha);
      }
      if (!(std::abs(geometry::signed_area(corners)) > 1e-9) || !geometry::is_convex(corners)) {
        continue;
      }
      const Quad quad = Quad::canonical(corners);
      if (!geometry::is_valid_quad(quad)) continue;
      candidates.push_back({quad, p, cells.size()});
      cells.push_back({quad, p, m, n});
    }
  }
  std::vector<Detection> out;
  for (const auto& kept : geometry::nms(std::move(candidates), nms_threshold)) {
    out.push_back(cells[kept.tag]);
  }
  return out;
}

std::array<double, 6> encode_affine(const std::array<Point2, 4>& normalized_corners) {
  const auto fit = geometry::fit_affine(kCanonicalSquare, normalized_corners);
  if (!fit) throw std::invalid_argument("cannot encode degenerate corners as an affine map");
  return {fit->a11, fit->a12, fit->a21, fit->a22, fit->tx, fit->ty};
}

nn::Tensor rectify_plate(const nn::Tensor& image, const Quad& quad, std::size_t out_w,
                         std::size_t out_h) {
  image::require_rgb(image);
  if (out_w == 0 || out_h == 0) throw std::invalid_argument("rectified size must be positive");
  const auto w = static_cast<double>(out_w);
  const auto h = static_cast<double>(out_h);
  const std::array<Point2, 4> rect{Point2{0, 0}, Point2{w, 0}, Point2{w, h}, Point2{0, h}};
  const auto forward = geometry::fit_affine(quad.corners, rect);
  const auto inverse = forward ? geometry::invert_affine(*forward) : std::nullopt;
  if (!inverse) throw std::invalid_argument("cannot rectify a degenerate quad");
  return image::warp_affine(image, *inverse, out_h, out_w, std::nullopt);
}

}  // namespace wpod::loss
