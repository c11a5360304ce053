// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace wpod::geometry {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

using Polygon = std::vector<Point2>;

/// Four corners ordered top-left, top-right, bottom-right, bottom-left in
/// image coordinates (y grows downward).
struct Quad {
  std::array<Point2, 4> corners;

  /// Reorders arbitrary corners into the canonical order: sort by angle
  /// around the centroid, then rotate so the corner with the smallest x + y
  /// comes first.
  static Quad canonical(std::span<const Point2, 4> pts);
  static Quad canonical(const std::array<Point2, 4>& pts) {
    return canonical(std::span<const Point2, 4>(pts));
  }

  Polygon polygon() const { return {corners.begin(), corners.end()}; }
  Point2 centroid() const;

  friend bool operator==(const Quad&, const Quad&) = default;
};

struct AffineMap {
  double a11 = 1.0, a12 = 0.0;
  double a21 = 0.0, a22 = 1.0;
  double tx = 0.0, ty = 0.0;

  static AffineMap identity() { return {}; }
  static AffineMap translation(double dx, double dy) { return {1, 0, 0, 1, dx, dy}; }
  static AffineMap scaling(double sx, double sy) { return {sx, 0, 0, sy, 0, 0}; }
  static AffineMap rotation(double radians);

  double determinant() const { return a11 * a22 - a12 * a21; }

  friend bool operator==(const AffineMap&, const AffineMap&) = default;
};

/// Absolute shoelace area; degenerate input yields 0.
double polygon_area(std::span<const Point2> p);
double signed_area(std::span<const Point2> p);

/// Sutherland-Hodgman clipping of a convex subject against a convex clip
/// polygon. Either orientation is accepted. Empty when disjoint.
Polygon clip_convex(std::span<const Point2> subject, std::span<const Point2> clip);

/// Intersection over union of two convex quads; 0 when the union is empty.
double qiou(const Quad& a, const Quad& b);

bool is_convex(std::span<const Point2> p);
bool is_valid_quad(const Quad& q);

/// Boundary points count as inside.
bool point_in_convex(const Point2& p, std::span<const Point2> poly);

Point2 apply_affine(const AffineMap& t, const Point2& p);
Quad apply_affine(const AffineMap& t, const Quad& q);

/// Composition: (outer ∘ inner)(p) = outer(inner(p)).
AffineMap compose(const AffineMap& outer, const AffineMap& inner);

/// Empty when the linear part is singular.
std::optional<AffineMap> invert_affine(const AffineMap& t);

/// Least-squares affine map taking src[i] to dst[i]. Empty when the normal
/// equations are singular (fewer than three non-collinear points).
std::optional<AffineMap> fit_affine(std::span<const Point2> src, std::span<const Point2> dst);

struct ScoredQuad {
  Quad quad;
  double confidence = 0.0;
  std::size_t tag = 0;  // caller-defined, carried through nms
};

/// Greedy suppression by descending confidence: a candidate is dropped when
/// its qIoU with any kept detection exceeds overlap_threshold.
std::vector<ScoredQuad> nms(std::vector<ScoredQuad> dets, double overlap_threshold);

}  // namespace wpod::geometry
