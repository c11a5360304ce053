// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wpod::geometry {
namespace {

double cross(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

Point2 segment_line_intersection(const Point2& p, const Point2& q, const Point2& a,
                                 const Point2& b) {
  const double dp = cross(a, b, p);
  const double dq = cross(a, b, q);
  const double t = dp / (dp - dq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

// Solves the 3x3 system m * x = r by Cramer's rule.
std::optional<std::array<double, 3>> solve3(const std::array<std::array<double, 3>, 3>& m,
                                            const std::array<double, 3>& r) {
  auto det3 = [](const std::array<std::array<double, 3>, 3>& a) {
    return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
           a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
           a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  };
  const double d = det3(m);
  // m is positive semi-definite, so |det| is bounded by the diagonal product.
  const double bound = m[0][0] * m[1][1] * m[2][2];
  if (!(bound > 0.0) || std::abs(d) <= 1e-12 * bound) return std::nullopt;
  std::array<double, 3> x{};
  for (int c = 0; c < 3; ++c) {
    auto mc = m;
    for (int r2 = 0; r2 < 3; ++r2) mc[r2][c] = r[r2];
    x[c] = det3(mc) / d;
  }
  return x;
}

}  // namespace

Quad Quad::canonical(std::span<const Point2, 4> pts) {
  Point2 c{};
  for (const auto& p : pts) {
    c.x += p.x / 4.0;
    c.y += p.y / 4.0;
  }
  std::array<Point2, 4> sorted;
  std::copy(pts.begin(), pts.end(), sorted.begin());
  // With y pointing down, ascending atan2 walks the corners clockwise on screen.
  std::stable_sort(sorted.begin(), sorted.end(), [&](const Point2& a, const Point2& b) {
    return std::atan2(a.y - c.y, a.x - c.x) < std::atan2(b.y - c.y, b.x - c.x);
  });
  std::size_t first = 0;
  for (std::size_t i = 1; i < 4; ++i) {
    if (sorted[i].x + sorted[i].y < sorted[first].x + sorted[first].y) first = i;
  }
  Quad q;
  for (std::size_t i = 0; i < 4; ++i) q.corners[i] = sorted[(first + i) % 4];
  return q;
}

Point2 Quad::centroid() const {
  Point2 c{};
  for (const auto& p : corners) {
    c.x += p.x / 4.0;
    c.y += p.y / 4.0;
  }
  return c;
}

AffineMap AffineMap::rotation(double radians) {
  const double c = std::cos(radians);
  const double s = std::sin(radians);
  return {c, -s, s, c, 0.0, 0.0};
}

double signed_area(std::span<const Point2> p) {
  if (p.size() < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& a = p[i];
    const auto& b = p[(i + 1) % p.size()];
    acc += a.x * b.y - b.x * a.y;
  }
  return 0.5 * acc;
}

double polygon_area(std::span<const Point2> p) { return std::abs(signed_area(p)); }

Polygon clip_convex(std::span<const Point2> subject, std::span<const Point2> clip) {
  if (subject.size() < 3 || clip.size() < 3) return {};
  Polygon clip_ccw(clip.begin(), clip.end());
  if (signed_area(clip_ccw) < 0.0) std::reverse(clip_ccw.begin(), clip_ccw.end());

  Polygon output(subject.begin(), subject.end());
  for (std::size_t e = 0; e < clip_ccw.size() && !output.empty(); ++e) {
    const Point2& a = clip_ccw[e];
    const Point2& b = clip_ccw[(e + 1) % clip_ccw.size()];
    Polygon input;
    input.swap(output);
    for (std::size_t i = 0; i < input.size(); ++i) {
      const Point2& cur = input[i];
      const Point2& prev = input[(i + input.size() - 1) % input.size()];
      const bool cur_in = cross(a, b, cur) >= 0.0;
      const bool prev_in = cross(a, b, prev) >= 0.0;
      if (cur_in) {
        if (!prev_in) output.push_back(segment_line_intersection(prev, cur, a, b));
        output.push_back(cur);
      } else if (prev_in) {
        output.push_back(segment_line_intersection(prev, cur, a, b));
      }
    }
  }
  if (output.size() < 3) return {};
  return output;
}

double qiou(const Quad& a, const Quad& b) {
  const auto pa = a.polygon();
  const auto pb = b.polygon();
  const double area_a = polygon_area(pa);
  const double area_b = polygon_area(pb);
  const double inter = polygon_area(clip_convex(pa, pb));
  const double uni = area_a + area_b - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool is_convex(std::span<const Point2> p) {
  if (p.size() < 3) return false;
  int sign = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = cross(p[i], p[(i + 1) % p.size()], p[(i + 2) % p.size()]);
    if (c == 0.0) continue;
    const int s = c > 0.0 ? 1 : -1;
    if (sign == 0) {
      sign = s;
    } else if (s != sign) {
      return false;
    }
  }
  return sign != 0;
}

bool is_valid_quad(const Quad& q) {
  for (const auto& c : q.corners) {
    if (!std::isfinite(c.x) || !std::isfinite(c.y)) return false;
  }
  return is_convex(q.corners) && polygon_area(q.corners) > 0.0;
}

bool point_in_convex(const Point2& p, std::span<const Point2> poly) {
  bool has_pos = false;
  bool has_neg = false;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const double c = cross(poly[i], poly[(i + 1) % poly.size()], p);
    has_pos |= c > 0.0;
    has_neg |= c < 0.0;
    if (has_pos && has_neg) return false;
  }
  return true;
}

Point2 apply_affine(const AffineMap& t, const Point2& p) {
  return {t.a11 * p.x + t.a12 * p.y + t.tx, t.a21 * p.x + t.a22 * p.y + t.ty};
}

Quad apply_affine(const AffineMap& t, const Quad& q) {
  Quad out;
  for (std::size_t i = 0; i < 4; ++i) out.corners[i] = apply_affine(t, q.corners[i]);
  return out;
}

AffineMap compose(const AffineMap& outer, const AffineMap& inner) {
  return {outer.a11 * inner.a11 + outer.a12 * inner.a21,
          outer.a11 * inner.a12 + outer.a12 * inner.a22,
          outer.a21 * inner.a11 + outer.a22 * inner.a21,
          outer.a21 * inner.a12 + outer.a22 * inner.a22,
          outer.a11 * inner.tx + outer.a12 * inner.ty + outer.tx,
          outer.a21 * inner.tx + outer.a22 * inner.ty + outer.ty};
}

std::optional<AffineMap> invert_affine(const AffineMap& t) {
  const double det = t.determinant();
  if (det == 0.0 || !std::isfinite(det)) return std::nullopt;
  AffineMap inv;
  inv.a11 = t.a22 / det;
  inv.a12 = -t.a12 / det;
  inv.a21 = -t.a21 / det;
  inv.a22 = t.a11 / det;
  inv.tx = -(inv.a11 * t.tx + inv.a12 * t.ty);
  inv.ty = -(inv.a21 * t.tx + inv.a22 * t.ty);
  return inv;
}

std::optional<AffineMap> fit_affine(std::span<const Point2> src, std::span<const Point2> dst) {
  if (src.size() != dst.size() || src.size() < 3) return std::nullopt;
  // Both output coordinates share the normal matrix sum([x y 1]^T [x y 1]).
  // Centering the source improves conditioning for pixel-scale coordinates.
  Point2 mean{};
  for (const auto& p : src) {
    mean.x += p.x / static_cast<double>(src.size());
    mean.y += p.y / static_cast<double>(src.size());
  }
  std::array<std::array<double, 3>, 3> m{};
  std::array<double, 3> rx{}, ry{};
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::array<double, 3> row{src[i].x - mean.x, src[i].y - mean.y, 1.0};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r][c] += row[r] * row[c];
      rx[r] += row[r] * dst[i].x;
      ry[r] += row[r] * dst[i].y;
    }
  }
  const auto sx = solve3(m, rx);
  const auto sy = solve3(m, ry);
  if (!sx || !sy) return std::nullopt;
  AffineMap t;
  t.a11 = (*sx)[0];
  t.a12 = (*sx)[1];
  t.a21 = (*sy)[0];
  t.a22 = (*sy)[1];
  t.tx = (*sx)[2] - t.a11 * mean.x - t.a12 * mean.y;
  t.ty = (*sy)[2] - t.a21 * mean.x - t.a22 * mean.y;
  return t;
}

std::vector<ScoredQuad> nms(std::vector<ScoredQuad> dets, double overlap_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const ScoredQuad& a, const ScoredQuad& b) {
    return a.confidence > b.confidence;
  });
  std::vector<ScoredQuad> kept;
  for (auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const ScoredQuad& k) {
      return qiou(k.quad, d.quad) > overlap_threshold;
    });
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

}  // namespace wpod::geometry
