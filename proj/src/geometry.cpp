#include "radmap/geometry.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace radmap {

double polygon_signed_area(const Polygon& poly) {
  double a = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point2& p = poly[i];
    const Point2& q = poly[(i + 1) % n];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

BBox polygon_bbox(const Polygon& poly) {
  BBox b;
  b.xmin = b.ymin = std::numeric_limits<double>::infinity();
  b.xmax = b.ymax = -std::numeric_limits<double>::infinity();
  for (const Point2& p : poly) {
    b.xmin = std::min(b.xmin, p.x);
    b.xmax = std::max(b.xmax, p.x);
    b.ymin = std::min(b.ymin, p.y);
    b.ymax = std::max(b.ymax, p.y);
  }
  return b;
}

namespace {

int orient(Point2 a, Point2 b, Point2 c) {
  double v = cross(b - a, c - a);
  double scale = std::abs(b.x - a.x) + std::abs(b.y - a.y) + std::abs(c.x - a.x) +
                 std::abs(c.y - a.y);
  double eps = 1e-14 * scale * scale;
  if (v > eps) return 1;
  if (v < -eps) return -1;
  return 0;
}

bool on_segment(Point2 a, Point2 b, Point2 p) {
  return std::min(a.x, b.x) - 1e-12 <= p.x && p.x <= std::max(a.x, b.x) + 1e-12 &&
         std::min(a.y, b.y) - 1e-12 <= p.y && p.y <= std::max(a.y, b.y) + 1e-12;
}

bool segments_intersect(Point2 a, Point2 b, Point2 c, Point2 d) {
  int o1 = orient(a, b, c), o2 = orient(a, b, d);
  int o3 = orient(c, d, a), o4 = orient(c, d, b);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(a, b, c)) return true;
  if (o2 == 0 && on_segment(a, b, d)) return true;
  if (o3 == 0 && on_segment(c, d, a)) return true;
  if (o4 == 0 && on_segment(c, d, b)) return true;
  return false;
}

}  // namespace

bool polygon_is_simple(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    Point2 a = poly[i], b = poly[(i + 1) % n];
    if (dist(a, b) == 0.0) return false;
    for (std::size_t j = i + 1; j < n; ++j) {
      // Skip edges sharing a vertex.
      if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
      Point2 c = poly[j], d = poly[(j + 1) % n];
      if (segments_intersect(a, b, c, d)) return false;
    }
  }
  return true;
}

bool point_in_polygon(Point2 p, const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  if (point_polygon_boundary_distance(p, poly) <= 1e-12 * (1.0 + std::abs(p.x) + std::abs(p.y)))
    return true;
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      double xint = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
      if (p.x < xint) inside = !inside;
    }
  }
  return inside;
}

double point_segment_distance(Point2 p, Point2 a, Point2 b) {
  Point2 ab = b - a;
  double len2 = dot(ab, ab);
  if (len2 == 0.0) return dist(p, a);
  double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return dist(p, a + t * ab);
}

double point_polygon_boundary_distance(Point2 p, const Polygon& poly) {
  double d = std::numeric_limits<double>::infinity();
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i)
    d = std::min(d, point_segment_distance(p, poly[i], poly[(i + 1) % n]));
  return d;
}

Point2 point_polygon_boundary_closest(Point2 p, const Polygon& poly) {
  double best = std::numeric_limits<double>::infinity();
  Point2 out = poly[0];
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    Point2 a = poly[i], b = poly[(i + 1) % n];
    Point2 ab = b - a;
    double den = dot(ab, ab);
    double t = den > 0.0 ? std::clamp(dot(p - a, ab) / den, 0.0, 1.0) : 0.0;
    Point2 q = a + t * ab;
    double d = dist(p, q);
    if (d < best) {
      best = d;
      out = q;
    }
  }
  return out;
}

Polygon convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(), [](Point2 a, Point2 b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](Point2 a, Point2 b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  const std::size_t n = pts.size();
  if (n < 3) throw std::invalid_argument("convex_hull: fewer than 3 distinct points");
  std::vector<Point2> h(2 * n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (k >= 2 && cross(h[k - 1] - h[k - 2], pts[i] - h[k - 2]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = n - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 1] - h[k - 2], pts[i] - h[k - 2]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

Polygon offset_convex(const Polygon& hull, double margin, int arc_segments) {
  if (margin <= 0.0) return hull;
  const std::size_t n = hull.size();
  Polygon out;
  for (std::size_t i = 0; i < n; ++i) {
    Point2 prev = hull[(i + n - 1) % n];
    Point2 cur = hull[i];
    Point2 next = hull[(i + 1) % n];
    Point2 din = cur - prev, dout = next - cur;
    double lin = norm(din), lout = norm(dout);
    if (lin == 0.0 || lout == 0.0) continue;
    // Outward normals of the two incident edges (CCW polygon).
    Point2 nin{din.y / lin, -din.x / lin};
    Point2 nout{dout.y / lout, -dout.x / lout};
    double a0 = std::atan2(nin.y, nin.x);
    double a1 = std::atan2(nout.y, nout.x);
    while (a1 < a0) a1 += 2.0 * M_PI;
    int segs = std::max(1, arc_segments);
    for (int s = 0; s <= segs; ++s) {
      double a = a0 + (a1 - a0) * double(s) / double(segs);
      out.push_back(cur + margin * Point2{std::cos(a), std::sin(a)});
    }
  }
  return out;
}

}  // namespace radmap
