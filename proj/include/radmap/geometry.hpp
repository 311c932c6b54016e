#pragma once

#include <array>
#include <cmath>
#include <vector>

namespace radmap {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 a) { return {s * a.x, s * a.y}; }
inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 a) { return std::hypot(a.x, a.y); }
inline double dist(Point2 a, Point2 b) { return norm(a - b); }

// Closed simple polygon; vertices listed once, no repeated closing vertex.
using Polygon = std::vector<Point2>;

struct BBox {
  double xmin = 0.0, ymin = 0.0, xmax = 0.0, ymax = 0.0;
  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
};

double polygon_signed_area(const Polygon& poly);
BBox polygon_bbox(const Polygon& poly);
bool polygon_is_simple(const Polygon& poly);

// Even-odd rule; points on the boundary count as inside.
bool point_in_polygon(Point2 p, const Polygon& poly);

double point_segment_distance(Point2 p, Point2 a, Point2 b);

// Distance to the closed boundary polyline of a polygon.
double point_polygon_boundary_distance(Point2 p, const Polygon& poly);

// Nearest point on the closed boundary polyline of a polygon.
Point2 point_polygon_boundary_closest(Point2 p, const Polygon& poly);

// Andrew's monotone chain; result is CCW without repeated first vertex.
Polygon convex_hull(std::vector<Point2> points);

// Outward offset of a convex CCW polygon by `margin`, corners rounded with
// `arc_segments` chords per corner. margin == 0 returns the input.
Polygon offset_convex(const Polygon& hull, double margin, int arc_segments = 4);

}  // namespace radmap
