#include "radmap/mesh.hpp"
#include <cstdlib>

#include <boost/polygon/voronoi.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "radmap/util.hpp"

namespace radmap {

double triangle_signed_area(const TriMesh& mesh, int t) {
  const auto& tri = mesh.triangles[t];
  Point2 a = mesh.nodes[tri[0]], b = mesh.nodes[tri[1]], c = mesh.nodes[tri[2]];
  return 0.5 * cross(b - a, c - a);
}

std::array<double, 3> triangle_edge_lengths(const TriMesh& mesh, int t) {
  const auto& tri = mesh.triangles[t];
  Point2 a = mesh.nodes[tri[0]], b = mesh.nodes[tri[1]], c = mesh.nodes[tri[2]];
  return {dist(a, b), dist(b, c), dist(c, a)};
}

double triangle_min_angle_deg(const TriMesh& mesh, int t) {
  const auto& tri = mesh.triangles[t];
  double best = 180.0;
  for (int k = 0; k < 3; ++k) {
    Point2 o = mesh.nodes[tri[k]];
    Point2 u = mesh.nodes[tri[(k + 1) % 3]] - o;
    Point2 v = mesh.nodes[tri[(k + 2) % 3]] - o;
    double c = dot(u, v) / (norm(u) * norm(v));
    c = std::clamp(c, -1.0, 1.0);
    best = std::min(best, std::acos(c) * 180.0 / M_PI);
  }
  return best;
}

MeshAudit audit_mesh(const TriMesh& mesh, const Polygon& core) {
  MeshAudit audit;
  audit.min_interior_edge = std::numeric_limits<double>::infinity();
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const auto& tri = mesh.triangles[t];
    Point2 centroid = (1.0 / 3.0) * (mesh.nodes[tri[0]] + mesh.nodes[tri[1]] + mesh.nodes[tri[2]]);
    auto edges = triangle_edge_lengths(mesh, t);
    if (point_in_polygon(centroid, core)) {
      ++audit.n_interior_triangles;
      audit.min_interior_angle_deg =
          std::min(audit.min_interior_angle_deg, triangle_min_angle_deg(mesh, t));
      for (double e : edges) {
        audit.min_interior_edge = std::min(audit.min_interior_edge, e);
        audit.max_interior_edge = std::max(audit.max_interior_edge, e);
      }
    } else {
      ++audit.n_band_triangles;
      for (double e : edges) audit.max_band_edge = std::max(audit.max_band_edge, e);
    }
  }
  if (audit.n_interior_triangles == 0) audit.min_interior_edge = 0.0;
  return audit;
}

namespace {

// ---------------------------------------------------------------------------
// Delaunay triangulation as the dual of a Boost.Polygon Voronoi diagram.
// Coordinates are snapped to an int32 grid; site jitter keeps the snap error
// orders of magnitude below any point separation, so the topology is exact.
// ---------------------------------------------------------------------------

std::vector<std::array<int, 3>> delaunay_triangles(const std::vector<Point2>& pts) {
  using boost::polygon::voronoi_diagram;
  const std::size_t n = pts.size();
  if (n < 3) throw std::invalid_argument("delaunay: fewer than 3 points");

  double xmin = pts[0].x, xmax = pts[0].x, ymin = pts[0].y, ymax = pts[0].y;
  for (const Point2& p : pts) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  double span = std::max({xmax - xmin, ymax - ymin, 1e-12});
  double res = span / 1.8e9;
  double cx = 0.5 * (xmin + xmax), cy = 0.5 * (ymin + ymax);

  std::vector<boost::polygon::point_data<std::int32_t>> sites;
  sites.reserve(n);
  std::set<std::pair<std::int32_t, std::int32_t>> seen;
  for (const Point2& p : pts) {
    auto ix = std::int32_t(std::llround((p.x - cx) / res));
    auto iy = std::int32_t(std::llround((p.y - cy) / res));
    if (!seen.insert({ix, iy}).second)
      throw std::runtime_error("delaunay: coincident points after grid snapping");
    sites.emplace_back(ix, iy);
  }

  voronoi_diagram<double> vd;
  boost::polygon::construct_voronoi(sites.begin(), sites.end(), &vd);

  std::vector<std::array<int, 3>> tris;
  for (const auto& vertex : vd.vertices()) {
    std::vector<int> ring;
    const auto* edge = vertex.incident_edge();
    do {
      ring.push_back(int(edge->cell()->source_index()));
      edge = edge->rot_next();
    } while (edge != vertex.incident_edge());
    // Degree > 3 happens for cocircular sites; fan-triangulate the dual polygon.
    for (std::size_t k = 1; k + 1 < ring.size(); ++k) {
      std::array<int, 3> t = {ring[0], ring[k], ring[k + 1]};
      Point2 a = pts[t[0]], b = pts[t[1]], c = pts[t[2]];
      double area2 = cross(b - a, c - a);
      if (area2 == 0.0) continue;
      if (area2 < 0.0) std::swap(t[1], t[2]);
      // Canonical rotation: smallest index first, orientation preserved.
      int rot = int(std::min_element(t.begin(), t.end()) - t.begin());
      std::array<int, 3> canon = {t[rot], t[(rot + 1) % 3], t[(rot + 2) % 3]};
      tris.push_back(canon);
    }
  }
  std::sort(tris.begin(), tris.end());
  tris.erase(std::unique(tris.begin(), tris.end()), tris.end());
  return tris;
}

// ---------------------------------------------------------------------------
// Site generation
// ---------------------------------------------------------------------------

struct SiteSet {
  std::vector<Point2> pos;
  std::vector<bool> movable;
  std::vector<bool> in_core;    // strictly inside the core polygon
  std::vector<bool> deletable;  // repair may drop this site
  std::vector<double> target;   // desired local edge length
  std::vector<bool> scaffold;   // triangulation aid outside the domain, never meshed

  void erase(std::size_t i) {
    pos.erase(pos.begin() + std::ptrdiff_t(i));
    movable.erase(movable.begin() + std::ptrdiff_t(i));
    in_core.erase(in_core.begin() + std::ptrdiff_t(i));
    deletable.erase(deletable.begin() + std::ptrdiff_t(i));
    target.erase(target.begin() + std::ptrdiff_t(i));
    scaffold.erase(scaffold.begin() + std::ptrdiff_t(i));
  }
};

Point2 lattice_jitter(std::uint64_t seed, std::int64_t row, std::int64_t col, double amp) {
  std::uint64_t key = splitmix64(seed ^ (std::uint64_t(row) * 0x9e3779b97f4a7c15ull) ^
                                 splitmix64(std::uint64_t(col)));
  double u1 = double(key >> 11) * 0x1.0p-53;
  double u2 = double(splitmix64(key) >> 11) * 0x1.0p-53;
  return {amp * (2.0 * u1 - 1.0), amp * (2.0 * u2 - 1.0)};
}

// Subdivide each polygon edge into pieces with spacing as close to h as the
// [min_edge, max_edge] band allows.
std::vector<Point2> sample_polygon_boundary(const Polygon& poly, double h, double min_edge,
                                            double max_edge) {
  std::vector<Point2> out;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    Point2 a = poly[i], b = poly[(i + 1) % n];
    double len = dist(a, b);
    int pieces = std::max(1, int(std::llround(len / h)));
    while (len / pieces > max_edge * (1.0 + 1e-9)) ++pieces;
    if (pieces > 1 && len / pieces < min_edge && len / (pieces - 1) <= max_edge * 1.1) --pieces;
    for (int k = 0; k < pieces; ++k) out.push_back(a + (double(k) / pieces) * (b - a));
  }
  return out;
}

// Offset ring around a convex hull at distance d, sampled at ~spacing along
// straight stretches and corner arcs.
std::vector<Point2> sample_offset_ring(const Polygon& hull, double d, double spacing) {
  std::vector<Point2> out;
  const std::size_t n = hull.size();
  for (std::size_t i = 0; i < n; ++i) {
    Point2 prev = hull[(i + n - 1) % n];
    Point2 cur = hull[i];
    Point2 next = hull[(i + 1) % n];
    Point2 din = cur - prev, dout = next - cur;
    double lin = norm(din), lout = norm(dout);
    Point2 nin{din.y / lin, -din.x / lin};
    Point2 nout{dout.y / lout, -dout.x / lout};
    double a0 = std::atan2(nin.y, nin.x);
    double a1 = std::atan2(nout.y, nout.x);
    while (a1 < a0) a1 += 2.0 * M_PI;
    int arcs = std::max(1, int(std::ceil((a1 - a0) * d / spacing)));
    for (int s = 0; s < arcs; ++s) {
      double a = a0 + (a1 - a0) * double(s) / double(arcs);
      out.push_back(cur + d * Point2{std::cos(a), std::sin(a)});
    }
    // Straight stretch from this corner's end to the next corner's start.
    Point2 start = cur + d * Point2{std::cos(a1), std::sin(a1)};
    Point2 stop = next + d * Point2{std::cos(a1), std::sin(a1)};
    double len = dist(start, stop);
    int pieces = std::max(1, int(std::llround(len / spacing)));
    for (int k = 0; k < pieces; ++k) out.push_back(start + (double(k) / pieces) * (stop - start));
  }
  return out;
}

struct BuildContext {
  Polygon core;              // CCW core polygon
  Polygon outer;             // hull of all sites (== core when extension == 0)
  bool has_band = false;
  double h = 0.0;            // target interior spacing
  double wall_in = 0.0;      // clearance every off-boundary site keeps from the core boundary
  std::uint64_t seed = 0;
};

SiteSet generate_sites(const BuildContext& ctx, double min_edge, double max_edge,
                       double extension) {
  SiteSet sites;
  const double h = ctx.h;
  auto add = [&](Point2 p, bool movable, bool in_core, bool deletable = true,
                 double target = 0.0, bool scaffold = false) {
    sites.pos.push_back(p);
    sites.movable.push_back(movable);
    sites.in_core.push_back(in_core);
    sites.deletable.push_back(deletable);
    sites.target.push_back(target > 0.0 ? target : h);
    sites.scaffold.push_back(scaffold);
  };

  for (Point2 p : sample_polygon_boundary(ctx.core, h, min_edge, max_edge))
    add(p, false, false);

  // Structured collar: two rows of movable sites at graded depths bridge the
  // fixed boundary samples and the free interior lattice, so no void wider
  // than a lattice row can open along the wall.
  BBox bb = polygon_bbox(ctx.core);
  double dy = h * std::sqrt(3.0) / 2.0;
  double d1 = std::max(dy, 1.05 * ctx.wall_in);
  double d2 = d1 + dy;
  std::vector<Point2> collar;
  auto try_collar = [&](Point2 p, double sep, bool deletable = true) {
    if (!point_in_polygon(p, ctx.core)) return;
    if (point_polygon_boundary_distance(p, ctx.core) < ctx.wall_in) return;
    for (const Point2& q : collar)
      if (dist(p, q) < sep) return;
    collar.push_back(p);
    add(p, true, true, deletable);
  };
  // Corner sites are never deleted, so when the wall-clamped interior is too
  // narrow for smoothing to ever separate them, two of them closer than the
  // minimum edge would be an unrepairable defect. Wide interiors keep the lax
  // guard; smoothing spreads the sites there.
  const double box_min = std::min(bb.width(), bb.height()) - 2.0 * ctx.wall_in;
  const double corner_sep =
      box_min < 0.9 * min_edge ? std::max(0.6 * h, 0.92 * min_edge) : 0.6 * h;
  const std::size_t nv = ctx.core.size();
  // Convex corners first: a site on the angle bisector splits the chord the
  // Delaunay triangulation would otherwise draw between the two corner-adjacent
  // boundary samples.
  for (std::size_t i = 0; i < nv; ++i) {
    Point2 prev = ctx.core[(i + nv - 1) % nv], cur = ctx.core[i], next = ctx.core[(i + 1) % nv];
    Point2 a = prev - cur, b = next - cur;
    if (cross(cur - prev, b) <= 0.0) continue;  // reflex or straight
    double c = std::clamp(dot(a, b) / (norm(a) * norm(b)), -1.0, 1.0);
    double half_sin = std::sqrt(0.5 * (1.0 - c));
    if (half_sin < 0.34) continue;  // sharp corners are forced geometry
    Point2 bis = (1.0 / norm(a)) * a + (1.0 / norm(b)) * b;
    double nb = norm(bis);
    if (nb < 1e-12) continue;
    try_collar(cur + (d1 / half_sin / nb) * bis, corner_sep, false);
  }
  for (std::size_t i = 0; i < nv; ++i) {
    Point2 a = ctx.core[i], b = ctx.core[(i + 1) % nv];
    double len = dist(a, b);
    int pieces = std::max(1, int(std::llround(len / h)));
    double s = len / pieces;
    Point2 dir = (1.0 / len) * (b - a);
    Point2 nrm{-dir.y, dir.x};  // CCW polygon keeps the interior on the left
    for (int k = 0; k < pieces; ++k) try_collar(a + ((k + 0.5) * s) * dir + d1 * nrm, 0.6 * h);
    for (int k = 0; k <= pieces; ++k) try_collar(a + (k * s) * dir + d2 * nrm, 0.6 * h);
  }

  // Interior hex lattice anchored to the core bbox so the interior point set
  // does not depend on the extension band.
  double cull = d2 + 0.55 * h;
  std::int64_t rmax = std::int64_t(std::ceil(bb.height() / dy)) + 1;
  std::int64_t cmax = std::int64_t(std::ceil(bb.width() / h)) + 1;
  for (std::int64_t r = 0; r <= rmax; ++r) {
    double y = bb.ymin + double(r) * dy;
    for (std::int64_t c = 0; c <= cmax; ++c) {
      double x = bb.xmin + (double(c) + (r % 2 ? 0.5 : 0.0)) * h;
      Point2 p = Point2{x, y} + lattice_jitter(ctx.seed, r, c, 2e-3 * h);
      if (!point_in_polygon(p, ctx.core)) continue;
      if (point_polygon_boundary_distance(p, ctx.core) < cull) continue;
      add(p, true, true);
    }
  }

  if (ctx.has_band) {
    Polygon hull = convex_hull(ctx.core);
    // Pockets of a non-convex core: fill hull-minus-core at interior density.
    bool core_convex = std::abs(polygon_signed_area(hull)) <=
                       std::abs(polygon_signed_area(ctx.core)) * (1.0 + 1e-9);
    if (!core_convex) {
      BBox hb = polygon_bbox(hull);
      std::int64_t prmax = std::int64_t(std::ceil(hb.height() / dy)) + 1;
      std::int64_t pcmax = std::int64_t(std::ceil(hb.width() / h)) + 1;
      for (std::int64_t r = 0; r <= prmax; ++r) {
        double y = hb.ymin + double(r) * dy;
        for (std::int64_t c = 0; c <= pcmax; ++c) {
          double x = hb.xmin + (double(c) + (r % 2 ? 0.5 : 0.0)) * h;
          Point2 p = Point2{x, y} + lattice_jitter(ctx.seed ^ 0x706bull, r, c, 2e-3 * h);
          if (point_in_polygon(p, ctx.core)) continue;
          if (!point_in_polygon(p, hull)) continue;
          if (point_polygon_boundary_distance(p, ctx.core) < std::max(0.8 * h, ctx.wall_in))
            continue;
          if (point_polygon_boundary_distance(p, hull) < 0.8 * h) continue;
          add(p, true, false);
        }
      }
    }
    // Graded offset rings out to the extension boundary; spacing grows
    // geometrically. Rings stay put during relaxation, so band edges are pure
    // generation geometry: the worst case is a phase-aligned rectangle between
    // adjacent rings, whose diagonal sqrt(gap^2 + spacing^2) the cap keeps
    // within the 2*max_edge band coarsening bound.
    const double band_cap = 1.41 * max_edge;
    double d = 0.0;
    double gap = h;
    std::vector<std::pair<double, double>> rings;  // (distance, spacing)
    while (d < extension) {
      gap = std::min(gap * 1.45, band_cap);
      double remaining = extension - d;
      if (remaining <= 1.6 * gap) {
        // Split the leftover evenly so the last radial jump never exceeds gap.
        int n = std::max(1, int(std::ceil(remaining / gap - 1e-9)));
        double step = remaining / n;
        for (int i = 1; i <= n; ++i)
          rings.emplace_back(d + double(i) * step, std::min(std::max(step, h), band_cap));
        break;
      }
      d += gap;
      rings.emplace_back(d, std::min(std::max(gap, h), band_cap));
    }
    for (const auto& [rd, rs] : rings)
      for (Point2 p : sample_offset_ring(hull, rd, rs)) add(p, false, false, false, rs);
    // Scaffold shadow ring just outside the outermost ring. Collinear runs on
    // the hull of the point set otherwise degenerate into zero-area Delaunay
    // slivers once the integer snap bows them; with points beyond the run the
    // sliver circumcircles are no longer empty. Scaffold triangles are dropped
    // at assembly.
    double sp = rings.back().second;
    for (Point2 p : sample_offset_ring(hull, extension + 0.8 * sp, sp))
      add(p, false, false, false, 0.1 * h, true);
  } else {
    // Same scaffolding for the core boundary chain, which is the hull when
    // there is no band: one shadow per sample, pushed outward along the edge
    // normal.
    for (std::size_t i = 0; i < nv; ++i) {
      Point2 a = ctx.core[i], b = ctx.core[(i + 1) % nv];
      double len = dist(a, b);
      int pieces = std::max(1, int(std::llround(len / h)));
      while (len / pieces > max_edge * (1.0 + 1e-9)) ++pieces;
      double s = len / pieces;
      Point2 dir = (1.0 / len) * (b - a);
      Point2 out{dir.y, -dir.x};
      for (int k = 0; k < pieces; ++k) {
        Point2 p = a + (double(k) * s) * dir + (0.8 * s) * out;
        if (point_in_polygon(p, ctx.core)) continue;
        add(p, false, false, false, 0.1 * h, true);
      }
    }
  }
  return sites;
}

// ---------------------------------------------------------------------------
// Truss relaxation: repulsion-only forces along Delaunay edges push sites
// apart until spacing settles near the local target. The clearance wall along
// the core boundary keeps boundary edges Gabriel (hence Delaunay), which keeps
// the interior triangulation independent of the band.
// ---------------------------------------------------------------------------

void smooth_sites(SiteSet& sites, const BuildContext& ctx, int iterations) {
  const std::size_t n = sites.pos.size();
  const double step = 0.2;
  auto admissible = [&](std::size_t i, Point2 cand) {
    if (point_in_polygon(cand, ctx.core) != sites.in_core[i]) return false;
    if (point_polygon_boundary_distance(cand, ctx.core) < ctx.wall_in) return false;
    if (ctx.has_band && !sites.in_core[i] && !point_in_polygon(cand, ctx.outer)) return false;
    return true;
  };

  std::vector<std::pair<int, int>> edges;
  std::vector<Point2> anchor;
  for (int it = 0; it < iterations; ++it) {
    // Retriangulate once motion since the last triangulation becomes visible.
    bool stale = anchor.empty();
    for (std::size_t i = 0; !stale && i < n; ++i)
      if (dist(sites.pos[i], anchor[i]) > 0.1 * sites.target[i]) stale = true;
    if (stale) {
      auto tris = delaunay_triangles(sites.pos);
      std::set<std::pair<int, int>> uniq;
      for (const auto& t : tris)
        for (int k = 0; k < 3; ++k) {
          int a = t[k], b = t[(k + 1) % 3];
          if (a > b) std::swap(a, b);
          uniq.insert({a, b});
        }
      edges.assign(uniq.begin(), uniq.end());
      anchor = sites.pos;
    }

    std::vector<Point2> force(n, Point2{0.0, 0.0});
    for (auto [a, b] : edges) {
      Point2 d = sites.pos[std::size_t(a)] - sites.pos[std::size_t(b)];
      double len = norm(d);
      if (len < 1e-12) continue;
      double want = 1.2 * 0.5 * (sites.target[std::size_t(a)] + sites.target[std::size_t(b)]);
      double f = want - len;
      if (f <= 0.0) continue;
      Point2 push = (f / len) * d;
      force[std::size_t(a)] = force[std::size_t(a)] + push;
      force[std::size_t(b)] = force[std::size_t(b)] - push;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!sites.movable[i]) continue;
      Point2 move = step * force[i];
      double len = norm(move);
      double cap = 0.5 * sites.target[i];
      if (len > cap) move = (cap / len) * move;
      if (len == 0.0) continue;
      Point2 cand = sites.pos[i] + move;
      if (!admissible(i, cand)) {
        // Slide as far along the move as the wall allows.
        Point2 lo = sites.pos[i], hi = cand;
        for (int b = 0; b < 8; ++b) {
          Point2 mid = 0.5 * (lo + hi);
          (admissible(i, mid) ? lo : hi) = mid;
        }
        cand = lo;
      }
      sites.pos[i] = cand;
    }
  }
}

struct TriQuality {
  int tri = -1;
  double min_angle = 180.0;
  double max_edge = 0.0;
  double min_edge = 0.0;
  bool angle_bad = false;
  int collapse_u = -1, collapse_v = -1;  // shortest under-length edge with a movable end
  int split_u = -1, split_v = -1;        // longest over-length edge with a movable end
};

}  // namespace

TriMesh build_mesh(const Polygon& domain, double min_edge, double max_edge,
                   double min_angle_deg, double extension, std::uint64_t seed) {
  if (domain.size() < 3) throw std::invalid_argument("build_mesh: polygon needs >= 3 vertices");
  if (!(min_edge > 0.0) || !(max_edge >= min_edge))
    throw std::invalid_argument("build_mesh: need 0 < min_edge <= max_edge");
  if (!(min_angle_deg > 0.0) || min_angle_deg >= 34.0)
    throw std::invalid_argument("build_mesh: min_angle must lie in (0, 34) degrees");
  if (extension < 0.0) throw std::invalid_argument("build_mesh: extension must be >= 0");
  Polygon core = domain;
  double area = polygon_signed_area(core);
  if (area == 0.0) throw std::invalid_argument("build_mesh: degenerate polygon (area 0)");
  if (area < 0.0) std::reverse(core.begin(), core.end());
  if (!polygon_is_simple(core)) throw std::invalid_argument("build_mesh: polygon is not simple");

  BuildContext ctx;
  ctx.core = core;
  ctx.h = 0.47 * (min_edge + max_edge);
  ctx.wall_in = std::max(0.93 * min_edge, 0.72 * ctx.h);
  ctx.seed = seed;
  // A band thinner than the wall clearance would push ring sites inside the
  // Gabriel wall that keeps boundary edges Delaunay; treat it as no band.
  ctx.has_band = extension > 1.1 * ctx.wall_in;
  if (ctx.has_band) {
    Polygon hull = convex_hull(core);
    ctx.outer = offset_convex(hull, extension, 6);
  } else {
    ctx.outer = core;
  }

  SiteSet sites = generate_sites(ctx, min_edge, max_edge, extension);
  int smooth_iters = 80;
#ifdef RADMAP_MESH_DEBUG
  if (const char* env = getenv("RADMAP_SMOOTH_ITERS")) smooth_iters = atoi(env);
#endif
  smooth_sites(sites, ctx, smooth_iters);

  // Repair loop: fix residual quality violations inside the core by inserting
  // or removing movable sites, then relax locally. Violations confined to
  // edges between fixed sites are forced by the input polygon (sharp corners,
  // scales incompatible with the edge-length band); they are excused, except
  // that a forced over-long chord still gets a split attempt once everything
  // repairable is clean.
  const double lo = 0.9 * min_edge, hi = 1.1 * max_edge;
  int stall = 0;  // consecutive passes without a successful repair action
  auto try_insert = [&](Point2 cand) {
    if (point_polygon_boundary_distance(cand, ctx.core) < ctx.wall_in) {
      // Push the candidate inward onto the wall so boundary edges keep their
      // clearance (and the band, if any, stays decoupled from the interior).
      Point2 qb = point_polygon_boundary_closest(cand, ctx.core);
      double cb = dist(cand, qb);
      if (cb < 1e-9 * ctx.h) return false;
      cand = qb + (1.02 * ctx.wall_in / cb) * (cand - qb);
      if (point_polygon_boundary_distance(cand, ctx.core) < ctx.wall_in) return false;
    }
    if (!point_in_polygon(cand, ctx.core)) return false;
    // Crowding guard; relaxed when repair is stuck so a wall-pinched region
    // can still take the one site it needs.
    const double crowd = (stall >= 2 ? 0.45 : 0.6) * ctx.h;
    for (const Point2& p : sites.pos)
      if (dist(p, cand) < crowd) return false;
    sites.pos.push_back(cand);
    sites.movable.push_back(true);
    sites.in_core.push_back(true);
    sites.deletable.push_back(true);
    sites.target.push_back(ctx.h);
    sites.scaffold.push_back(false);
    return true;
  };
  for (int pass = 0; pass < 24; ++pass) {
    auto tris = delaunay_triangles(sites.pos);
    std::vector<TriQuality> bad;
    std::vector<std::pair<Point2, Point2>> forced_long;
    for (std::size_t t = 0; t < tris.size(); ++t) {
      if (sites.scaffold[tris[t][0]] || sites.scaffold[tris[t][1]] || sites.scaffold[tris[t][2]])
        continue;
      Point2 a = sites.pos[tris[t][0]], b = sites.pos[tris[t][1]], c = sites.pos[tris[t][2]];
      Point2 centroid = (1.0 / 3.0) * (a + b + c);
      if (!point_in_polygon(centroid, ctx.core)) continue;
      if (!sites.movable[tris[t][0]] && !sites.movable[tris[t][1]] && !sites.movable[tris[t][2]])
        continue;
      TriQuality q;
      q.tri = int(t);
      double best_short = lo, best_long = hi;
      bool has_forced_long = false;
      Point2 fa{}, fb{};
      for (int e = 0; e < 3; ++e) {
        const std::size_t u = tris[t][std::size_t(e)], v = tris[t][std::size_t((e + 1) % 3)];
        const double len = dist(sites.pos[u], sites.pos[v]);
        q.max_edge = std::max(q.max_edge, len);
        q.min_edge = q.min_edge == 0.0 ? len : std::min(q.min_edge, len);
        const bool forced = !sites.movable[u] && !sites.movable[v];
        if (len < best_short && !forced) {
          best_short = len;
          q.collapse_u = int(u);
          q.collapse_v = int(v);
        }
        if (len > hi) {
          if (forced) {
            has_forced_long = true;
            fa = sites.pos[u];
            fb = sites.pos[v];
          } else if (len > best_long) {
            best_long = len;
            q.split_u = int(u);
            q.split_v = int(v);
          }
        }
      }
      Point2 u = b - a, v = c - a, w = c - b;
      double ang_a = std::acos(std::clamp(dot(u, v) / (norm(u) * norm(v)), -1.0, 1.0));
      double ang_b = std::acos(std::clamp(dot(-1.0 * u, w) / (norm(u) * norm(w)), -1.0, 1.0));
      double ang_c = M_PI - ang_a - ang_b;
      q.min_angle = std::min({ang_a, ang_b, ang_c}) * 180.0 / M_PI;
      q.angle_bad = q.min_angle < min_angle_deg;
      if (q.angle_bad || q.collapse_u >= 0 || q.split_u >= 0)
        bad.push_back(q);
      else if (has_forced_long)
        forced_long.push_back({fa, fb});
    }
    if (bad.empty()) {
      int inserted = 0;
      for (const auto& [fa, fb] : forced_long)
        if (try_insert(0.5 * (fa + fb))) ++inserted;
      if (inserted == 0) break;
      smooth_sites(sites, ctx, 12);
      continue;
    }
    if (pass == 23) {
#ifdef RADMAP_MESH_DEBUG
      for (const auto& q : bad) {
        const auto& t = tris[std::size_t(q.tri)];
        Point2 cen = (1.0 / 3.0) * (sites.pos[t[0]] + sites.pos[t[1]] + sites.pos[t[2]]);
        fprintf(stderr, "bad tri at (%.2f,%.2f): ang=%.1f emin=%.2f emax=%.2f mov=%d%d%d d=%.2f\n",
                cen.x, cen.y, q.min_angle, q.min_edge, q.max_edge, int(sites.movable[t[0]]),
                int(sites.movable[t[1]]), int(sites.movable[t[2]]),
                point_polygon_boundary_distance(cen, ctx.core));
      }
#endif
      throw std::runtime_error("build_mesh: quality constraints unsatisfied after repair (" +
                               std::to_string(bad.size()) + " bad triangles)");
    }
    std::sort(bad.begin(), bad.end(),
              [](const TriQuality& x, const TriQuality& y) { return x.min_angle < y.min_angle; });
    int actions = 0;
    for (const TriQuality& q : bad) {
      if (actions >= 8) break;
      if (q.collapse_u >= 0) {
        // Collapse the short edge: merge into the midpoint when both ends are
        // free, otherwise drop the free end.
        const std::size_t i = std::size_t(q.collapse_u), j = std::size_t(q.collapse_v);
        auto free = [&](std::size_t v) { return sites.movable[v] && sites.deletable[v]; };
        if (free(i) && free(j)) {
          Point2 mid = 0.5 * (sites.pos[i] + sites.pos[j]);
          if (point_in_polygon(mid, ctx.core) == sites.in_core[i] &&
              point_polygon_boundary_distance(mid, ctx.core) >= ctx.wall_in)
            sites.pos[i] = mid;
          sites.erase(j);
          ++actions;
          break;  // indices shifted; retriangulate before more edits
        }
        if (free(i) || free(j)) {
          sites.erase(free(i) ? i : j);
          ++actions;
          break;
        }
        continue;  // movable but pinned end; smoothing is the only lever left
      }
      // Split at the long-edge midpoint (size) or the circumcenter (angle).
      const auto& t = tris[std::size_t(q.tri)];
      Point2 a = sites.pos[t[0]], b = sites.pos[t[1]], c = sites.pos[t[2]];
      Point2 cand;
      if (q.split_u >= 0) {
        cand = 0.5 * (sites.pos[std::size_t(q.split_u)] + sites.pos[std::size_t(q.split_v)]);
      } else {
        double d = 2.0 * cross(b - a, c - a);
        double ux = (dot(b - a, b + a) * (c.y - a.y) - dot(c - a, c + a) * (b.y - a.y)) / d;
        double uy = (dot(c - a, c + a) * (b.x - a.x) - dot(b - a, b + a) * (c.x - a.x)) / d;
        cand = {ux, uy};
      }
      if (try_insert(cand)) ++actions;
    }
    stall = actions == 0 ? stall + 1 : 0;
#ifdef RADMAP_MESH_DEBUG
    fprintf(stderr, "repair pass %d: bad=%zu actions=%d sites=%zu\n", pass, bad.size(), actions,
            sites.pos.size());
#endif
    smooth_sites(sites, ctx, 12);
  }

  auto tris = delaunay_triangles(sites.pos);

  TriMesh mesh;
  mesh.quality = {min_edge, max_edge, min_angle_deg};
  mesh.nodes = sites.pos;
  bool keep_all = ctx.has_band;  // outer boundary is convex, hull == domain
  for (const auto& t : tris) {
    if (sites.scaffold[t[0]] || sites.scaffold[t[1]] || sites.scaffold[t[2]]) continue;
    if (!keep_all) {
      Point2 centroid =
          (1.0 / 3.0) * (mesh.nodes[t[0]] + mesh.nodes[t[1]] + mesh.nodes[t[2]]);
      if (!point_in_polygon(centroid, ctx.core)) continue;
    }
    mesh.triangles.push_back(t);
  }

  // Prune nodes no kept triangle references (non-convex cores without a band).
  std::vector<int> remap(mesh.nodes.size(), -1);
  for (const auto& t : mesh.triangles)
    for (int v : t) remap[std::size_t(v)] = 0;
  int next = 0;
  std::vector<Point2> kept_nodes;
  for (std::size_t i = 0; i < mesh.nodes.size(); ++i)
    if (remap[i] == 0) {
      remap[i] = next++;
      kept_nodes.push_back(mesh.nodes[i]);
    }
  for (auto& t : mesh.triangles)
    for (int& v : t) v = remap[std::size_t(v)];
  mesh.nodes = std::move(kept_nodes);

  // Boundary nodes: endpoints of edges with a single incident triangle.
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& t : mesh.triangles)
    for (int k = 0; k < 3; ++k) {
      int a = t[k], b = t[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      ++edge_count[{a, b}];
    }
  mesh.boundary_node.assign(mesh.nodes.size(), false);
  for (const auto& [edge, count] : edge_count)
    if (count == 1) {
      mesh.boundary_node[std::size_t(edge.first)] = true;
      mesh.boundary_node[std::size_t(edge.second)] = true;
    }
  return mesh;
}

// ---------------------------------------------------------------------------
// Point projection
// ---------------------------------------------------------------------------

namespace {

struct TriLocator {
  BBox bb;
  double cell = 0.0;
  int nx = 0, ny = 0;
  std::vector<std::vector<int>> buckets;

  explicit TriLocator(const TriMesh& mesh) {
    bb = polygon_bbox(mesh.nodes);
    double max_edge = 0.0;
    for (int t = 0; t < mesh.n_triangles(); ++t) {
      auto e = triangle_edge_lengths(mesh, t);
      max_edge = std::max({max_edge, e[0], e[1], e[2]});
    }
    cell = std::max(max_edge, 1e-9);
    nx = std::max(1, int(std::ceil(bb.width() / cell)));
    ny = std::max(1, int(std::ceil(bb.height() / cell)));
    buckets.resize(std::size_t(nx) * std::size_t(ny));
    for (int t = 0; t < mesh.n_triangles(); ++t) {
      const auto& tri = mesh.triangles[t];
      double txmin = std::min({mesh.nodes[tri[0]].x, mesh.nodes[tri[1]].x, mesh.nodes[tri[2]].x});
      double txmax = std::max({mesh.nodes[tri[0]].x, mesh.nodes[tri[1]].x, mesh.nodes[tri[2]].x});
      double tymin = std::min({mesh.nodes[tri[0]].y, mesh.nodes[tri[1]].y, mesh.nodes[tri[2]].y});
      double tymax = std::max({mesh.nodes[tri[0]].y, mesh.nodes[tri[1]].y, mesh.nodes[tri[2]].y});
      for (int gx = cell_x(txmin); gx <= cell_x(txmax); ++gx)
        for (int gy = cell_y(tymin); gy <= cell_y(tymax); ++gy)
          buckets[std::size_t(gy) * std::size_t(nx) + std::size_t(gx)].push_back(t);
    }
  }

  int cell_x(double x) const {
    return std::clamp(int(std::floor((x - bb.xmin) / cell)), 0, nx - 1);
  }
  int cell_y(double y) const {
    return std::clamp(int(std::floor((y - bb.ymin) / cell)), 0, ny - 1);
  }
  const std::vector<int>& candidates(Point2 p) const {
    return buckets[std::size_t(cell_y(p.y)) * std::size_t(nx) + std::size_t(cell_x(p.x))];
  }
};

bool barycentric(const TriMesh& mesh, int t, Point2 p, std::array<double, 3>& w) {
  const auto& tri = mesh.triangles[t];
  Point2 a = mesh.nodes[tri[0]], b = mesh.nodes[tri[1]], c = mesh.nodes[tri[2]];
  double det = cross(b - a, c - a);
  if (det == 0.0) return false;
  double w1 = cross(p - a, c - a) / det;
  double w2 = cross(b - a, p - a) / det;
  double w0 = 1.0 - w1 - w2;
  const double eps = -1e-9;
  if (w0 < eps || w1 < eps || w2 < eps) return false;
  w = {std::max(w0, 0.0), std::max(w1, 0.0), std::max(w2, 0.0)};
  double s = w[0] + w[1] + w[2];
  w = {w[0] / s, w[1] / s, w[2] / s};
  return true;
}

}  // namespace

ProjectionMatrix project_points(const TriMesh& mesh, const std::vector<Point2>& points,
                                bool clamp_outside) {
  if (mesh.n_triangles() == 0) throw std::invalid_argument("project_points: empty mesh");
  TriLocator locator(mesh);

  // Boundary edge -> owning triangle, for optional clamping.
  std::map<std::pair<int, int>, std::pair<int, int>> edge_tris;
  if (clamp_outside) {
    for (int t = 0; t < mesh.n_triangles(); ++t) {
      const auto& tri = mesh.triangles[t];
      for (int k = 0; k < 3; ++k) {
        int a = tri[k], b = tri[(k + 1) % 3];
        if (a > b) std::swap(a, b);
        auto it = edge_tris.find({a, b});
        if (it == edge_tris.end())
          edge_tris[{a, b}] = {t, 1};
        else
          ++it->second.second;
      }
    }
  }

  ProjectionMatrix result;
  result.inside.assign(points.size(), false);
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(points.size() * 3);

  for (std::size_t i = 0; i < points.size(); ++i) {
    std::array<double, 3> w;
    int found = -1;
    for (int t : locator.candidates(points[i]))
      if (barycentric(mesh, t, points[i], w)) {
        found = t;
        break;
      }
    if (found >= 0) {
      result.inside[i] = true;
    } else if (clamp_outside) {
      // Snap to the nearest point on the mesh boundary.
      double best = std::numeric_limits<double>::infinity();
      Point2 q{};
      int owner = -1;
      for (const auto& [edge, tc] : edge_tris) {
        if (tc.second != 1) continue;
        Point2 a = mesh.nodes[edge.first], b = mesh.nodes[edge.second];
        double d = point_segment_distance(points[i], a, b);
        if (d < best) {
          best = d;
          owner = tc.first;
          Point2 ab = b - a;
          double t01 = dot(ab, ab) > 0.0
                           ? std::clamp(dot(points[i] - a, ab) / dot(ab, ab), 0.0, 1.0)
                           : 0.0;
          q = a + t01 * ab;
        }
      }
      if (owner >= 0 && barycentric(mesh, owner, q, w)) found = owner;
    }
    if (found >= 0) {
      const auto& tri = mesh.triangles[found];
      for (int k = 0; k < 3; ++k)
        if (w[std::size_t(k)] != 0.0)
          entries.emplace_back(int(i), tri[std::size_t(k)], w[std::size_t(k)]);
    }
  }

  result.A.resize(int(points.size()), mesh.n_nodes());
  result.A.setFromTriplets(entries.begin(), entries.end());
  result.A.makeCompressed();
  return result;
}

// ---------------------------------------------------------------------------
// Plain-text mesh format
// ---------------------------------------------------------------------------

std::string mesh_to_text(const TriMesh& mesh) {
  std::ostringstream out;
  out << "radmap-mesh 1\n";
  out << "quality " << fmt_double(mesh.quality.min_edge) << ' '
      << fmt_double(mesh.quality.max_edge) << ' ' << fmt_double(mesh.quality.min_angle_deg)
      << '\n';
  out << "nodes " << mesh.n_nodes() << '\n';
  for (int i = 0; i < mesh.n_nodes(); ++i)
    out << i << ' ' << fmt_double(mesh.nodes[std::size_t(i)].x) << ' '
        << fmt_double(mesh.nodes[std::size_t(i)].y) << ' '
        << (mesh.boundary_node[std::size_t(i)] ? 1 : 0) << '\n';
  out << "triangles " << mesh.n_triangles() << '\n';
  for (int t = 0; t < mesh.n_triangles(); ++t)
    out << t << ' ' << mesh.triangles[std::size_t(t)][0] << ' '
        << mesh.triangles[std::size_t(t)][1] << ' ' << mesh.triangles[std::size_t(t)][2] << '\n';
  return out.str();
}

TriMesh mesh_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "radmap-mesh" || version != 1)
    throw std::runtime_error("mesh_from_text: unrecognized header");
  TriMesh mesh;
  std::string section;
  in >> section;
  if (section != "quality") throw std::runtime_error("mesh_from_text: expected quality line");
  in >> mesh.quality.min_edge >> mesh.quality.max_edge >> mesh.quality.min_angle_deg;
  int n = 0;
  in >> section >> n;
  if (section != "nodes" || n < 0) throw std::runtime_error("mesh_from_text: bad node section");
  mesh.nodes.resize(std::size_t(n));
  mesh.boundary_node.resize(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    int id = 0, flag = 0;
    in >> id >> mesh.nodes[std::size_t(i)].x >> mesh.nodes[std::size_t(i)].y >> flag;
    if (!in || id != i) throw std::runtime_error("mesh_from_text: bad node row");
    mesh.boundary_node[std::size_t(i)] = flag != 0;
  }
  int m = 0;
  in >> section >> m;
  if (section != "triangles" || m < 0)
    throw std::runtime_error("mesh_from_text: bad triangle section");
  mesh.triangles.resize(std::size_t(m));
  for (int t = 0; t < m; ++t) {
    int id = 0;
    auto& tri = mesh.triangles[std::size_t(t)];
    in >> id >> tri[0] >> tri[1] >> tri[2];
    if (!in || id != t) throw std::runtime_error("mesh_from_text: bad triangle row");
    for (int v : tri)
      if (v < 0 || v >= n) throw std::runtime_error("mesh_from_text: node index out of range");
  }
  return mesh;
}

void save_mesh(const TriMesh& mesh, const std::string& path) {
  write_text_file(path, mesh_to_text(mesh));
}

TriMesh load_mesh(const std::string& path) { return mesh_from_text(read_text_file(path)); }

}  // namespace radmap
