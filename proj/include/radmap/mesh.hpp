#pragma once

#include <Eigen/SparseCore>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "radmap/geometry.hpp"

namespace radmap {

struct MeshQuality {
  double min_edge = 0.0;       // m
  double max_edge = 0.0;       // m
  double min_angle_deg = 0.0;  // degrees
};

// Triangulation over a planar domain. Triangles are CCW node-index triples.
// Nodes flagged as boundary lie on the hull of the meshed region (the
// extension boundary when an extension band is present).
struct TriMesh {
  std::vector<Point2> nodes;
  std::vector<std::array<int, 3>> triangles;
  std::vector<bool> boundary_node;
  MeshQuality quality;

  int n_nodes() const { return int(nodes.size()); }
  int n_triangles() const { return int(triangles.size()); }
};

double triangle_signed_area(const TriMesh& mesh, int t);
std::array<double, 3> triangle_edge_lengths(const TriMesh& mesh, int t);
double triangle_min_angle_deg(const TriMesh& mesh, int t);

struct MeshAudit {
  double min_interior_angle_deg = 180.0;
  double min_interior_edge = 0.0;
  double max_interior_edge = 0.0;
  double max_band_edge = 0.0;
  int n_interior_triangles = 0;
  int n_band_triangles = 0;
};

// Quality statistics split by triangle position relative to the core polygon
// (interior = centroid inside core).
MeshAudit audit_mesh(const TriMesh& mesh, const Polygon& core);

// Quasi-uniform constrained triangulation of `domain`, optionally surrounded
// by a coarsening extension band of width `extension` (edge lengths in the
// band may grow up to 2*max_edge). Deterministic for fixed inputs and seed.
TriMesh build_mesh(const Polygon& domain, double min_edge, double max_edge,
                   double min_angle_deg, double extension, std::uint64_t seed = 0);

// Sparse barycentric interpolation matrix: rows are query points, columns are
// mesh nodes. Points outside the hull are flagged in `inside`; their rows are
// zero unless clamping snapped them to the nearest boundary triangle.
struct ProjectionMatrix {
  Eigen::SparseMatrix<double> A;
  std::vector<bool> inside;
};

ProjectionMatrix project_points(const TriMesh& mesh, const std::vector<Point2>& points,
                                bool clamp_outside = false);

// Plain-text mesh container (node/triangle sections, documented in README).
std::string mesh_to_text(const TriMesh& mesh);
TriMesh mesh_from_text(const std::string& text);
void save_mesh(const TriMesh& mesh, const std::string& path);
TriMesh load_mesh(const std::string& path);

}  // namespace radmap
