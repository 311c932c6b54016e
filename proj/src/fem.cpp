#include "radmap/fem.hpp"

#include <stdexcept>
#include <vector>

#include "radmap/geometry.hpp"

namespace radmap {

FemMatrices assemble_fem(const TriMesh& mesh) {
  const auto n = Eigen::Index(mesh.nodes.size());
  FemMatrices fem;
  fem.lumped_mass = Eigen::VectorXd::Zero(n);

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(mesh.triangles.size() * 9);
  for (const auto& t : mesh.triangles) {
    Point2 a = mesh.nodes[t[0]], b = mesh.nodes[t[1]], c = mesh.nodes[t[2]];
    double area2 = cross(b - a, c - a);
    if (area2 <= 0.0) throw std::invalid_argument("assemble_fem: degenerate or CW triangle");
    double area = 0.5 * area2;
    for (int k = 0; k < 3; ++k) fem.lumped_mass[t[k]] += area / 3.0;
    // Edge vector opposite each vertex; grad(phi_k) = perp(e_k) / (2 area),
    // so the grad-grad entries reduce to dot products of opposite edges.
    Point2 e[3] = {c - b, a - c, b - a};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        trips.emplace_back(t[i], t[j], dot(e[i], e[j]) / (4.0 * area));
  }

  fem.stiffness.resize(n, n);
  fem.stiffness.setFromTriplets(trips.begin(), trips.end());
  fem.stiffness.makeCompressed();
  return fem;
}

}  // namespace radmap
