#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "radmap/fem.hpp"
#include "radmap/geometry.hpp"
#include "radmap/mesh.hpp"

using namespace radmap;

namespace {

Polygon square(double s) { return Polygon{{{0.0, 0.0}, {s, 0.0}, {s, s}, {0.0, s}}}; }

TriMesh unit_right_triangle() {
  TriMesh mesh;
  mesh.nodes = {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}};
  mesh.triangles = {{0, 1, 2}};
  mesh.boundary_node = {true, true, true};
  mesh.quality = {0.1, 2.0, 10.0};
  return mesh;
}

}  // namespace

TEST_CASE("single-triangle matrices match hand computation") {
  FemMatrices fem = assemble_fem(unit_right_triangle());

  CHECK(fem.lumped_mass.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(fem.lumped_mass[i] == doctest::Approx(1.0 / 6.0).epsilon(1e-14));

  Eigen::MatrixXd g = Eigen::MatrixXd(fem.stiffness);
  Eigen::MatrixXd expect(3, 3);
  expect << 1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5;
  CHECK((g - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("assembled matrices satisfy the structural identities") {
  TriMesh mesh = build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 7);
  FemMatrices fem = assemble_fem(mesh);
  const auto n = Eigen::Index(mesh.nodes.size());

  double area = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) area += triangle_signed_area(mesh, t);
  CHECK(fem.lumped_mass.sum() == doctest::Approx(area).epsilon(1e-12));
  CHECK(fem.lumped_mass.sum() == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(fem.lumped_mass.minCoeff() > 0.0);

  // Constants lie in the kernel of the grad-grad matrix.
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  CHECK((fem.stiffness * ones).cwiseAbs().maxCoeff() < 1e-12);

  Eigen::MatrixXd g = Eigen::MatrixXd(fem.stiffness);
  CHECK((g - g.transpose()).cwiseAbs().maxCoeff() < 1e-13);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g);
  CHECK(eig.eigenvalues().minCoeff() > -1e-11);
}

TEST_CASE("stiffness agrees with an independent per-element gradient assembly") {
  TriMesh mesh = build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 3);
  FemMatrices fem = assemble_fem(mesh);
  const auto n = Eigen::Index(mesh.nodes.size());

  // Reference path: solve for each basis gradient from the interpolation
  // conditions instead of using opposite-edge vectors.
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(n, n);
  for (const auto& t : mesh.triangles) {
    Point2 a = mesh.nodes[t[0]], b = mesh.nodes[t[1]], c = mesh.nodes[t[2]];
    Eigen::Matrix2d d;
    d << b.x - a.x, b.y - a.y, c.x - a.x, c.y - a.y;
    double area = 0.5 * d.determinant();
    Eigen::Matrix2d dinv = d.inverse();
    Eigen::Matrix<double, 2, 3> grads;
    // Basis k has value 1 at vertex k, 0 elsewhere; gradient solves d * g = e_k.
    grads.col(1) = dinv * Eigen::Vector2d(1.0, 0.0);
    grads.col(2) = dinv * Eigen::Vector2d(0.0, 1.0);
    grads.col(0) = -grads.col(1) - grads.col(2);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) ref(t[i], t[j]) += area * grads.col(i).dot(grads.col(j));
  }

  Eigen::MatrixXd g = Eigen::MatrixXd(fem.stiffness);
  CHECK((g - ref).cwiseAbs().maxCoeff() < 1e-12 * ref.cwiseAbs().maxCoeff());
}

TEST_CASE("degenerate elements are rejected") {
  TriMesh mesh = unit_right_triangle();
  mesh.nodes[2] = {2.0, 0.0};  // collinear
  CHECK_THROWS_AS(assemble_fem(mesh), std::invalid_argument);
}
