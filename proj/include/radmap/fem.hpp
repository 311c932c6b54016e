#pragma once

#include <Eigen/Sparse>

#include "radmap/mesh.hpp"

namespace radmap {

// Piecewise-linear finite element matrices on a triangulation.
struct FemMatrices {
  Eigen::VectorXd lumped_mass;            // row sums of the mass matrix, one per node
  Eigen::SparseMatrix<double> stiffness;  // grad-grad matrix, symmetric PSD
};

FemMatrices assemble_fem(const TriMesh& mesh);

}  // namespace radmap
