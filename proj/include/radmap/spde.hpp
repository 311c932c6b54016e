#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "radmap/fem.hpp"
#include "radmap/util.hpp"

namespace radmap {

// Matern (smoothness 1) field parameters.
struct SpdeParams {
  double range = 0.0;  // practical correlation range: correlation ~0.14 at this lag
  double sigma = 0.0;  // marginal standard deviation
};

// Scale parameter kappa = sqrt(8) / range.
double matern_kappa(double range);

// Normalization tau = 1 / (2 sqrt(pi) kappa sigma), so the field variance is sigma^2.
double matern_tau(double range, double sigma);

double bessel_k1(double x);

// Matern correlation with smoothness 1: (kappa r) K1(kappa r), 1 at r = 0.
double matern_correlation(double r, double range);

// Sparse precision tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G) with lumped mass C.
Eigen::SparseMatrix<double> spde_precision(const FemMatrices& fem, const SpdeParams& p);

// One zero-mean sample with precision chol(Q): x = P^{-1} L^{-T} z, z ~ N(0, I).
Eigen::VectorXd sample_gmrf(const Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>& chol,
                            RngStream& rng);

}  // namespace radmap
