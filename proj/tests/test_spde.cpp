#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "radmap/fem.hpp"
#include "radmap/geometry.hpp"
#include "radmap/mesh.hpp"
#include "radmap/spde.hpp"
#include "radmap/util.hpp"

using namespace radmap;

namespace {

Polygon square(double s) { return Polygon{{{0.0, 0.0}, {s, 0.0}, {s, s}, {0.0, s}}}; }

}  // namespace

TEST_CASE("parameter maps hit their frozen values") {
  CHECK(matern_kappa(10.0) == doctest::Approx(0.28284271247461901).epsilon(1e-15));
  CHECK(matern_tau(10.0, 2.0) == doctest::Approx(0.49867785050179085).epsilon(1e-14));
  CHECK_THROWS_AS(matern_kappa(0.0), std::invalid_argument);
  CHECK_THROWS_AS(matern_tau(10.0, -1.0), std::invalid_argument);
}

TEST_CASE("bessel_k1 matches the standard library across both branches") {
  // Frozen spot values guard against both implementations drifting together.
  CHECK(bessel_k1(0.01) == doctest::Approx(99.973894118296248).epsilon(1e-13));
  CHECK(bessel_k1(1.0) == doctest::Approx(0.60190723019723457).epsilon(1e-13));
  CHECK(bessel_k1(2.0) == doctest::Approx(0.13986588181652243).epsilon(1e-13));
  CHECK(bessel_k1(5.0) == doctest::Approx(0.0040446134454521642).epsilon(1e-13));
  CHECK(bessel_k1(10.0) == doctest::Approx(1.8648773453825585e-5).epsilon(1e-13));
  CHECK(bessel_k1(30.0) == doctest::Approx(2.1677320018915494e-14).epsilon(1e-13));

  for (double x = 0.02; x < 60.0; x *= 1.17) {
    double ref = std::cyl_bessel_k(1.0, x);
    CHECK(std::abs(bessel_k1(x) / ref - 1.0) < 1e-12);  // relative even for tiny values
  }
  // Continuity across the series/quadrature switch.
  CHECK(bessel_k1(1.9999) == doctest::Approx(0.13988426583169102).epsilon(1e-12));
  CHECK(bessel_k1(2.0001) == doctest::Approx(0.13984750046881143).epsilon(1e-12));
  CHECK_THROWS_AS(bessel_k1(0.0), std::domain_error);
}

TEST_CASE("correlation at the practical range is ~0.14") {
  CHECK(matern_correlation(0.0, 12.0) == 1.0);
  for (double rho : {1.0, 8.0, 40.0})
    CHECK(matern_correlation(rho, rho) == doctest::Approx(0.13966747401529314).epsilon(1e-12));
  // Strictly decreasing in distance.
  double prev = 1.0;
  for (double r = 0.5; r < 40.0; r += 0.5) {
    double c = matern_correlation(r, 10.0);
    CHECK(c < prev);
    CHECK(c > 0.0);
    prev = c;
  }
}

TEST_CASE("sparse precision equals the dense textbook formula") {
  TriMesh mesh = build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 7);
  FemMatrices fem = assemble_fem(mesh);
  SpdeParams p{6.0, 1.5};
  Eigen::SparseMatrix<double> q = spde_precision(fem, p);

  double kappa = matern_kappa(p.range);
  double tau = matern_tau(p.range, p.sigma);
  Eigen::MatrixXd c = fem.lumped_mass.asDiagonal();
  Eigen::MatrixXd g = Eigen::MatrixXd(fem.stiffness);
  Eigen::MatrixXd dense = tau * tau *
                          (std::pow(kappa, 4.0) * c + 2.0 * kappa * kappa * g +
                           g * c.inverse() * g);
  CHECK((Eigen::MatrixXd(q) - dense).cwiseAbs().maxCoeff() <
        1e-10 * dense.cwiseAbs().maxCoeff());

  // Symmetric positive definite: a Cholesky factorization must succeed.
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> chol(q);
  CHECK(chol.info() == Eigen::Success);
}

TEST_CASE("doubling sigma scales the precision by a quarter") {
  TriMesh mesh = build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 7);
  FemMatrices fem = assemble_fem(mesh);
  Eigen::SparseMatrix<double> q1 = spde_precision(fem, {6.0, 1.0});
  Eigen::SparseMatrix<double> q2 = spde_precision(fem, {6.0, 2.0});
  Eigen::MatrixXd d1 = Eigen::MatrixXd(q1), d2 = Eigen::MatrixXd(q2);
  CHECK((d1 - 4.0 * d2).cwiseAbs().maxCoeff() < 1e-12 * d1.cwiseAbs().maxCoeff());
}

TEST_CASE("field covariance reproduces the analytic correlation") {
  // Domain 5x the range, band 1x the range, spacing ~0.15x the range: close
  // enough to the continuum for a 10% check away from the boundary.
  const double rho = 8.0, sigma = 2.0;
  TriMesh mesh = build_mesh(square(40.0), 1.0, 1.5, 31.0, 8.0, 11);
  FemMatrices fem = assemble_fem(mesh);
  Eigen::SparseMatrix<double> q = spde_precision(fem, {rho, sigma});
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> chol(q);
  REQUIRE(chol.info() == Eigen::Success);

  const Point2 center{20.0, 20.0};
  std::vector<int> sources;
  for (std::size_t i = 0; i < mesh.nodes.size(); ++i)
    if (dist(mesh.nodes[i], center) < 0.25 * rho) sources.push_back(int(i));
  REQUIRE(sources.size() >= 3);
  if (sources.size() > 12) sources.resize(12);

  // Bin exact covariances against every node within 1.5 range of the center.
  std::vector<int> targets;
  for (std::size_t i = 0; i < mesh.nodes.size(); ++i)
    if (dist(mesh.nodes[i], center) < 1.5 * rho) targets.push_back(int(i));

  const int nbins = 13;
  const double bin_w = 0.1 * rho;
  std::vector<double> sum(nbins, 0.0);
  std::vector<int> cnt(nbins, 0);
  double var_err = 0.0;
  for (int s : sources) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(q.rows());
    e[s] = 1.0;
    Eigen::VectorXd cov = chol.solve(e);
    var_err = std::max(var_err, std::abs(cov[s] - sigma * sigma));
    for (int t : targets) {
      double r = dist(mesh.nodes[std::size_t(s)], mesh.nodes[std::size_t(t)]);
      int b = int(r / bin_w);
      if (r == 0.0 || b >= nbins) continue;
      sum[std::size_t(b)] += cov[t];
      ++cnt[std::size_t(b)];
    }
  }
  CHECK(var_err < 0.15 * sigma * sigma);
  // Skip lags under ~2 mesh edges where the discrete Green's function departs
  // from the continuum.
  for (int b = 3; b < nbins; ++b) {
    REQUIRE(cnt[std::size_t(b)] > 0);
    double mean_r = (b + 0.5) * bin_w;
    double got = sum[std::size_t(b)] / cnt[std::size_t(b)];
    double want = sigma * sigma * matern_correlation(mean_r, rho);
    CHECK(std::abs(got - want) < 0.10 * sigma * sigma);
  }
}

TEST_CASE("sampler moments agree with the exact covariance") {
  TriMesh mesh = build_mesh(square(20.0), 2.0, 3.0, 31.0, 6.0, 5);
  FemMatrices fem = assemble_fem(mesh);
  Eigen::SparseMatrix<double> q = spde_precision(fem, {6.0, 1.5});
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> chol(q);
  REQUIRE(chol.info() == Eigen::Success);

  // Pick an interior node and one neighbor ~half a range away.
  int a = -1, b = -1;
  for (std::size_t i = 0; i < mesh.nodes.size(); ++i) {
    if (dist(mesh.nodes[i], {10.0, 10.0}) < 1.5 && a < 0) a = int(i);
    if (dist(mesh.nodes[i], {13.0, 10.0}) < 1.5 && b < 0) b = int(i);
  }
  REQUIRE(a >= 0);
  REQUIRE(b >= 0);
  REQUIRE(a != b);

  Eigen::VectorXd ea = Eigen::VectorXd::Zero(q.rows());
  ea[a] = 1.0;
  Eigen::VectorXd cov = chol.solve(ea);

  RngStream rng(20260819);
  const int n = 1200;
  const std::size_t un = 1200;
  double mean_a = 0.0, var_a = 0.0, cov_ab = 0.0;
  std::vector<double> xs(un), ys(un);
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd x = sample_gmrf(chol, rng);
    xs[std::size_t(k)] = x[a];
    ys[std::size_t(k)] = x[b];
  }
  for (int k = 0; k < n; ++k) mean_a += xs[std::size_t(k)] / n;
  for (int k = 0; k < n; ++k) {
    var_a += (xs[std::size_t(k)] - mean_a) * (xs[std::size_t(k)] - mean_a) / (n - 1);
    cov_ab += xs[std::size_t(k)] * ys[std::size_t(k)] / n;
  }
  CHECK(std::abs(mean_a) < 4.0 * std::sqrt(cov[a] / n));
  CHECK(var_a == doctest::Approx(cov[a]).epsilon(0.15));
  CHECK(cov_ab == doctest::Approx(cov[b]).epsilon(0.25));
}
