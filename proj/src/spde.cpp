#include "radmap/spde.hpp"

#include <cmath>
#include <stdexcept>

namespace radmap {

double matern_kappa(double range) {
  if (!(range > 0.0)) throw std::invalid_argument("matern_kappa: range must be > 0");
  return std::sqrt(8.0) / range;
}

double matern_tau(double range, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("matern_tau: sigma must be > 0");
  return 1.0 / (2.0 * std::sqrt(M_PI) * matern_kappa(range) * sigma);
}

double bessel_k1(double x) {
  if (!(x > 0.0)) throw std::domain_error("bessel_k1: x must be > 0");
  if (x <= 2.0) {
    // K1(x) = ln(x/2) I1(x) + 1/x - (x/4) sum_k [psi(k+1) + psi(k+2)] q^k / (k! (k+1)!)
    // with q = x^2/4; converges in a handful of terms on this interval.
    const double q = 0.25 * x * x;
    double term_i = 0.5 * x;  // I1 series term, k = 0
    double i1 = term_i;
    double term_s = 1.0;  // q^k / (k! (k+1)!), k = 0
    double psi1 = -0.57721566490153286;
    double psi2 = psi1 + 1.0;
    double s = psi1 + psi2;
    for (int k = 1; k < 64; ++k) {
      double f = q / (double(k) * double(k + 1));
      term_i *= f;
      i1 += term_i;
      term_s *= f;
      psi1 += 1.0 / double(k);
      psi2 += 1.0 / double(k + 1);
      double add = (psi1 + psi2) * term_s;
      s += add;
      if (std::abs(add) < 1e-18 * std::abs(s) && term_i < 1e-18 * i1) break;
    }
    return std::log(0.5 * x) * i1 + 1.0 / x - 0.25 * x * s;
  }
  // K1(x) = integral_0^inf exp(-x cosh t) cosh t dt. The integrand is even,
  // analytic, and decays doubly exponentially, so the trapezoid rule converges
  // geometrically; truncate where exp underflows.
  if (x > 740.0) return 0.0;
  const double tmax = std::acosh(745.0 / x);
  const double step = 0.1;
  const int n = int(std::ceil(tmax / step));
  double sum = 0.5 * std::exp(-x);
  for (int k = 1; k <= n; ++k) {
    double ch = std::cosh(double(k) * step);
    sum += std::exp(-x * ch) * ch;
  }
  return step * sum;
}

double matern_correlation(double r, double range) {
  if (!(range > 0.0)) throw std::invalid_argument("matern_correlation: range must be > 0");
  if (r < 0.0) throw std::invalid_argument("matern_correlation: distance must be >= 0");
  double u = matern_kappa(range) * r;
  if (u == 0.0) return 1.0;
  if (u > 740.0) return 0.0;
  return u * bessel_k1(u);
}

Eigen::SparseMatrix<double> spde_precision(const FemMatrices& fem, const SpdeParams& p) {
  if (fem.lumped_mass.size() != fem.stiffness.rows())
    throw std::invalid_argument("spde_precision: inconsistent FEM matrices");
  const double kappa = matern_kappa(p.range);
  const double tau = matern_tau(p.range, p.sigma);
  const double k2 = kappa * kappa;

  const Eigen::Index n = fem.lumped_mass.size();
  Eigen::SparseMatrix<double> cinv_g(n, n);
  cinv_g = fem.lumped_mass.cwiseInverse().asDiagonal() * fem.stiffness;
  Eigen::SparseMatrix<double> q = fem.stiffness * cinv_g;
  q += Eigen::SparseMatrix<double>(2.0 * k2 * fem.stiffness);
  Eigen::SparseMatrix<double> mass(n, n);
  mass = (k2 * k2 * fem.lumped_mass).asDiagonal();
  q += mass;
  q *= tau * tau;
  q.makeCompressed();
  return q;
}

Eigen::VectorXd sample_gmrf(const Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>& chol,
                            RngStream& rng) {
  if (chol.info() != Eigen::Success)
    throw std::invalid_argument("sample_gmrf: factorization is not usable");
  Eigen::VectorXd z(chol.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  // Q = P^T L L^T P, so x = P^{-1} L^{-T} z has covariance Q^{-1}.
  Eigen::VectorXd y = chol.matrixU().solve(z);
  return chol.permutationPinv() * y;
}

}  // namespace radmap
