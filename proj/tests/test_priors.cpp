#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "radmap/priors.hpp"

using namespace radmap;

TEST_CASE("range prior calibration inverts its CDF") {
  // Median at 15: lambda = 15 ln 2.
  PcRangePrior base = pc_range_prior(15.0, 0.5);
  CHECK(base.lambda == doctest::Approx(10.397207708399180).epsilon(1e-14));
  CHECK(cdf(base, 15.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(quantile(base, 0.5) == doctest::Approx(15.0).epsilon(1e-13));

  // Alternative calibrations used in sensitivity runs.
  PcRangePrior wide = pc_range_prior(15.0, 0.4);
  CHECK(cdf(wide, 15.0) == doctest::Approx(0.4).epsilon(1e-13));
  PcRangePrior tight = pc_range_prior(2.0, 0.02);
  CHECK(cdf(tight, 2.0) == doctest::Approx(0.02).epsilon(1e-13));
  CHECK(quantile(tight, cdf(tight, 7.0)) == doctest::Approx(7.0).epsilon(1e-12));

  CHECK_THROWS_AS(pc_range_prior(-1.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(pc_range_prior(15.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(log_density(base, 0.0), std::invalid_argument);
}

TEST_CASE("sigma prior calibration matches its exponential tail") {
  PcSigmaPrior p = pc_sigma_prior(10.0, 0.01);
  CHECK(p.lambda == doctest::Approx(0.46051701859880916).epsilon(1e-14));
  CHECK(1.0 - cdf(p, 10.0) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(quantile(p, 0.99) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(quantile(p, cdf(p, 3.7)) == doctest::Approx(3.7).epsilon(1e-12));
  CHECK_THROWS_AS(pc_sigma_prior(10.0, 0.0), std::invalid_argument);
}

TEST_CASE("joint hyperparameter prior is normalized") {
  PcRangePrior pr = pc_range_prior(15.0, 0.5);
  PcSigmaPrior ps = pc_sigma_prior(10.0, 0.01);
  // Tensor Simpson over a box holding all but ~1e-9 of the mass; substitute
  // t = 1/rho to tame the heavy range tail.
  const int n = 2000;  // even
  const double tmax = 22.0 / pr.lambda;
  const double smax = 40.0 / ps.lambda;
  auto simpson_w = [n](int i) {
    if (i == 0 || i == n) return 1.0;
    return (i % 2 == 1) ? 4.0 : 2.0;
  };
  double total = 0.0;
  for (int i = 0; i <= n; ++i) {
    double t = tmax * i / n;
    // In t the range density is lambda exp(-lambda t): evaluate through the
    // library on rho = 1/t with the Jacobian rho^2, analytic limit at t = 0.
    double fr = (i == 0) ? pr.lambda
                         : std::exp(log_density(pr, 1.0 / t)) / (t * t);
    for (int j = 0; j <= n; ++j) {
      double s = smax * j / n;
      total += simpson_w(i) * simpson_w(j) * fr * std::exp(log_density(ps, s));
    }
  }
  total *= (tmax / (3.0 * n)) * (smax / (3.0 * n));
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("noise precision prior evaluates the gamma density") {
  GammaPrior g;  // shape 1, rate 5e-5
  CHECK(log_density(g, 1000.0) ==
        doctest::Approx(std::log(5e-5) - 5e-5 * 1000.0).epsilon(1e-13));
  GammaPrior g2{2.5, 0.3};
  double x = 7.0;
  double want = 2.5 * std::log(0.3) - std::lgamma(2.5) + 1.5 * std::log(x) - 0.3 * x;
  CHECK(log_density(g2, x) == doctest::Approx(want).epsilon(1e-13));
  CHECK_THROWS_AS(log_density(g, 0.0), std::invalid_argument);
}

TEST_CASE("fixed-effect prior gradient matches finite differences") {
  GaussianPrior b;  // variance 1000
  for (double x : {-20.0, -1.0, 0.0, 3.5, 50.0}) {
    double h = 1e-5;
    double fd = (log_density(b, x + h) - log_density(b, x - h)) / (2.0 * h);
    CHECK(fd == doctest::Approx(-x / b.variance).epsilon(1e-6));
  }
  // Normalization constant: density of a standard normal at 0 when variance 1.
  GaussianPrior unit{1.0};
  CHECK(log_density(unit, 0.0) == doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-14));
}
