#pragma once

namespace radmap {

// Complexity-penalizing prior on the correlation range (two dimensions):
// density lambda r^-2 exp(-lambda / r), shrinking toward infinite range.
struct PcRangePrior {
  double lambda = 0.0;
};

// Calibrated so that P(range < rho0) = alpha.
PcRangePrior pc_range_prior(double rho0, double alpha);
double log_density(const PcRangePrior& prior, double rho);
double cdf(const PcRangePrior& prior, double rho);
double quantile(const PcRangePrior& prior, double p);

// Complexity-penalizing prior on a standard deviation: exponential with rate
// lambda, shrinking toward zero variance.
struct PcSigmaPrior {
  double lambda = 0.0;
};

// Calibrated so that P(sigma > sigma0) = alpha.
PcSigmaPrior pc_sigma_prior(double sigma0, double alpha);
double log_density(const PcSigmaPrior& prior, double sigma);
double cdf(const PcSigmaPrior& prior, double sigma);
double quantile(const PcSigmaPrior& prior, double p);

// Gamma prior (shape/rate) on an observation noise precision.
struct GammaPrior {
  double shape = 1.0;
  double rate = 5e-5;
};

double log_density(const GammaPrior& prior, double x);

// Zero-mean Gaussian prior with a common variance, used for fixed effects.
struct GaussianPrior {
  double variance = 1000.0;
};

double log_density(const GaussianPrior& prior, double x);

}  // namespace radmap
