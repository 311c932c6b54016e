#include "radmap/priors.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace radmap {

namespace {

void check_prob(double p, const char* who) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument(std::string(who) + ": probability must lie in (0, 1)");
}

}  // namespace

PcRangePrior pc_range_prior(double rho0, double alpha) {
  if (!(rho0 > 0.0)) throw std::invalid_argument("pc_range_prior: rho0 must be > 0");
  check_prob(alpha, "pc_range_prior");
  // CDF is exp(-lambda / r); invert at the calibration point.
  return {-std::log(alpha) * rho0};
}

double log_density(const PcRangePrior& prior, double rho) {
  if (!(rho > 0.0)) throw std::invalid_argument("PcRangePrior: range must be > 0");
  return std::log(prior.lambda) - 2.0 * std::log(rho) - prior.lambda / rho;
}

double cdf(const PcRangePrior& prior, double rho) {
  if (!(rho > 0.0)) throw std::invalid_argument("PcRangePrior: range must be > 0");
  return std::exp(-prior.lambda / rho);
}

double quantile(const PcRangePrior& prior, double p) {
  check_prob(p, "PcRangePrior");
  return -prior.lambda / std::log(p);
}

PcSigmaPrior pc_sigma_prior(double sigma0, double alpha) {
  if (!(sigma0 > 0.0)) throw std::invalid_argument("pc_sigma_prior: sigma0 must be > 0");
  check_prob(alpha, "pc_sigma_prior");
  // Tail is exp(-lambda sigma); invert at the calibration point.
  return {-std::log(alpha) / sigma0};
}

double log_density(const PcSigmaPrior& prior, double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("PcSigmaPrior: sigma must be >= 0");
  return std::log(prior.lambda) - prior.lambda * sigma;
}

double cdf(const PcSigmaPrior& prior, double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("PcSigmaPrior: sigma must be >= 0");
  return 1.0 - std::exp(-prior.lambda * sigma);
}

double quantile(const PcSigmaPrior& prior, double p) {
  check_prob(p, "PcSigmaPrior");
  return -std::log1p(-p) / prior.lambda;
}

double log_density(const GammaPrior& prior, double x) {
  if (!(x > 0.0)) throw std::invalid_argument("GammaPrior: precision must be > 0");
  return prior.shape * std::log(prior.rate) - std::lgamma(prior.shape) +
         (prior.shape - 1.0) * std::log(x) - prior.rate * x;
}

double log_density(const GaussianPrior& prior, double x) {
  return -0.5 * std::log(2.0 * M_PI * prior.variance) - 0.5 * x * x / prior.variance;
}

}  // namespace radmap
