#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <cstdint>
#include <string>
#include <vector>

#include "radmap/fem.hpp"
#include "radmap/priors.hpp"
#include "radmap/spde.hpp"
#include "radmap/util.hpp"

namespace radmap {

// One latent field: its mesh matrices, the observation basis into that mesh,
// and the penalized-complexity priors on its range and marginal sd.
struct FieldModel {
  FemMatrices fem;
  Eigen::SparseMatrix<double> basis;  // observation x field nodes
  PcRangePrior range_prior;
  PcSigmaPrior sigma_prior;
};

// Full observation model. Zero fields is a pure regression, one field the
// spatial or mixed variants, two fields the dual-range variant. The joint
// latent state is [field 1 nodes; field 2 nodes; fixed effects].
struct ModelSpec {
  std::vector<FieldModel> fields;
  Eigen::MatrixXd design;  // observation x fixed effect
  Eigen::VectorXd values;  // responses on the model (log) scale
  GammaPrior noise_precision;
  GaussianPrior fixed_effects;
};

struct Hyperparameters {
  double noise_sd = 0.0;
  std::vector<SpdeParams> fields;  // one (range, sigma) per field
};

// Exact Gaussian inference at fixed hyperparameters.
class ConditionalPosterior {
 public:
  ConditionalPosterior(const ModelSpec& spec, const Hyperparameters& theta);

  double log_marginal() const { return log_marginal_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  Eigen::Index joint_size() const { return mean_.size(); }

  // Posterior sd of one linear functional per row of lin (joint-state width).
  Eigen::VectorXd linear_sd(const Eigen::SparseMatrix<double>& lin, int chunk = 256,
                            int threads = 1) const;

  Eigen::VectorXd sample(RngStream& rng) const;

 private:
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> chol_;
  Eigen::VectorXd mean_;
  double log_marginal_ = 0.0;
};

// Log marginal likelihood plus hyperparameter priors, as a density in
// (log noise_sd, log range_1, log sigma_1, ...).
double log_hyper_posterior(const ModelSpec& spec, const Hyperparameters& theta);

struct FitConfig {
  Hyperparameters init;        // defaulted per model when fields empty
  int grid_steps = 2;          // grid spans mode +/- grid_steps points per axis
  double grid_scale = 0.75;    // grid step = scale * posterior sd per axis
  double fallback_step = 0.5;  // log-scale step when the curvature is unusable
  int nelder_mead_iters = 400;
  int threads = 1;
};

struct GridPoint {
  Hyperparameters theta;
  double log_posterior = 0.0;  // unnormalized
  double weight = 0.0;
};

struct ModelFit {
  Hyperparameters mode;
  std::vector<GridPoint> grid;
  std::size_t mode_index = 0;  // grid entry at the mode
  bool curvature_fallback = false;
  // Conditional posterior means of the joint state, one per grid entry;
  // prediction mixes these without refactorizing for the mean surface.
  std::vector<Eigen::VectorXd> conditional_means;
  std::vector<double> beta_mean;  // mixture summaries, one per fixed effect
  std::vector<double> beta_sd;
  std::vector<std::string> design_names;
  std::uint64_t data_checksum = 0;
};

// Mode finding on log hyperparameters, curvature-scaled tensor grid, and
// normalized weights. Rejects rank-deficient designs.
ModelFit fit_model(const ModelSpec& spec, const FitConfig& cfg = {});

struct PredictionSummary {
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
};

// Mixture prediction over the fitted grid for rows of
// [field bases... | design]; include_noise adds the per-component
// observation variance.
PredictionSummary predict_mixture(const ModelSpec& spec, const ModelFit& fit,
                                  const std::vector<Eigen::SparseMatrix<double>>& field_bases,
                                  const Eigen::MatrixXd& design, bool include_noise,
                                  int chunk = 256, int threads = 1);

// Joint posterior draws; the mixture component is resampled per draw.
Eigen::MatrixXd sample_posterior(const ModelSpec& spec, const ModelFit& fit, int n,
                                 RngStream& rng);

// Log-scale Gaussian summaries mapped to the observation scale.
double lognormal_median(double mu);
double lognormal_mean(double mu, double var);

std::string fit_to_json(const ModelFit& fit);
ModelFit fit_from_json(const std::string& text);

}  // namespace radmap
