#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "radmap/geometry.hpp"
#include "radmap/pipeline.hpp"
#include "radmap/util.hpp"

namespace radmap {

struct VariogramBin {
  double lag = 0.0;  // bin center in meters, or the integer sequence lag
  double semivariance = 0.0;
  std::size_t pairs = 0;
};

// Bins with no pairs are omitted, never zero-filled.
struct VariogramEstimate {
  std::vector<VariogramBin> bins;
};

std::string variogram_to_csv(const VariogramEstimate& est);

struct VariogramConfig {
  double bin_width = 1000.0;  // m
  double max_lag = 60000.0;   // m
  std::size_t subsample = 100000;
};

// Binned semivariance gamma(h) = sum (v_i - v_j)^2 / (2 |N(h)|) over pairs
// within max_lag, found through a spatial grid index. Draws a subsample
// first when points exceed config.subsample; deterministic under rng.
VariogramEstimate empirical_variogram(const std::vector<Point2>& points,
                                      const Eigen::VectorXd& values,
                                      const VariogramConfig& config, RngStream rng,
                                      int threads = 0);

// Semivariance by integer sequence lag along flights, pooled across flights.
// Pairs are records of one flight whose seq values differ by exactly the lag;
// flights with fewer than two records are skipped.
VariogramEstimate track_variogram(const std::vector<MeasurementRecord>& records, long max_lag);

struct RandomScheme {
  double train_fraction = 0.7;
};

struct BlockScheme {
  double block_size = 0.0;  // m, side of the square blocks
  int n_folds = 4;
};

using FoldScheme = std::variant<RandomScheme, BlockScheme>;

// fold[i] is the record's fold id. eval_folds lists the ids a CV run holds
// out in turn: every fold under the block scheme, but only fold 1 (the
// validation share) under the asymmetric random train/validation split.
struct FoldAssignment {
  int n_folds = 0;
  std::vector<int> fold;
  std::vector<int> eval_folds;
};

// Random scheme: splits records into train (fold 0) and validation (fold 1)
// with the configured fraction. Block scheme: snaps the data extent to a
// block lattice and assigns each block to a fold uniformly; a fold that ends
// up empty is an error suggesting a different seed or fewer folds.
FoldAssignment assign_folds(const std::vector<Point2>& points, const FoldScheme& scheme,
                            RngStream rng);

// Doubled quantile of nearest-reference distances among targets farther than
// exclusion_radius from every reference. Errors when no target qualifies.
double block_size_from_distances(const std::vector<Point2>& targets,
                                 const std::vector<Point2>& references,
                                 double exclusion_radius = 250.0, double quantile = 0.9);

// CRPS of N(mu, sd^2) against y; the sd = 0 limit degenerates to |y - mu|.
double crps_normal(double mu, double sd, double y);

struct Scores {
  double rmse = 0.0;  // back-transformed dose scale
  double r2 = 0.0;    // squared Pearson correlation, dose scale
  double crps = 0.0;  // log scale, averaged over points
};

// Mixed-scale scoring: RMSE and R^2 compare dose-scale point predictions to
// dose-scale observations; CRPS evaluates the log-scale Gaussian predictive.
Scores score(const Eigen::VectorXd& mean_log, const Eigen::VectorXd& sd_log,
             const Eigen::VectorXd& obs_log, const Eigen::VectorXd& pred_dose,
             const Eigen::VectorXd& obs_dose);

struct FoldScore {
  int fold = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  Scores scores;
  bool ok = false;
  std::string error;
};

struct CvReport {
  std::vector<FoldScore> folds;
  Scores aggregate;  // mean over successful folds
  bool partial = false;
};

CvReport aggregate_cv(std::vector<FoldScore> folds);

std::string cv_report_to_csv(const CvReport& report);

}  // namespace radmap
