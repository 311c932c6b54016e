#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "radmap/mesh.hpp"
#include "radmap/pipeline.hpp"

namespace radmap {

// Synthetic survey over a square toy domain: flights on horizontal tracks,
// dose rates simulated from smooth random fields plus categorical covariate
// effects, covariate rasters generated from smooth deterministic patterns.
// Everything derives from `seed`.
struct FixtureConfig {
  double domain_size = 24000.0;  // m, square side
  std::size_t n_flights = 40;
  double spacing = 90.0;       // m between consecutive records along track
  double margin = 300.0;       // m kept clear of the domain boundary
  double base_log = 3.93;      // lithology intercepts center here
  double range_long = 25000.0;
  double sigma_long = 0.4;
  double range_short = 1700.0;
  double sigma_short = 0.3;
  bool short_field = true;  // false: single-field truth
  double noise_sd = 0.22;
  double raster_cell = 500.0;
  std::size_t n_sources = 3;  // exclusion circles centered on track points
  double source_radius = 400.0;
  bool water = true;  // one lake polygon crossing several tracks
  double mesh_edge_long = 0.0;   // 0: range_long / 5, capped at domain_size / 6
  double mesh_edge_short = 0.0;  // 0: range_short / 2.5
  std::uint64_t seed = 20260819;
};

struct Fixture {
  FixtureConfig config;
  Polygon domain;
  std::vector<MeasurementRecord> records;
  ExclusionSpec exclusion;
  CovariateRasters rasters;
  CovariateLevels levels;
  Eigen::VectorXd beta;  // true coefficients, one per design column
  TriMesh mesh_long;
  Eigen::VectorXd u_long;
  TriMesh mesh_short;      // empty when config.short_field is false
  Eigen::VectorXd u_short;

  // Noise-free log dose surface (fields plus covariate effects) at arbitrary
  // in-domain points.
  Eigen::VectorXd true_log_mean(const std::vector<Point2>& points) const;
};

Fixture make_fixture(const FixtureConfig& config);

// Writes measurements.csv, the four covariate rasters, exclusion.json, and
// domain.json under dir (created if missing).
void write_fixture(const std::string& dir, const Fixture& fixture);

}  // namespace radmap
