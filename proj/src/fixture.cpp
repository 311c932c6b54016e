#include "radmap/fixture.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "radmap/fem.hpp"
#include "radmap/spde.hpp"
#include "radmap/util.hpp"

namespace radmap {

namespace {

// Smooth category pattern: blobby level sets of a two-frequency sine mix.
int pattern_code(Point2 p, double extent, std::size_t n_levels, double fx, double fy,
                 double phase) {
  const double s = 0.5 + 0.25 * std::sin(2.0 * M_PI * fx * p.x / extent + phase) +
                   0.25 * std::cos(2.0 * M_PI * fy * p.y / extent + 0.4 * phase);
  const int code = int(std::floor(s * double(n_levels)));
  return std::clamp(code, 0, int(n_levels) - 1);
}

Raster make_pattern_raster(double extent, double cell, double nodata,
                           const std::function<double(Point2)>& fn) {
  Raster r;
  r.cell = cell;
  // One cell of margin keeps boundary points strictly inside the extent.
  r.xll = -cell;
  r.yll = -cell;
  r.ncols = std::size_t(std::ceil(extent / cell)) + 2;
  r.nrows = std::size_t(std::ceil(extent / cell)) + 2;
  r.nodata = nodata;
  r.values.resize(r.ncols * r.nrows);
  for (std::size_t row = 0; row < r.nrows; ++row)
    for (std::size_t col = 0; col < r.ncols; ++col) {
      const double x = r.xll + (double(col) + 0.5) * cell;
      const double y = r.yll + (double(r.nrows - 1 - row) + 0.5) * cell;
      r.at(row, col) = fn({x, y});
    }
  return r;
}

Eigen::VectorXd true_beta(const CovariateLevels& levels, double base_log) {
  const double lith[] = {-0.19, 0.04, 0.08, 0.06, 0.04};
  const double tect[] = {-0.04, -0.03, 0.11,  -0.07, -0.13, 0.08,  -0.16, -0.04, 0.32,
                         -0.06, -0.15, -0.06, -0.04, -0.11, 0.43,  0.26,  -0.03, -0.05};
  const double lc[] = {0.035, -0.019, -0.038, -0.009, -0.13};
  const std::size_t n_lith = levels.lithology.size();
  const std::size_t n_tect = levels.tectonic.size() - 1;
  const std::size_t n_lc = levels.landcover.size() - 1;
  Eigen::VectorXd beta(Eigen::Index(n_lith + n_tect + n_lc + 1));
  for (std::size_t i = 0; i < n_lith; ++i) beta[Eigen::Index(i)] = base_log + lith[i];
  for (std::size_t i = 0; i < n_tect; ++i) beta[Eigen::Index(n_lith + i)] = tect[i];
  for (std::size_t i = 0; i < n_lc; ++i) beta[Eigen::Index(n_lith + n_tect + i)] = lc[i];
  beta[beta.size() - 1] = 5.1;
  return beta;
}

Eigen::VectorXd simulate_field(const TriMesh& mesh, double range, double sigma, RngStream& rng) {
  Eigen::SparseMatrix<double> q = spde_precision(assemble_fem(mesh), SpdeParams{range, sigma});
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> chol(q);
  if (chol.info() != Eigen::Success)
    throw std::runtime_error("make_fixture: field precision not positive definite");
  return sample_gmrf(chol, rng);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace

Fixture make_fixture(const FixtureConfig& config) {
  if (!(config.domain_size > 0.0) || !(config.spacing > 0.0) || !(config.raster_cell > 0.0))
    throw std::invalid_argument("make_fixture: sizes must be positive");
  if (config.margin * 2.0 >= config.domain_size)
    throw std::invalid_argument("make_fixture: margin leaves no interior");

  const double ext = config.domain_size;
  Fixture fx;
  fx.config = config;
  fx.domain = {{0.0, 0.0}, {ext, 0.0}, {ext, ext}, {0.0, ext}};
  fx.levels = default_levels();
  fx.beta = true_beta(fx.levels, config.base_log);

  RngStream root(config.seed);

  // Covariate rasters: blobby categories at distinct frequencies, rainfall as
  // a smooth south-west to north-east gradient in meters.
  const double cell = config.raster_cell;
  fx.rasters.lithology = make_pattern_raster(ext, cell, -9999.0, [&](Point2 p) {
    return double(pattern_code(p, ext, fx.levels.lithology.size(), 1.3, 0.9, 0.7));
  });
  fx.rasters.tectonic = make_pattern_raster(ext, cell, -9999.0, [&](Point2 p) {
    return double(pattern_code(p, ext, fx.levels.tectonic.size(), 0.8, 1.1, 2.3));
  });
  fx.rasters.landcover = make_pattern_raster(ext, cell, -9999.0, [&](Point2 p) {
    return double(pattern_code(p, ext, fx.levels.landcover.size(), 2.1, 1.7, 4.1));
  });
  fx.rasters.rainfall = make_pattern_raster(ext, cell, -9999.0, [&](Point2 p) {
    return 0.012 * (p.x + p.y) / (2.0 * ext);
  });

  // Simulation meshes extend past the domain so tracks see a stationary field.
  double edge_long = config.mesh_edge_long;
  if (edge_long <= 0.0) edge_long = std::min(config.range_long / 5.0, ext / 6.0);
  RngStream field_rng = root.derive("field-long");
  fx.mesh_long = build_mesh(fx.domain, edge_long, 1.4 * edge_long, 31.0,
                            std::min(config.range_long / 2.0, ext / 4.0), 11);
  fx.u_long = simulate_field(fx.mesh_long, config.range_long, config.sigma_long, field_rng);

  if (config.short_field) {
    double edge_short = config.mesh_edge_short;
    if (edge_short <= 0.0) edge_short = config.range_short / 2.5;
    RngStream short_rng = root.derive("field-short");
    fx.mesh_short = build_mesh(fx.domain, edge_short, 1.4 * edge_short, 31.0,
                               config.range_short, 13);
    fx.u_short = simulate_field(fx.mesh_short, config.range_short, config.sigma_short, short_rng);
  }

  // Horizontal tracks at random altitudes of y, alternating direction.
  RngStream track_rng = root.derive("tracks");
  RngStream noise_rng = root.derive("noise");
  const double lo = config.margin;
  const double hi = ext - config.margin;
  const std::size_t per_flight = std::size_t((hi - lo) / config.spacing) + 1;
  std::vector<Point2> pts;
  pts.reserve(config.n_flights * per_flight);
  for (std::size_t f = 0; f < config.n_flights; ++f) {
    const double y = track_rng.uniform(lo, hi);
    for (std::size_t i = 0; i < per_flight; ++i) {
      const double along = lo + double(i) * config.spacing;
      const double x = (f % 2 == 0) ? along : hi - double(i) * config.spacing;
      pts.push_back({x, y});
    }
  }

  JoinedCovariates join = join_covariates(pts, fx.rasters, fx.levels);
  if (join.n_invalid != 0) throw std::runtime_error("make_fixture: covariates left the extent");
  Eigen::VectorXd mean = join.design * fx.beta;
  {
    ProjectionMatrix proj = project_points(fx.mesh_long, pts);
    for (bool in : proj.inside)
      if (!in) throw std::runtime_error("make_fixture: track point outside the long-range mesh");
    mean += proj.A * fx.u_long;
  }
  if (config.short_field) {
    ProjectionMatrix proj = project_points(fx.mesh_short, pts);
    for (bool in : proj.inside)
      if (!in) throw std::runtime_error("make_fixture: track point outside the short-range mesh");
    mean += proj.A * fx.u_short;
  }

  fx.records.reserve(pts.size());
  char flight_name[16];
  for (std::size_t f = 0; f < config.n_flights; ++f) {
    std::snprintf(flight_name, sizeof(flight_name), "F%03zu", f + 1);
    for (std::size_t i = 0; i < per_flight; ++i) {
      const std::size_t at = f * per_flight + i;
      MeasurementRecord r;
      r.flight_id = flight_name;
      r.seq = long(i);
      r.x = pts[at].x;
      r.y = pts[at].y;
      r.log_dose = mean[Eigen::Index(at)] + config.noise_sd * noise_rng.normal();
      r.dose_nsvh = std::exp(r.log_dose);
      r.source_row = at + 1;
      fx.records.push_back(std::move(r));
    }
  }

  // Exclusion circles sit on sampled track points so cleaning always bites;
  // the lake spans a band of tracks near the north-east corner.
  RngStream excl_rng = root.derive("exclusion");
  for (std::size_t s = 0; s < config.n_sources; ++s) {
    const std::size_t at = excl_rng.uniform_index(fx.records.size());
    fx.exclusion.sources.push_back(
        {{fx.records[at].x, fx.records[at].y}, config.source_radius});
  }
  if (config.water) {
    const double w0 = 0.62 * ext, w1 = 0.80 * ext;
    fx.exclusion.water.push_back(
        {{w0, w0}, {w1, 0.66 * ext}, {0.86 * ext, w1}, {0.70 * ext, 0.84 * ext}});
  }
  return fx;
}

Eigen::VectorXd Fixture::true_log_mean(const std::vector<Point2>& points) const {
  JoinedCovariates join = join_covariates(points, rasters, levels);
  if (join.n_invalid != 0)
    throw std::invalid_argument("true_log_mean: point outside the raster extent");
  Eigen::VectorXd mean = join.design * beta;
  {
    ProjectionMatrix proj = project_points(mesh_long, points);
    for (bool in : proj.inside)
      if (!in) throw std::invalid_argument("true_log_mean: point outside the long-range mesh");
    mean += proj.A * u_long;
  }
  if (config.short_field) {
    ProjectionMatrix proj = project_points(mesh_short, points);
    for (bool in : proj.inside)
      if (!in) throw std::invalid_argument("true_log_mean: point outside the short-range mesh");
    mean += proj.A * u_short;
  }
  return mean;
}

void write_fixture(const std::string& dir, const Fixture& fixture) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  write_text((base / "measurements.csv").string(), measurements_to_csv(fixture.records));
  write_raster((base / "lithology.asc").string(), fixture.rasters.lithology);
  write_raster((base / "tectonic.asc").string(), fixture.rasters.tectonic);
  write_raster((base / "landcover.asc").string(), fixture.rasters.landcover);
  write_raster((base / "rainfall.asc").string(), fixture.rasters.rainfall);
  write_text((base / "exclusion.json").string(), exclusion_to_json(fixture.exclusion));

  nlohmann::json dom;
  dom["polygon"] = nlohmann::json::array();
  for (const Point2& p : fixture.domain) dom["polygon"].push_back({p.x, p.y});
  write_text((base / "domain.json").string(), dom.dump(2));
}

}  // namespace radmap
