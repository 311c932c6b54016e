#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "radmap/fixture.hpp"

namespace radmap {

// Failure classes map to process exit codes: config 2, data 3, numerical 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mesh and prior settings for one latent field. Probabilities parameterize
// the penalized-complexity priors as P(range < prior_range) = prior_range_prob
// and P(sigma > prior_sigma) = prior_sigma_prob.
struct FieldConfig {
  double edge = 3500.0;      // m, minimal node distance
  double max_edge = 5000.0;  // 0: 1.4 * edge
  double quality_deg = 31.0;
  double extension = 0.0;  // m of coarsening band outside the domain
  double prior_range = 15000.0;
  double prior_range_prob = 0.5;
  double prior_sigma = 10.0;
  double prior_sigma_prob = 0.01;
};

struct FitKnobs {
  int grid_steps = 2;
  double grid_scale = 0.75;
  int nelder_mead_iters = 400;
  double init_noise_sd = 0.3;
};

struct CvConfig {
  std::string scheme = "blocks";  // random | blocks
  double train_fraction = 0.7;
  int folds = 4;
  double block_size = 0.0;  // m; 0: twice the 0.9 quantile of grid-to-record distances
  double exclusion_radius = 250.0;
};

struct VarioConfig {
  double bin_width = 1000.0;
  double max_lag = 60000.0;
  std::size_t subsample = 100000;
  long track_max_lag = 60;
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool seed_set = false;  // tracked by the parser; seed has no usable default
  int threads = 0;        // 0: hardware, capped at 8
  std::string variant = "mixed";  // linear | spatial | mixed | extended
  std::string output_dir = "run";

  std::string measurements;
  std::string raster_lithology;
  std::string raster_tectonic;
  std::string raster_landcover;
  std::string raster_rainfall;
  std::string exclusion;  // optional; empty skips cleaning against features
  std::string domain;     // polygon JSON; required for meshes and grids
  long thin_k = 15;

  FieldConfig field_long;
  FieldConfig field_short{500.0, 700.0, 31.0, 0.0, 2000.0, 0.98, 10.0, 0.01};

  FitKnobs fit;
  CvConfig cv;

  double grid_cell = 1000.0;
  std::string back_transform = "mean";  // mean | median of the lognormal
  int histogram_bins = 30;

  VarioConfig vario;
  FixtureConfig simulate;
};

// Key-value text format: one `key = value` per line, `#` comments, dotted
// keys as documented in the README. Unknown and duplicate keys are errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_text(const RunConfig& config);
void validate_run_config(const RunConfig& config);

void cmd_simulate(const RunConfig& config, std::ostream& out);
void cmd_fit(const RunConfig& config, std::ostream& out);
void cmd_cv(const RunConfig& config, std::ostream& out);
void cmd_predict(const RunConfig& config, const std::string& fit_path, std::ostream& out);
void cmd_variogram(const RunConfig& config, std::ostream& out);
void cmd_sensitivity(const RunConfig& config, std::ostream& out);

// Dispatches `radmap <subcommand> --config ...`; returns the process exit
// code (0 ok, 2 config, 3 data, 4 numerical failure).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace radmap
