#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "radmap/geometry.hpp"

namespace radmap {

// One airborne measurement. log_dose is derived at ingest; source_row is the
// 1-based data row in the originating file, kept for error reporting.
struct MeasurementRecord {
  std::string flight_id;
  long seq = 0;
  double x = 0.0;
  double y = 0.0;
  double dose_nsvh = 0.0;
  double log_dose = 0.0;
  std::string timestamp;  // empty when the file has no timestamp column
  std::size_t source_row = 0;
};

// Parses the measurement CSV (header: flight_id,seq,x,y,dose_nsvh[,timestamp]).
// Rejects nonpositive doses, duplicate (flight_id, seq) pairs, and malformed
// rows; the error message lists the first 20 offending rows by number.
std::vector<MeasurementRecord> parse_measurements(const std::string& text, int threads = 0);
std::vector<MeasurementRecord> ingest(const std::string& path, int threads = 0);
std::string measurements_to_csv(const std::vector<MeasurementRecord>& records);

struct ExclusionCircle {
  Point2 center;
  double radius = 0.0;  // m, > 0
};

struct ExclusionSpec {
  std::vector<ExclusionCircle> sources;
  std::vector<Polygon> water;
};

std::string exclusion_to_json(const ExclusionSpec& spec);
ExclusionSpec exclusion_from_json(const std::string& text);

struct CleanResult {
  std::vector<MeasurementRecord> records;
  std::size_t dropped_sources = 0;
  std::size_t dropped_water = 0;
};

// Drops records inside any exclusion circle or water polygon. A record
// matching both reasons counts once, under the first matching reason
// (sources checked before water).
CleanResult clean(const std::vector<MeasurementRecord>& records, const ExclusionSpec& spec);

// Per flight, ordered by seq, keeps ranks 0, k, 2k, ...; the per-flight first
// record always survives. Output preserves the input record order.
std::vector<MeasurementRecord> thin(const std::vector<MeasurementRecord>& records, std::size_t k);

// Row-major grid of doubles in the ESRI ASCII layout: values[0] is the
// northwest cell, rows run north to south.
struct Raster {
  std::size_t ncols = 0;
  std::size_t nrows = 0;
  double xll = 0.0;
  double yll = 0.0;
  double cell = 0.0;
  double nodata = -9999.0;
  std::vector<double> values;

  double& at(std::size_t row, std::size_t col) { return values[row * ncols + col]; }
  double at(std::size_t row, std::size_t col) const { return values[row * ncols + col]; }
  bool contains(double x, double y) const;
  // Value of the cell containing (x, y); nullopt outside the extent or on a
  // no-data cell.
  std::optional<double> sample(double x, double y) const;
};

Raster read_raster(const std::string& path);
void write_raster(const std::string& path, const Raster& raster);

// Category dictionaries for the design encoding. Lithology levels act as
// independent intercepts (every level gets a column); the first tectonic and
// land-cover level is the reference and gets none.
struct CovariateLevels {
  std::vector<std::string> lithology;
  std::vector<std::string> tectonic;
  std::vector<std::string> landcover;
};

// Swiss survey dictionaries: 5 lithology, 19 tectonic, 6 land-cover levels,
// giving the 5 + 18 + 5 + 1 = 29-column design.
CovariateLevels default_levels();

// Categorical rasters hold 0-based level codes; rainfall is cumulative meters.
struct CovariateRasters {
  Raster lithology;
  Raster tectonic;
  Raster landcover;
  Raster rainfall;
};

struct JoinedCovariates {
  Eigen::MatrixXd design;
  std::vector<std::string> names;
  std::vector<bool> valid;  // false: outside some raster extent or no-data
  std::size_t n_invalid = 0;
};

// One-hot encodes the sampled categories into design rows. Codes outside the
// dictionaries are a hard error; points outside the extent or on no-data
// cells are flagged invalid with their row zeroed.
JoinedCovariates join_covariates(const std::vector<Point2>& points,
                                 const CovariateRasters& rasters,
                                 const CovariateLevels& levels, int threads = 0);

struct DecodedRow {
  std::string lithology;
  std::string tectonic;
  std::string landcover;
  double rainfall_m = 0.0;
};

// Inverse of the one-hot encoding; rejects rows that are not a valid encoding.
DecodedRow decode_design_row(const Eigen::VectorXd& row, const CovariateLevels& levels);

// Axis-aligned prediction grid over the polygon's bounding box; cell centers
// outside the polygon are masked. Cell (ix, iy) has index iy * nx + ix and
// center (x0 + (ix + 0.5) cell, y0 + (iy + 0.5) cell).
struct GridSpec {
  double x0 = 0.0;
  double y0 = 0.0;
  double cell = 0.0;
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::vector<bool> inside;

  std::size_t size() const { return nx * ny; }
  Point2 center(std::size_t index) const;
  std::vector<Point2> inside_centers() const;
};

GridSpec build_grid(const Polygon& domain, double cell);

// Minimal RFC-4180 quoting for a single CSV field.
std::string csv_quote(const std::string& field);

}  // namespace radmap
