#include "radmap/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>
#include <type_traits>
#include <variant>

#include "radmap/inference.hpp"
#include "radmap/validation.hpp"

namespace fs = std::filesystem;

namespace radmap {

namespace {

constexpr const char* kVersion = "1.0.0";
constexpr int kManifestFormat = 1;

std::string fmt(double v) { return nlohmann::json(v).dump(); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_checksum(const std::string& path) { return hex64(fnv1a64(read_text_file(path))); }

int effective_threads(const RunConfig& cfg) {
  if (cfg.threads > 0) return cfg.threads;
  return int(std::clamp(std::thread::hardware_concurrency(), 1u, 8u));
}

template <typename F>
auto data_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw DataError(std::string(name) + ": " + e.what());
  }
}

template <typename F>
auto numeric_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw NumericalError(std::string(name) + ": " + e.what());
  }
}

void require_file(const std::string& path, const char* key) {
  if (path.empty()) throw ConfigError(std::string(key) + " is required but not set");
  if (!fs::exists(path)) throw ConfigError(std::string(key) + ": file not found: " + path);
}

// ---------------------------------------------------------------------------
// Config format

// std::size_t and std::uint64_t are both unsigned long on this target, so a
// single alternative covers seed, counts, and subsample fields.
using Slot = std::variant<double*, long*, int*, unsigned long*, bool*, std::string*>;

struct Binding {
  const char* key;
  Slot slot;
};

std::vector<Binding> config_bindings(RunConfig& c) {
  return {
      {"seed", &c.seed},
      {"threads", &c.threads},
      {"variant", &c.variant},
      {"output_dir", &c.output_dir},
      {"data.measurements", &c.measurements},
      {"data.raster_lithology", &c.raster_lithology},
      {"data.raster_tectonic", &c.raster_tectonic},
      {"data.raster_landcover", &c.raster_landcover},
      {"data.raster_rainfall", &c.raster_rainfall},
      {"data.exclusion", &c.exclusion},
      {"data.domain", &c.domain},
      {"data.thin_k", &c.thin_k},
      {"field.long.edge", &c.field_long.edge},
      {"field.long.max_edge", &c.field_long.max_edge},
      {"field.long.quality", &c.field_long.quality_deg},
      {"field.long.extension", &c.field_long.extension},
      {"field.long.prior_range", &c.field_long.prior_range},
      {"field.long.prior_range_prob", &c.field_long.prior_range_prob},
      {"field.long.prior_sigma", &c.field_long.prior_sigma},
      {"field.long.prior_sigma_prob", &c.field_long.prior_sigma_prob},
      {"field.short.edge", &c.field_short.edge},
      {"field.short.max_edge", &c.field_short.max_edge},
      {"field.short.quality", &c.field_short.quality_deg},
      {"field.short.extension", &c.field_short.extension},
      {"field.short.prior_range", &c.field_short.prior_range},
      {"field.short.prior_range_prob", &c.field_short.prior_range_prob},
      {"field.short.prior_sigma", &c.field_short.prior_sigma},
      {"field.short.prior_sigma_prob", &c.field_short.prior_sigma_prob},
      {"fit.grid_steps", &c.fit.grid_steps},
      {"fit.grid_scale", &c.fit.grid_scale},
      {"fit.nelder_mead_iters", &c.fit.nelder_mead_iters},
      {"fit.init_noise_sd", &c.fit.init_noise_sd},
      {"cv.scheme", &c.cv.scheme},
      {"cv.train_fraction", &c.cv.train_fraction},
      {"cv.folds", &c.cv.folds},
      {"cv.block_size", &c.cv.block_size},
      {"cv.exclusion_radius", &c.cv.exclusion_radius},
      {"grid.cell", &c.grid_cell},
      {"predict.back_transform", &c.back_transform},
      {"predict.histogram_bins", &c.histogram_bins},
      {"vario.bin_width", &c.vario.bin_width},
      {"vario.max_lag", &c.vario.max_lag},
      {"vario.subsample", &c.vario.subsample},
      {"vario.track_max_lag", &c.vario.track_max_lag},
      {"simulate.domain_size", &c.simulate.domain_size},
      {"simulate.n_flights", &c.simulate.n_flights},
      {"simulate.spacing", &c.simulate.spacing},
      {"simulate.margin", &c.simulate.margin},
      {"simulate.base_log", &c.simulate.base_log},
      {"simulate.range_long", &c.simulate.range_long},
      {"simulate.sigma_long", &c.simulate.sigma_long},
      {"simulate.range_short", &c.simulate.range_short},
      {"simulate.sigma_short", &c.simulate.sigma_short},
      {"simulate.short_field", &c.simulate.short_field},
      {"simulate.noise_sd", &c.simulate.noise_sd},
      {"simulate.raster_cell", &c.simulate.raster_cell},
      {"simulate.n_sources", &c.simulate.n_sources},
      {"simulate.source_radius", &c.simulate.source_radius},
      {"simulate.water", &c.simulate.water},
      {"simulate.mesh_edge_long", &c.simulate.mesh_edge_long},
      {"simulate.mesh_edge_short", &c.simulate.mesh_edge_short},
  };
}

std::string strip(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  std::istringstream ss(raw);
  T v{};
  ss >> v;
  if (ss.fail() || !(ss >> std::ws).eof())
    throw ConfigError("config key '" + key + "': invalid number '" + raw + "'");
  return v;
}

void assign_value(const Binding& bind, const std::string& raw) {
  const std::string key = bind.key;
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) {
          *p = raw;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (raw == "true" || raw == "1")
            *p = true;
          else if (raw == "false" || raw == "0")
            *p = false;
          else
            throw ConfigError("config key '" + key + "': expected true or false, got '" + raw +
                              "'");
        } else {
          *p = parse_number<T>(key, raw);
        }
      },
      bind.slot);
}

std::string format_value(const Binding& bind) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>)
          return *p;
        else if constexpr (std::is_same_v<T, bool>)
          return *p ? "true" : "false";
        else if constexpr (std::is_same_v<T, double>)
          return fmt(*p);
        else
          return std::to_string(*p);
      },
      bind.slot);
}

std::size_t variant_fields(const std::string& variant) {
  if (variant == "linear") return 0;
  if (variant == "spatial" || variant == "mixed") return 1;
  if (variant == "extended") return 2;
  throw ConfigError("variant must be linear, spatial, mixed, or extended; got '" + variant + "'");
}

bool variant_uses_rasters(const std::string& variant) { return variant != "spatial"; }

void validate_field(const FieldConfig& f, const std::string& name) {
  auto bad = [&](const char* what) { throw ConfigError(name + ": " + what); };
  if (!(f.edge > 0.0)) bad("edge must be positive");
  if (f.max_edge < 0.0) bad("max_edge must be nonnegative");
  if (!(f.quality_deg > 0.0) || f.quality_deg >= 60.0) bad("quality must be in (0, 60) degrees");
  if (f.extension < 0.0) bad("extension must be nonnegative");
  if (!(f.prior_range > 0.0) || !(f.prior_sigma > 0.0)) bad("prior scales must be positive");
  if (!(f.prior_range_prob > 0.0) || !(f.prior_range_prob < 1.0) || !(f.prior_sigma_prob > 0.0) ||
      !(f.prior_sigma_prob < 1.0))
    bad("prior probabilities must be in (0, 1)");
}

// ---------------------------------------------------------------------------
// Shared pipeline stages

struct RecordSet {
  std::vector<MeasurementRecord> records;
  std::size_t n_ingested = 0;
  std::size_t dropped_sources = 0;
  std::size_t dropped_water = 0;
  std::size_t n_cleaned = 0;
  std::size_t n_thinned = 0;
};

RecordSet prepare_records(const RunConfig& cfg, long k) {
  RecordSet rs;
  const int threads = effective_threads(cfg);
  std::vector<MeasurementRecord> records =
      data_stage("ingest", [&] { return ingest(cfg.measurements, threads); });
  rs.n_ingested = records.size();
  if (!cfg.exclusion.empty()) {
    const ExclusionSpec spec =
        data_stage("exclusion", [&] { return exclusion_from_json(read_text_file(cfg.exclusion)); });
    CleanResult cr = data_stage("clean", [&] { return clean(records, spec); });
    records = std::move(cr.records);
    rs.dropped_sources = cr.dropped_sources;
    rs.dropped_water = cr.dropped_water;
  }
  rs.n_cleaned = records.size();
  records = data_stage("thin", [&] { return thin(records, std::size_t(k)); });
  rs.n_thinned = records.size();
  rs.records = std::move(records);
  return rs;
}

std::vector<Point2> record_points(const std::vector<MeasurementRecord>& records) {
  std::vector<Point2> pts;
  pts.reserve(records.size());
  for (const MeasurementRecord& r : records) pts.push_back({r.x, r.y});
  return pts;
}

// Indicator columns for levels absent from the training rows are all zero, and
// a one-hot block whose reference level is absent sums to one and duplicates
// another block's sum. Both break the rank check, so the design is reduced to
// a full-rank column subset per training set (pivoted QR keeps the leading
// pivots, reported in original order) and reselected by name at prediction
// time. Points whose level column was dropped fall back to that block's
// implicit reference.
struct DesignView {
  Eigen::MatrixXd design;
  std::vector<std::string> names;
};

DesignView full_rank_design(const Eigen::MatrixXd& design,
                            const std::vector<std::string>& names) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < design.cols(); ++j)
    if (design.col(j).cwiseAbs().sum() > 0.0) keep.push_back(j);
  if (!keep.empty()) {
    Eigen::MatrixXd nonzero(design.rows(), Eigen::Index(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j)
      nonzero.col(Eigen::Index(j)) = design.col(keep[j]);
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(nonzero);
    const Eigen::Index rank = qr.rank();
    const auto& perm = qr.colsPermutation().indices();
    std::vector<Eigen::Index> pivots;
    for (Eigen::Index j = 0; j < rank; ++j) pivots.push_back(keep[std::size_t(perm[j])]);
    std::sort(pivots.begin(), pivots.end());
    keep = std::move(pivots);
  }
  DesignView dv;
  dv.design.resize(design.rows(), Eigen::Index(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) {
    dv.design.col(Eigen::Index(j)) = design.col(keep[j]);
    dv.names.push_back(names[std::size_t(keep[j])]);
  }
  return dv;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& design,
                               const std::vector<std::string>& have,
                               const std::vector<std::string>& want) {
  Eigen::MatrixXd out(design.rows(), Eigen::Index(want.size()));
  for (std::size_t j = 0; j < want.size(); ++j) {
    const auto it = std::find(have.begin(), have.end(), want[j]);
    if (it == have.end())
      throw DataError("fit artifact: design column '" + want[j] +
                      "' is not produced by the configured pipeline");
    out.col(Eigen::Index(j)) = design.col(Eigen::Index(it - have.begin()));
  }
  return out;
}

struct PreparedData {
  RecordSet rs;
  std::vector<Point2> points;
  Eigen::VectorXd values;
  Eigen::MatrixXd design;
  std::vector<std::string> names;
  std::size_t n_dropped_invalid = 0;
};

CovariateRasters load_rasters(const RunConfig& cfg) {
  return data_stage("rasters", [&] {
    CovariateRasters r;
    r.lithology = read_raster(cfg.raster_lithology);
    r.tectonic = read_raster(cfg.raster_tectonic);
    r.landcover = read_raster(cfg.raster_landcover);
    r.rainfall = read_raster(cfg.raster_rainfall);
    return r;
  });
}

PreparedData prepare_data(const RunConfig& cfg, long k) {
  PreparedData data;
  data.rs = prepare_records(cfg, k);
  std::vector<Point2> pts = record_points(data.rs.records);

  if (variant_uses_rasters(cfg.variant)) {
    const CovariateRasters rasters = load_rasters(cfg);
    const JoinedCovariates joined = data_stage("covariates", [&] {
      return join_covariates(pts, rasters, default_levels(), effective_threads(cfg));
    });
    data.n_dropped_invalid = joined.n_invalid;
    data.names = joined.names;
    const std::size_t kept = pts.size() - joined.n_invalid;
    data.points.reserve(kept);
    data.values.resize(Eigen::Index(kept));
    data.design.resize(Eigen::Index(kept), joined.design.cols());
    std::vector<MeasurementRecord> kept_records;
    kept_records.reserve(kept);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (!joined.valid[i]) continue;
      data.points.push_back(pts[i]);
      data.values[at] = data.rs.records[i].log_dose;
      data.design.row(at) = joined.design.row(Eigen::Index(i));
      kept_records.push_back(data.rs.records[i]);
      ++at;
    }
    data.rs.records = std::move(kept_records);
  } else {
    data.points = std::move(pts);
    data.values.resize(Eigen::Index(data.points.size()));
    for (std::size_t i = 0; i < data.rs.records.size(); ++i)
      data.values[Eigen::Index(i)] = data.rs.records[i].log_dose;
    data.design = Eigen::MatrixXd::Ones(Eigen::Index(data.points.size()), 1);
    data.names = {"intercept"};
  }
  return data;
}

Polygon load_domain(const std::string& path) {
  return data_stage("domain", [&] {
    const nlohmann::json j = nlohmann::json::parse(read_text_file(path));
    Polygon poly;
    for (const auto& v : j.at("polygon")) poly.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    return poly;
  });
}

const FieldConfig& field_config(const RunConfig& cfg, std::size_t i) {
  return i == 0 ? cfg.field_long : cfg.field_short;
}

std::vector<TriMesh> build_meshes(const RunConfig& cfg, const Polygon& domain, double edge_scale) {
  const std::size_t n_fields = variant_fields(cfg.variant);
  std::vector<TriMesh> meshes;
  for (std::size_t i = 0; i < n_fields; ++i) {
    const FieldConfig& fc = field_config(cfg, i);
    const char* stage = i == 0 ? "mesh-long" : "mesh-short";
    const double edge = fc.edge * edge_scale;
    const double max_edge = (fc.max_edge > 0.0 ? fc.max_edge : 1.4 * fc.edge) * edge_scale;
    const std::uint64_t seed = splitmix64(cfg.seed ^ fnv1a64(stage));
    meshes.push_back(numeric_stage(stage, [&] {
      return build_mesh(domain, edge, max_edge, fc.quality_deg, fc.extension, seed);
    }));
  }
  return meshes;
}

ModelSpec make_spec(const RunConfig& cfg, const std::vector<TriMesh>& meshes,
                    const std::vector<Point2>& points, const Eigen::VectorXd& values,
                    const Eigen::MatrixXd& design) {
  ModelSpec spec;
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    const FieldConfig& fc = field_config(cfg, i);
    FieldModel fm;
    fm.fem = assemble_fem(meshes[i]);
    fm.basis = project_points(meshes[i], points, true).A;
    fm.range_prior = pc_range_prior(fc.prior_range, fc.prior_range_prob);
    fm.sigma_prior = pc_sigma_prior(fc.prior_sigma, fc.prior_sigma_prob);
    spec.fields.push_back(std::move(fm));
  }
  spec.design = design;
  spec.values = values;
  return spec;
}

FitConfig make_fit_config(const RunConfig& cfg, const ModelSpec& spec) {
  FitConfig fc;
  fc.init.noise_sd = cfg.fit.init_noise_sd;
  for (const FieldModel& f : spec.fields)
    fc.init.fields.push_back({quantile(f.range_prior, 0.5), quantile(f.sigma_prior, 0.5)});
  fc.grid_steps = cfg.fit.grid_steps;
  fc.grid_scale = cfg.fit.grid_scale;
  fc.nelder_mead_iters = cfg.fit.nelder_mead_iters;
  fc.threads = effective_threads(cfg);
  return fc;
}

ModelFit run_fit(const ModelSpec& spec, const FitConfig& fc) {
  try {
    return fit_model(spec, fc);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("fit: ") + e.what());
  } catch (const std::exception& e) {
    throw NumericalError(std::string("fit: ") + e.what());
  }
}

double back_transformed(const RunConfig& cfg, double mu, double sd) {
  return cfg.back_transform == "median" ? lognormal_median(mu) : lognormal_mean(mu, sd * sd);
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const Eigen::ArrayXd da = a.array() - ma, db = b.array() - mb;
  const double denom = std::sqrt(da.square().sum() * db.square().sum());
  if (denom == 0.0) return 0.0;
  return (da * db).sum() / denom;
}

// ---------------------------------------------------------------------------
// Reports and manifest

struct HyperSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
};

std::vector<HyperSummary> hyper_summaries(const ModelFit& fit, std::size_t n_fields) {
  auto moments = [&](const std::function<double(const Hyperparameters&)>& f) {
    double m = 0.0, m2 = 0.0;
    for (const GridPoint& g : fit.grid) {
      const double v = f(g.theta);
      m += g.weight * v;
      m2 += g.weight * v * v;
    }
    return HyperSummary{"", m, std::sqrt(std::max(m2 - m * m, 0.0))};
  };
  std::vector<HyperSummary> out;
  HyperSummary prec =
      moments([](const Hyperparameters& t) { return 1.0 / (t.noise_sd * t.noise_sd); });
  prec.name = "noise precision";
  out.push_back(prec);
  const char* label[2] = {"long", "short"};
  for (std::size_t i = 0; i < n_fields; ++i) {
    HyperSummary range =
        moments([i](const Hyperparameters& t) { return t.fields[i].range / 1000.0; });
    range.name = n_fields == 1 ? "range (km)" : "range " + std::string(label[i]) + " (km)";
    out.push_back(range);
    HyperSummary sd = moments([i](const Hyperparameters& t) { return t.fields[i].sigma; });
    sd.name = n_fields == 1 ? "field sd" : "sd " + std::string(label[i]);
    out.push_back(sd);
  }
  return out;
}

std::string make_fit_report(const RunConfig& cfg, const PreparedData& data, const ModelFit& fit) {
  const std::size_t n_fields = variant_fields(cfg.variant);
  char line[160];
  std::ostringstream out;
  out << "radmap fit report\n";
  out << "model variant: " << cfg.variant << "\n";
  std::snprintf(line, sizeof line,
                "observations: %zu (ingested %zu, after cleaning %zu, after thinning %zu, "
                "dropped %zu without covariates)\n",
                data.points.size(), data.rs.n_ingested, data.rs.n_cleaned, data.rs.n_thinned,
                data.n_dropped_invalid);
  out << line;
  if (fit.design_names.size() < data.names.size()) {
    std::snprintf(line, sizeof line,
                  "note: %zu fixed-effect columns dropped (absent or redundant levels)\n",
                  data.names.size() - fit.design_names.size());
    out << line;
  }
  if (fit.curvature_fallback)
    out << "note: curvature fallback used for the hyperparameter grid\n";

  out << "\nposterior hyperparameters (integration-grid mean and sd)\n";
  for (const HyperSummary& h : hyper_summaries(fit, n_fields)) {
    std::snprintf(line, sizeof line, "  %-34s %12.4f %11.4f\n", h.name.c_str(), h.mean, h.sd);
    out << line;
  }

  out << "\nfixed effects, log scale (posterior mean (sd))\n";
  const CovariateLevels levels = default_levels();
  std::string section;
  for (std::size_t j = 0; j < fit.design_names.size(); ++j) {
    const std::string& name = fit.design_names[j];
    const std::size_t colon = name.find(':');
    std::string group = colon == std::string::npos ? "other" : name.substr(0, colon);
    if (group != section) {
      section = group;
      out << section;
      if (section == "tectonic") out << " (reference: " << levels.tectonic[0] << ")";
      if (section == "landcover") out << " (reference: " << levels.landcover[0] << ")";
      out << "\n";
    }
    const std::string level = colon == std::string::npos ? name : name.substr(colon + 1);
    std::snprintf(line, sizeof line, "  %-44s %10.4f (%.4f)\n", level.c_str(), fit.beta_mean[j],
                  fit.beta_sd[j]);
    out << line;
  }
  return out.str();
}

void write_manifest(const RunConfig& cfg, const std::string& command,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["format_version"] = kManifestFormat;
  j["seed"] = cfg.seed;
  j["versions"]["radmap"] = kVersion;
  j["versions"]["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." +
                           std::to_string(EIGEN_MAJOR_VERSION) + "." +
                           std::to_string(EIGEN_MINOR_VERSION);
  j["inputs"] = nlohmann::json::object();
  for (const auto& [label, path] : inputs) {
    j["inputs"][label]["path"] = path;
    j["inputs"][label]["fnv1a64"] = file_checksum(path);
  }
  j["outputs"] = nlohmann::json::object();
  for (const std::string& name : outputs)
    j["outputs"][name] = file_checksum((fs::path(cfg.output_dir) / name).string());
  write_text_file((fs::path(cfg.output_dir) / "manifest.json").string(), j.dump(2) + "\n");
}

std::vector<std::pair<std::string, std::string>> data_inputs(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> in;
  in.push_back({"measurements", cfg.measurements});
  if (variant_uses_rasters(cfg.variant)) {
    in.push_back({"raster_lithology", cfg.raster_lithology});
    in.push_back({"raster_tectonic", cfg.raster_tectonic});
    in.push_back({"raster_landcover", cfg.raster_landcover});
    in.push_back({"raster_rainfall", cfg.raster_rainfall});
  }
  if (!cfg.exclusion.empty()) in.push_back({"exclusion", cfg.exclusion});
  if (!cfg.domain.empty()) in.push_back({"domain", cfg.domain});
  return in;
}

// Writes effective_config.txt plus the provided files, then the manifest.
void write_run_outputs(const RunConfig& cfg, const std::string& command,
                       const std::vector<std::pair<std::string, std::string>>& inputs,
                       const std::vector<std::pair<std::string, std::string>>& files) {
  fs::create_directories(cfg.output_dir);
  std::vector<std::string> names{"effective_config.txt"};
  write_text_file((fs::path(cfg.output_dir) / "effective_config.txt").string(),
                  run_config_to_text(cfg));
  for (const auto& [name, content] : files) {
    write_text_file((fs::path(cfg.output_dir) / name).string(), content);
    names.push_back(name);
  }
  write_manifest(cfg, command, inputs, names);
}

void check_data_files(const RunConfig& cfg, bool need_domain) {
  require_file(cfg.measurements, "data.measurements");
  if (variant_uses_rasters(cfg.variant)) {
    require_file(cfg.raster_lithology, "data.raster_lithology");
    require_file(cfg.raster_tectonic, "data.raster_tectonic");
    require_file(cfg.raster_landcover, "data.raster_landcover");
    require_file(cfg.raster_rainfall, "data.raster_rainfall");
  }
  if (!cfg.exclusion.empty()) require_file(cfg.exclusion, "data.exclusion");
  if (need_domain) require_file(cfg.domain, "data.domain");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config API

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::vector<Binding> binds = config_bindings(cfg);
  std::vector<bool> seen(binds.size(), false);
  std::istringstream in(text);
  std::string raw_line;
  std::size_t line_no = 0;
  while (std::getline(in, raw_line)) {
    ++line_no;
    std::string line = raw_line;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = strip(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    bool matched = false;
    for (std::size_t i = 0; i < binds.size(); ++i) {
      if (key != binds[i].key) continue;
      if (seen[i]) throw ConfigError("duplicate config key '" + key + "'");
      seen[i] = true;
      assign_value(binds[i], value);
      if (key == "seed") cfg.seed_set = true;
      matched = true;
      break;
    }
    if (!matched) throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  RunConfig cfg = parse_run_config(read_text_file(path));
  validate_run_config(cfg);
  return cfg;
}

std::string run_config_to_text(const RunConfig& config) {
  RunConfig copy = config;
  std::ostringstream out;
  out << "# radmap run configuration (effective values)\n";
  for (const Binding& b : config_bindings(copy)) out << b.key << " = " << format_value(b) << "\n";
  return out.str();
}

void validate_run_config(const RunConfig& config) {
  auto bad = [](const std::string& msg) { throw ConfigError(msg); };
  if (!config.seed_set) bad("seed is required");
  variant_fields(config.variant);
  if (config.threads < 0) bad("threads must be nonnegative");
  if (config.output_dir.empty()) bad("output_dir is required");
  if (config.thin_k < 1) bad("data.thin_k must be >= 1");
  validate_field(config.field_long, "field.long");
  validate_field(config.field_short, "field.short");
  if (config.fit.grid_steps < 0) bad("fit.grid_steps must be nonnegative");
  if (!(config.fit.grid_scale > 0.0)) bad("fit.grid_scale must be positive");
  if (config.fit.nelder_mead_iters < 1) bad("fit.nelder_mead_iters must be >= 1");
  if (!(config.fit.init_noise_sd > 0.0)) bad("fit.init_noise_sd must be positive");
  if (config.cv.scheme != "random" && config.cv.scheme != "blocks")
    bad("cv.scheme must be random or blocks");
  if (!(config.cv.train_fraction > 0.0) || !(config.cv.train_fraction < 1.0))
    bad("cv.train_fraction must be in (0, 1)");
  if (config.cv.folds < 2) bad("cv.folds must be >= 2");
  if (config.cv.block_size < 0.0) bad("cv.block_size must be nonnegative");
  if (config.cv.exclusion_radius < 0.0) bad("cv.exclusion_radius must be nonnegative");
  if (!(config.grid_cell > 0.0)) bad("grid.cell must be positive");
  if (config.back_transform != "mean" && config.back_transform != "median")
    bad("predict.back_transform must be mean or median");
  if (config.histogram_bins < 1) bad("predict.histogram_bins must be >= 1");
  if (!(config.vario.bin_width > 0.0)) bad("vario.bin_width must be positive");
  if (!(config.vario.max_lag > 0.0)) bad("vario.max_lag must be positive");
  if (config.vario.subsample < 2) bad("vario.subsample must be >= 2");
  if (config.vario.track_max_lag < 1) bad("vario.track_max_lag must be >= 1");
}

// ---------------------------------------------------------------------------
// Commands

void cmd_simulate(const RunConfig& config, std::ostream& out) {
  FixtureConfig fc = config.simulate;
  fc.seed = config.seed;
  Fixture fixture;
  try {
    fixture = make_fixture(fc);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("simulate: ") + e.what());
  } catch (const std::exception& e) {
    throw NumericalError(std::string("simulate: ") + e.what());
  }
  fs::create_directories(config.output_dir);
  write_fixture(config.output_dir, fixture);
  write_text_file((fs::path(config.output_dir) / "effective_config.txt").string(),
                  run_config_to_text(config));
  write_manifest(config, "simulate", {},
                 {"effective_config.txt", "measurements.csv", "lithology.asc", "tectonic.asc",
                  "landcover.asc", "rainfall.asc", "exclusion.json", "domain.json"});
  out << "simulated " << fixture.records.size() << " records on " << fc.n_flights
      << " flights into " << config.output_dir << "\n";
}

void cmd_fit(const RunConfig& config, std::ostream& out) {
  const std::size_t n_fields = variant_fields(config.variant);
  check_data_files(config, n_fields > 0);
  const PreparedData data = prepare_data(config, config.thin_k);
  std::vector<TriMesh> meshes;
  if (n_fields > 0) meshes = build_meshes(config, load_domain(config.domain), 1.0);
  const DesignView dv = full_rank_design(data.design, data.names);
  const ModelSpec spec = make_spec(config, meshes, data.points, data.values, dv.design);
  ModelFit fit = run_fit(spec, make_fit_config(config, spec));
  fit.design_names = dv.names;

  const std::string report = make_fit_report(config, data, fit);
  write_run_outputs(config, "fit", data_inputs(config),
                    {{"fit.json", fit_to_json(fit)}, {"fit_report.txt", report}});
  out << report;
}

void cmd_cv(const RunConfig& config, std::ostream& out) {
  const std::size_t n_fields = variant_fields(config.variant);
  const bool derive_blocks = config.cv.scheme == "blocks" && config.cv.block_size <= 0.0;
  check_data_files(config, n_fields > 0 || derive_blocks);
  const PreparedData data = prepare_data(config, config.thin_k);
  Polygon domain;
  if (n_fields > 0 || derive_blocks) domain = load_domain(config.domain);
  const std::vector<TriMesh> meshes = build_meshes(config, domain, 1.0);

  FoldScheme scheme;
  if (config.cv.scheme == "random") {
    scheme = RandomScheme{config.cv.train_fraction};
  } else {
    double size = config.cv.block_size;
    if (size <= 0.0) {
      const GridSpec grid = data_stage("grid", [&] { return build_grid(domain, config.grid_cell); });
      size = data_stage("block size", [&] {
        return block_size_from_distances(grid.inside_centers(), data.points,
                                         config.cv.exclusion_radius, 0.9);
      });
      out << "derived block size: " << fmt(size) << " m\n";
    }
    scheme = BlockScheme{size, config.cv.folds};
  }
  const FoldAssignment fa = data_stage("folds", [&] {
    return assign_folds(data.points, scheme, RngStream(config.seed).derive("folds"));
  });

  std::vector<FoldScore> folds;
  for (const int f : fa.eval_folds) {
    FoldScore fold;
    fold.fold = f;
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < data.points.size(); ++i)
      (fa.fold[i] == f ? test_idx : train_idx).push_back(i);
    fold.n_train = train_idx.size();
    fold.n_test = test_idx.size();
    try {
      auto gather_points = [&](const std::vector<std::size_t>& idx) {
        std::vector<Point2> pts;
        pts.reserve(idx.size());
        for (const std::size_t i : idx) pts.push_back(data.points[i]);
        return pts;
      };
      const std::vector<Point2> train_pts = gather_points(train_idx);
      const std::vector<Point2> test_pts = gather_points(test_idx);
      Eigen::VectorXd train_vals(Eigen::Index(train_idx.size()));
      Eigen::MatrixXd train_design(Eigen::Index(train_idx.size()), data.design.cols());
      for (std::size_t i = 0; i < train_idx.size(); ++i) {
        train_vals[Eigen::Index(i)] = data.values[Eigen::Index(train_idx[i])];
        train_design.row(Eigen::Index(i)) = data.design.row(Eigen::Index(train_idx[i]));
      }
      Eigen::VectorXd obs_log(Eigen::Index(test_idx.size()));
      Eigen::MatrixXd test_design(Eigen::Index(test_idx.size()), data.design.cols());
      Eigen::VectorXd obs_dose(Eigen::Index(test_idx.size()));
      for (std::size_t i = 0; i < test_idx.size(); ++i) {
        obs_log[Eigen::Index(i)] = data.values[Eigen::Index(test_idx[i])];
        test_design.row(Eigen::Index(i)) = data.design.row(Eigen::Index(test_idx[i]));
        obs_dose[Eigen::Index(i)] = data.rs.records[test_idx[i]].dose_nsvh;
      }

      const DesignView dv = full_rank_design(train_design, data.names);
      const ModelSpec spec = make_spec(config, meshes, train_pts, train_vals, dv.design);
      const ModelFit fit = run_fit(spec, make_fit_config(config, spec));
      std::vector<Eigen::SparseMatrix<double>> test_bases;
      for (std::size_t i = 0; i < meshes.size(); ++i)
        test_bases.push_back(project_points(meshes[i], test_pts, true).A);
      const PredictionSummary pred =
          predict_mixture(spec, fit, test_bases, select_columns(test_design, data.names, dv.names),
                          true, 256, effective_threads(config));
      Eigen::VectorXd pred_dose(pred.mean.size());
      for (Eigen::Index i = 0; i < pred.mean.size(); ++i)
        pred_dose[i] = back_transformed(config, pred.mean[i], pred.sd[i]);
      fold.scores = score(pred.mean, pred.sd, obs_log, pred_dose, obs_dose);
      fold.ok = true;
    } catch (const std::exception& e) {
      fold.ok = false;
      fold.error = e.what();
    }
    if (fold.ok)
      out << "fold " << f << ": rmse " << fmt(fold.scores.rmse) << " r2 " << fmt(fold.scores.r2)
          << " crps " << fmt(fold.scores.crps) << "\n";
    else
      out << "fold " << f << ": failed: " << fold.error << "\n";
    folds.push_back(std::move(fold));
  }

  const CvReport report = aggregate_cv(folds);
  write_run_outputs(config, "cv", data_inputs(config), {{"cv_report.csv", cv_report_to_csv(report)}});
  out << "aggregate: rmse " << fmt(report.aggregate.rmse) << " r2 " << fmt(report.aggregate.r2)
      << " crps " << fmt(report.aggregate.crps) << (report.partial ? " (partial)" : "") << "\n";
}

void cmd_predict(const RunConfig& config, const std::string& fit_path, std::ostream& out) {
  check_data_files(config, true);
  require_file(fit_path, "--fit");
  const ModelFit fit =
      data_stage("fit artifact", [&] { return fit_from_json(read_text_file(fit_path)); });

  const PreparedData data = prepare_data(config, config.thin_k);
  const std::uint64_t checksum =
      fnv1a64(std::string_view(reinterpret_cast<const char*>(data.values.data()),
                               std::size_t(data.values.size()) * sizeof(double)));
  if (checksum != fit.data_checksum)
    throw DataError("fit artifact: training data differ from the configured pipeline");

  const Polygon domain = load_domain(config.domain);
  const std::vector<TriMesh> meshes = build_meshes(config, domain, 1.0);
  const ModelSpec spec = make_spec(config, meshes, data.points, data.values,
                                   select_columns(data.design, data.names, fit.design_names));

  const GridSpec grid = data_stage("grid", [&] { return build_grid(domain, config.grid_cell); });
  const std::vector<Point2> centers = grid.inside_centers();
  if (centers.empty()) throw DataError("grid: no cells inside the domain");

  Eigen::MatrixXd center_full;
  std::vector<std::string> center_names;
  if (variant_uses_rasters(config.variant)) {
    const CovariateRasters rasters = load_rasters(config);
    JoinedCovariates joined = data_stage("covariates", [&] {
      return join_covariates(centers, rasters, default_levels(), effective_threads(config));
    });
    center_full = std::move(joined.design);
    center_names = std::move(joined.names);
  } else {
    center_full = Eigen::MatrixXd::Ones(Eigen::Index(centers.size()), 1);
    center_names = {"intercept"};
  }
  const Eigen::MatrixXd center_design = select_columns(center_full, center_names, fit.design_names);
  std::vector<Eigen::SparseMatrix<double>> center_bases;
  for (std::size_t i = 0; i < meshes.size(); ++i)
    center_bases.push_back(project_points(meshes[i], centers, true).A);

  const PredictionSummary pred = numeric_stage("predict", [&] {
    return predict_mixture(spec, fit, center_bases, center_design, false, 256,
                           effective_threads(config));
  });

  std::ostringstream csv;
  csv << "x,y,mean_log,sd_log,dose_nsvh\n";
  nlohmann::json features = nlohmann::json::array();
  Eigen::VectorXd dose(pred.mean.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const Eigen::Index e = Eigen::Index(i);
    dose[e] = back_transformed(config, pred.mean[e], pred.sd[e]);
    csv << fmt(centers[i].x) << "," << fmt(centers[i].y) << "," << fmt(pred.mean[e]) << ","
        << fmt(pred.sd[e]) << "," << fmt(dose[e]) << "\n";
    nlohmann::json f;
    f["type"] = "Feature";
    f["geometry"]["type"] = "Point";
    f["geometry"]["coordinates"] = {centers[i].x, centers[i].y};
    f["properties"]["mean_log"] = pred.mean[e];
    f["properties"]["sd_log"] = pred.sd[e];
    f["properties"]["dose_nsvh"] = dose[e];
    features.push_back(std::move(f));
  }
  nlohmann::json geo;
  geo["type"] = "FeatureCollection";
  geo["features"] = std::move(features);

  // Equal-area cells: every grid cell weighs the same, so bin mass is a
  // cell-count fraction.
  const int nb = config.histogram_bins;
  const double lo = dose.minCoeff(), hi = dose.maxCoeff();
  std::vector<std::size_t> counts(std::size_t(nb), 0);
  if (hi > lo) {
    const double width = (hi - lo) / double(nb);
    for (Eigen::Index i = 0; i < dose.size(); ++i)
      ++counts[std::min(std::size_t(nb) - 1, std::size_t((dose[i] - lo) / width))];
  } else {
    counts[0] = std::size_t(dose.size());
  }
  std::ostringstream hist;
  hist << "dose_lo,dose_hi,mass\n";
  for (int b = 0; b < nb; ++b) {
    const double w = hi > lo ? (hi - lo) / double(nb) : 1.0;
    hist << fmt(lo + b * w) << "," << fmt(lo + (b + 1) * w) << ","
         << fmt(double(counts[std::size_t(b)]) / double(dose.size())) << "\n";
  }

  std::vector<std::pair<std::string, std::string>> inputs = data_inputs(config);
  inputs.push_back({"fit", fit_path});
  write_run_outputs(config, "predict", inputs,
                    {{"grid.csv", csv.str()},
                     {"grid.geojson", geo.dump(2) + "\n"},
                     {"histogram.csv", hist.str()}});
  out << "predicted " << centers.size() << " cells; dose range [" << fmt(lo) << ", " << fmt(hi)
      << "] nSv/h\n";
}

void cmd_variogram(const RunConfig& config, std::ostream& out) {
  require_file(config.measurements, "data.measurements");
  if (!config.exclusion.empty()) require_file(config.exclusion, "data.exclusion");
  // Variograms diagnose correlation on the cleaned but unthinned records; the
  // track estimate at small lags is what motivates the thinning interval.
  const RecordSet rs = prepare_records(config, 1);
  const std::vector<Point2> pts = record_points(rs.records);
  Eigen::VectorXd vals(Eigen::Index(rs.records.size()));
  for (std::size_t i = 0; i < rs.records.size(); ++i)
    vals[Eigen::Index(i)] = rs.records[i].log_dose;

  VariogramConfig vc;
  vc.bin_width = config.vario.bin_width;
  vc.max_lag = config.vario.max_lag;
  vc.subsample = config.vario.subsample;
  const VariogramEstimate spatial = data_stage("variogram", [&] {
    return empirical_variogram(pts, vals, vc, RngStream(config.seed).derive("variogram"),
                               effective_threads(config));
  });
  const VariogramEstimate track =
      data_stage("track variogram", [&] { return track_variogram(rs.records, config.vario.track_max_lag); });

  std::vector<std::pair<std::string, std::string>> inputs{{"measurements", config.measurements}};
  if (!config.exclusion.empty()) inputs.push_back({"exclusion", config.exclusion});
  write_run_outputs(config, "variogram", inputs,
                    {{"variogram_spatial.csv", variogram_to_csv(spatial)},
                     {"variogram_track.csv", variogram_to_csv(track)}});
  out << "spatial bins: " << spatial.bins.size() << ", track bins: " << track.bins.size() << "\n";
}

void cmd_sensitivity(const RunConfig& config, std::ostream& out) {
  const std::size_t n_fields = variant_fields(config.variant);
  check_data_files(config, true);
  const Polygon domain = load_domain(config.domain);
  const GridSpec grid = data_stage("grid", [&] { return build_grid(domain, config.grid_cell); });
  const std::vector<Point2> centers = grid.inside_centers();
  if (centers.empty()) throw DataError("grid: no cells inside the domain");

  Eigen::MatrixXd center_full;
  std::vector<std::string> center_names;
  if (variant_uses_rasters(config.variant)) {
    const CovariateRasters rasters = load_rasters(config);
    JoinedCovariates joined = data_stage("covariates", [&] {
      return join_covariates(centers, rasters, default_levels(), effective_threads(config));
    });
    center_full = std::move(joined.design);
    center_names = std::move(joined.names);
  } else {
    center_full = Eigen::MatrixXd::Ones(Eigen::Index(centers.size()), 1);
    center_names = {"intercept"};
  }

  struct VariantRun {
    std::string name;
    long k;
    double edge_scale;
  };
  const std::vector<VariantRun> runs{{"base", config.thin_k, 1.0},
                                     {"rerun", config.thin_k, 1.0},
                                     {"thin10", 10, 1.0},
                                     {"thin20", 20, 1.0},
                                     {"denser", config.thin_k, 1.0 / 1.5},
                                     {"coarser", config.thin_k, 1.5}};
  struct VariantResult {
    bool ok = false;
    std::string error;
    Eigen::VectorXd mean;
    std::vector<HyperSummary> hyper;
  };
  std::vector<VariantResult> results;
  for (const VariantRun& run : runs) {
    VariantResult res;
    try {
      const PreparedData data = prepare_data(config, run.k);
      const std::vector<TriMesh> meshes = build_meshes(config, domain, run.edge_scale);
      const DesignView dv = full_rank_design(data.design, data.names);
      const ModelSpec spec = make_spec(config, meshes, data.points, data.values, dv.design);
      const ModelFit fit = run_fit(spec, make_fit_config(config, spec));
      std::vector<Eigen::SparseMatrix<double>> bases;
      for (std::size_t i = 0; i < meshes.size(); ++i)
        bases.push_back(project_points(meshes[i], centers, true).A);
      res.mean = predict_mixture(spec, fit, bases,
                                 select_columns(center_full, center_names, dv.names), false, 256,
                                 effective_threads(config))
                     .mean;
      res.hyper = hyper_summaries(fit, n_fields);
      res.ok = true;
    } catch (const std::exception& e) {
      res.error = e.what();
      if (run.name == "base") throw;
    }
    results.push_back(std::move(res));
    out << run.name << ": " << (results.back().ok ? "ok" : "failed: " + results.back().error)
        << "\n";
  }

  const std::vector<HyperSummary> base_hyper = results[0].hyper;
  std::ostringstream csv;
  csv << "variant,status,r2_vs_base";
  for (const HyperSummary& h : base_hyper) {
    std::string col = h.name;
    for (char& ch : col)
      if (ch == ' ' || ch == '(' || ch == ')') ch = '_';
    csv << "," << col;
  }
  csv << "\n";
  std::ostringstream report;
  report << "radmap sensitivity report\nmodel variant: " << config.variant << "\n\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const VariantResult& res = results[r];
    csv << runs[r].name << "," << (res.ok ? "ok" : "failed");
    if (res.ok) {
      const double r2 = std::pow(pearson(res.mean, results[0].mean), 2);
      csv << "," << fmt(r2);
      for (const HyperSummary& h : res.hyper) csv << "," << fmt(h.mean);
      char line[160];
      std::snprintf(line, sizeof line, "%-8s r2 vs base %.6f\n", runs[r].name.c_str(), r2);
      report << line;
      for (const HyperSummary& h : res.hyper) {
        std::snprintf(line, sizeof line, "  %-34s %12.4f %11.4f\n", h.name.c_str(), h.mean, h.sd);
        report << line;
      }
    } else {
      csv << ",";
      for (std::size_t i = 0; i < base_hyper.size(); ++i) csv << ",";
      report << runs[r].name << " failed: " << res.error << "\n";
    }
  }

  write_run_outputs(config, "sensitivity", data_inputs(config),
                    {{"sensitivity.csv", csv.str()}, {"sensitivity_report.txt", report.str()}});
  out << report.str();
}

// ---------------------------------------------------------------------------
// Dispatcher

namespace {

struct NullBuf : std::streambuf {
  int overflow(int c) override { return c; }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"terrestrial gamma dose-rate mapping"};
  app.require_subcommand(1);
  std::string config_path, out_override, fit_path;
  bool quiet = false;

  auto add_sub = [&](const char* name, const char* desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "run configuration file")->required();
    sub->add_option("--out", out_override, "override output_dir");
    sub->add_flag("--quiet", quiet, "suppress progress output");
    return sub;
  };
  CLI::App* s_simulate = add_sub("simulate", "generate a synthetic survey fixture");
  CLI::App* s_fit = add_sub("fit", "fit the configured model and write the fit artifact");
  CLI::App* s_cv = add_sub("cv", "cross-validate the configured model");
  CLI::App* s_predict = add_sub("predict", "predict on the configured grid from a fit artifact");
  s_predict->add_option("--fit", fit_path, "fit artifact path")->required();
  CLI::App* s_variogram = add_sub("variogram", "empirical spatial and along-track variograms");
  CLI::App* s_sensitivity = add_sub("sensitivity", "thinning and mesh-density comparison");

  std::vector<const char*> argv{"radmap"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }

  NullBuf null_buf;
  std::ostream null_stream(&null_buf);
  std::ostream& o = quiet ? null_stream : out;
  try {
    RunConfig cfg = load_run_config(config_path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (s_simulate->parsed())
      cmd_simulate(cfg, o);
    else if (s_fit->parsed())
      cmd_fit(cfg, o);
    else if (s_cv->parsed())
      cmd_cv(cfg, o);
    else if (s_predict->parsed())
      cmd_predict(cfg, fit_path, o);
    else if (s_variogram->parsed())
      cmd_variogram(cfg, o);
    else if (s_sensitivity->parsed())
      cmd_sensitivity(cfg, o);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace radmap
