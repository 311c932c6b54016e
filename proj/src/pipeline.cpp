#include "radmap/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "radmap/util.hpp"

namespace radmap {

namespace {

int auto_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return int(std::clamp(hw, 1u, 8u));
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty();
}

bool parse_long(std::string_view s, long& out) {
  s = trim(s);
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty();
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

[[noreturn]] void throw_row_issues(const char* op, const std::vector<std::string>& issues) {
  std::ostringstream msg;
  msg << op << ": " << issues.size() << " invalid row" << (issues.size() == 1 ? "" : "s") << ": ";
  const std::size_t shown = std::min<std::size_t>(issues.size(), 20);
  for (std::size_t i = 0; i < shown; ++i) {
    if (i > 0) msg << "; ";
    msg << issues[i];
  }
  if (issues.size() > shown) msg << "; and " << issues.size() - shown << " more";
  throw std::runtime_error(msg.str());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

std::vector<MeasurementRecord> parse_measurements(const std::string& text, int threads) {
  std::vector<std::string_view> lines;
  {
    std::string_view rest(text);
    while (!rest.empty()) {
      const std::size_t nl = rest.find('\n');
      std::string_view line = rest.substr(0, nl);
      if (!trim(line).empty()) lines.push_back(line);
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
  }
  if (lines.empty()) throw std::runtime_error("ingest: empty file");

  bool with_timestamp = false;
  {
    std::vector<std::string_view> head = split_fields(lines[0]);
    std::vector<std::string> names;
    for (std::string_view h : head) names.emplace_back(trim(h));
    const std::vector<std::string> base{"flight_id", "seq", "x", "y", "dose_nsvh"};
    std::vector<std::string> with_ts = base;
    with_ts.push_back("timestamp");
    if (names == base)
      with_timestamp = false;
    else if (names == with_ts)
      with_timestamp = true;
    else
      throw std::runtime_error(
          "ingest: unrecognized header; expected flight_id,seq,x,y,dose_nsvh[,timestamp]");
  }

  const std::size_t n = lines.size() - 1;
  std::vector<MeasurementRecord> records(n);
  std::vector<std::string> row_issue(n);
  const std::size_t expected_fields = with_timestamp ? 6 : 5;

  parallel_for(n, auto_threads(threads), [&](std::size_t i) {
    const std::size_t row = i + 1;  // 1-based data row
    std::vector<std::string_view> f = split_fields(lines[i + 1]);
    char buf[160];
    if (f.size() != expected_fields) {
      std::snprintf(buf, sizeof(buf), "row %zu: expected %zu fields, got %zu", row,
                    expected_fields, f.size());
      row_issue[i] = buf;
      return;
    }
    MeasurementRecord r;
    r.flight_id = std::string(trim(f[0]));
    if (r.flight_id.empty()) {
      std::snprintf(buf, sizeof(buf), "row %zu: empty flight_id", row);
      row_issue[i] = buf;
      return;
    }
    if (!parse_long(f[1], r.seq)) {
      std::snprintf(buf, sizeof(buf), "row %zu: bad seq '%.*s'", row, int(f[1].size()),
                    f[1].data());
      row_issue[i] = buf;
      return;
    }
    if (!parse_double(f[2], r.x) || !parse_double(f[3], r.y)) {
      std::snprintf(buf, sizeof(buf), "row %zu: bad coordinate", row);
      row_issue[i] = buf;
      return;
    }
    if (!parse_double(f[4], r.dose_nsvh) || !std::isfinite(r.dose_nsvh)) {
      std::snprintf(buf, sizeof(buf), "row %zu: bad dose '%.*s'", row, int(f[4].size()),
                    f[4].data());
      row_issue[i] = buf;
      return;
    }
    if (r.dose_nsvh <= 0.0) {
      std::snprintf(buf, sizeof(buf), "row %zu: nonpositive dose %s", row,
                    format_double(r.dose_nsvh).c_str());
      row_issue[i] = buf;
      return;
    }
    r.log_dose = std::log(r.dose_nsvh);
    if (with_timestamp) r.timestamp = std::string(trim(f[5]));
    r.source_row = row;
    records[i] = std::move(r);
  });

  std::vector<std::string> issues;
  for (std::size_t i = 0; i < n; ++i)
    if (!row_issue[i].empty()) issues.push_back(std::move(row_issue[i]));

  if (issues.empty()) {
    std::unordered_set<std::string> seen;
    seen.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      std::string key = records[i].flight_id;
      key += '\x1f';
      key += std::to_string(records[i].seq);
      if (!seen.insert(std::move(key)).second) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "row %zu: duplicate (flight_id, seq) = (%s, %ld)",
                      records[i].source_row, records[i].flight_id.c_str(), records[i].seq);
        issues.emplace_back(buf);
      }
    }
  }
  if (!issues.empty()) throw_row_issues("ingest", issues);
  return records;
}

std::vector<MeasurementRecord> ingest(const std::string& path, int threads) {
  try {
    return parse_measurements(read_file(path), threads);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " [" + path + "]");
  }
}

std::string measurements_to_csv(const std::vector<MeasurementRecord>& records) {
  bool with_timestamp = false;
  for (const MeasurementRecord& r : records)
    if (!r.timestamp.empty()) with_timestamp = true;
  std::string out = with_timestamp ? "flight_id,seq,x,y,dose_nsvh,timestamp\n"
                                   : "flight_id,seq,x,y,dose_nsvh\n";
  for (const MeasurementRecord& r : records) {
    out += csv_quote(r.flight_id);
    out += ',';
    out += std::to_string(r.seq);
    out += ',';
    out += format_double(r.x);
    out += ',';
    out += format_double(r.y);
    out += ',';
    out += format_double(r.dose_nsvh);
    if (with_timestamp) {
      out += ',';
      out += csv_quote(r.timestamp);
    }
    out += '\n';
  }
  return out;
}

std::string exclusion_to_json(const ExclusionSpec& spec) {
  nlohmann::json j;
  j["sources"] = nlohmann::json::array();
  for (const ExclusionCircle& c : spec.sources)
    j["sources"].push_back({{"x", c.center.x}, {"y", c.center.y}, {"radius", c.radius}});
  j["water"] = nlohmann::json::array();
  for (const Polygon& poly : spec.water) {
    nlohmann::json ring = nlohmann::json::array();
    for (const Point2& p : poly) ring.push_back({p.x, p.y});
    j["water"].push_back(ring);
  }
  return j.dump(2);
}

ExclusionSpec exclusion_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ExclusionSpec spec;
  for (const nlohmann::json& c : j.at("sources"))
    spec.sources.push_back(
        {{c.at("x").get<double>(), c.at("y").get<double>()}, c.at("radius").get<double>()});
  for (const nlohmann::json& ring : j.at("water")) {
    Polygon poly;
    for (const nlohmann::json& p : ring) poly.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    spec.water.push_back(std::move(poly));
  }
  return spec;
}

CleanResult clean(const std::vector<MeasurementRecord>& records, const ExclusionSpec& spec) {
  for (const ExclusionCircle& c : spec.sources)
    if (!(c.radius > 0.0)) throw std::invalid_argument("clean: exclusion radius must be positive");
  for (const Polygon& poly : spec.water) {
    if (poly.size() < 3) throw std::invalid_argument("clean: water polygon needs >= 3 vertices");
    if (!polygon_is_simple(poly)) throw std::invalid_argument("clean: water polygon is not simple");
  }

  CleanResult out;
  out.records.reserve(records.size());
  for (const MeasurementRecord& r : records) {
    const Point2 p{r.x, r.y};
    bool near_source = false;
    for (const ExclusionCircle& c : spec.sources)
      if (dist(p, c.center) <= c.radius) {
        near_source = true;
        break;
      }
    if (near_source) {
      ++out.dropped_sources;
      continue;
    }
    bool in_water = false;
    for (const Polygon& poly : spec.water)
      if (point_in_polygon(p, poly)) {
        in_water = true;
        break;
      }
    if (in_water) {
      ++out.dropped_water;
      continue;
    }
    out.records.push_back(r);
  }
  return out;
}

std::vector<MeasurementRecord> thin(const std::vector<MeasurementRecord>& records, std::size_t k) {
  if (k < 1) throw std::invalid_argument("thin: k must be >= 1");
  if (k == 1) return records;

  std::unordered_map<std::string, std::vector<std::size_t>> by_flight;
  for (std::size_t i = 0; i < records.size(); ++i)
    by_flight[records[i].flight_id].push_back(i);

  std::vector<char> keep(records.size(), 0);
  for (auto& [flight, idx] : by_flight) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return records[a].seq < records[b].seq;
    });
    for (std::size_t rank = 0; rank < idx.size(); rank += k) keep[idx[rank]] = 1;
  }

  std::vector<MeasurementRecord> out;
  out.reserve((records.size() + k - 1) / k);
  for (std::size_t i = 0; i < records.size(); ++i)
    if (keep[i]) out.push_back(records[i]);
  return out;
}

bool Raster::contains(double x, double y) const {
  return x >= xll && y >= yll && x < xll + double(ncols) * cell && y < yll + double(nrows) * cell;
}

std::optional<double> Raster::sample(double x, double y) const {
  if (!contains(x, y)) return std::nullopt;
  const std::size_t col = std::size_t((x - xll) / cell);
  const std::size_t row_up = std::size_t((y - yll) / cell);
  const double v = at(nrows - 1 - row_up, col);
  if (v == nodata) return std::nullopt;
  return v;
}

Raster read_raster(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open raster: " + path);

  Raster r;
  bool have_ncols = false, have_nrows = false, have_xll = false, have_yll = false,
       have_cell = false;
  std::string key;
  // Header keys in any order; the value block starts at the first numeric token.
  while (in >> key) {
    std::string lower = key;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    if (lower == "ncols") {
      in >> r.ncols;
      have_ncols = true;
    } else if (lower == "nrows") {
      in >> r.nrows;
      have_nrows = true;
    } else if (lower == "xllcorner") {
      in >> r.xll;
      have_xll = true;
    } else if (lower == "yllcorner") {
      in >> r.yll;
      have_yll = true;
    } else if (lower == "cellsize") {
      in >> r.cell;
      have_cell = true;
    } else if (lower == "nodata_value") {
      in >> r.nodata;
    } else {
      break;  // first value token
    }
  }
  if (!have_ncols || !have_nrows || !have_xll || !have_yll || !have_cell)
    throw std::runtime_error("raster header incomplete: " + path);
  if (r.ncols == 0 || r.nrows == 0 || !(r.cell > 0.0))
    throw std::runtime_error("raster header invalid: " + path);

  r.values.reserve(r.ncols * r.nrows);
  double first;
  {
    std::istringstream tok(key);
    if (!(tok >> first)) throw std::runtime_error("raster values malformed: " + path);
  }
  r.values.push_back(first);
  double v;
  while (in >> v) r.values.push_back(v);
  if (r.values.size() != r.ncols * r.nrows)
    throw std::runtime_error("raster value count mismatch: " + path);
  return r;
}

void write_raster(const std::string& path, const Raster& raster) {
  if (raster.values.size() != raster.ncols * raster.nrows)
    throw std::invalid_argument("write_raster: value count mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write raster: " + path);
  out << "ncols " << raster.ncols << "\n";
  out << "nrows " << raster.nrows << "\n";
  out << "xllcorner " << format_double(raster.xll) << "\n";
  out << "yllcorner " << format_double(raster.yll) << "\n";
  out << "cellsize " << format_double(raster.cell) << "\n";
  out << "nodata_value " << format_double(raster.nodata) << "\n";
  for (std::size_t row = 0; row < raster.nrows; ++row) {
    for (std::size_t col = 0; col < raster.ncols; ++col) {
      if (col > 0) out << ' ';
      out << format_double(raster.at(row, col));
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

CovariateLevels default_levels() {
  CovariateLevels lv;
  lv.lithology = {"Glacier, Firn", "Lockergesteine", "Magmatische Gesteine",
                  "Metamorphe Gesteine", "Sedimentgesteine"};
  lv.tectonic = {"Allochthone Massive und infrapenninische Kristallindecken",
                 "Ausseralpine Plattform",
                 "Autochthon - Parautochthon, Infrahelvetische Decken",
                 "Decken der unterostalpin-penninischen Grenzzone",
                 "Faltenjura",
                 "Helvetische Sedimentdecken s.str.",
                 "Mittelpenninische Kristallindecken",
                 "Mittelpenninische Sedimentdecken und -schuppen",
                 "Molassebecken",
                 "Oberostalpine Decken",
                 "Oberpenninische Sedimentdecken",
                 "Ophiolithfuerende oberpenninische Sedimentdecken und -schuppen",
                 "Quartaer",
                 "Sued- bis ultrahelvetische Sedimentdecken und -schuppen",
                 "Suedalpin",
                 "Tertiaere Intrusiva und Extrusiva",
                 "Unterostalpine Decken",
                 "Unterpenninische Kristallindecken",
                 "Unterpenninische Sedimentdecken und -schuppen, Ophiolithe"};
  lv.landcover = {"artificial",        "grass vegetation", "bush vegetation",
                  "tree vegetation",   "without vegetation", "wetland"};
  return lv;
}

namespace {

// Returns the 0-based level code, or -1 for outside/no-data; out-of-set codes
// fill `issue`.
int sample_code(const Raster& raster, Point2 p, std::size_t n_levels, const char* what,
                std::size_t row, std::string& issue) {
  const std::optional<double> v = raster.sample(p.x, p.y);
  if (!v) return -1;
  const double r = std::nearbyint(*v);
  if (std::abs(*v - r) > 1e-9 || r < 0.0 || r >= double(n_levels)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "row %zu: %s code %s outside the declared levels", row, what,
                  format_double(*v).c_str());
    issue = buf;
    return -1;
  }
  return int(r);
}

}  // namespace

JoinedCovariates join_covariates(const std::vector<Point2>& points,
                                 const CovariateRasters& rasters, const CovariateLevels& levels,
                                 int threads) {
  if (levels.lithology.empty() || levels.tectonic.empty() || levels.landcover.empty())
    throw std::invalid_argument("join_covariates: empty level dictionary");

  const std::size_t n_lith = levels.lithology.size();
  const std::size_t n_tect = levels.tectonic.size() - 1;  // first level is the reference
  const std::size_t n_lc = levels.landcover.size() - 1;
  const std::size_t width = n_lith + n_tect + n_lc + 1;

  JoinedCovariates out;
  out.names.reserve(width);
  for (const std::string& s : levels.lithology) out.names.push_back("lithology:" + s);
  for (std::size_t i = 1; i < levels.tectonic.size(); ++i)
    out.names.push_back("tectonic:" + levels.tectonic[i]);
  for (std::size_t i = 1; i < levels.landcover.size(); ++i)
    out.names.push_back("landcover:" + levels.landcover[i]);
  out.names.push_back("rainfall_m");

  const std::size_t n = points.size();
  out.design = Eigen::MatrixXd::Zero(Eigen::Index(n), Eigen::Index(width));
  std::vector<char> valid(n, 0);
  std::vector<std::string> row_issue(n);

  parallel_for(n, auto_threads(threads), [&](std::size_t i) {
    const std::size_t row = i + 1;
    const Point2 p = points[i];
    const int lith = sample_code(rasters.lithology, p, n_lith, "lithology", row, row_issue[i]);
    const int tect =
        sample_code(rasters.tectonic, p, levels.tectonic.size(), "tectonic", row, row_issue[i]);
    const int lc =
        sample_code(rasters.landcover, p, levels.landcover.size(), "land cover", row, row_issue[i]);
    const std::optional<double> rain = rasters.rainfall.sample(p.x, p.y);
    if (lith < 0 || tect < 0 || lc < 0 || !rain) return;  // flagged, row stays zero
    if (*rain < 0.0) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "row %zu: negative rainfall", row);
      row_issue[i] = buf;
      return;
    }
    out.design(Eigen::Index(i), lith) = 1.0;
    if (tect > 0) out.design(Eigen::Index(i), Eigen::Index(n_lith + std::size_t(tect) - 1)) = 1.0;
    if (lc > 0)
      out.design(Eigen::Index(i), Eigen::Index(n_lith + n_tect + std::size_t(lc) - 1)) = 1.0;
    out.design(Eigen::Index(i), Eigen::Index(width - 1)) = *rain;
    valid[i] = 1;
  });

  std::vector<std::string> issues;
  for (std::size_t i = 0; i < n; ++i)
    if (!row_issue[i].empty()) issues.push_back(std::move(row_issue[i]));
  if (!issues.empty()) throw_row_issues("join_covariates", issues);

  out.valid.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (valid[i])
      out.valid[i] = true;
    else
      ++out.n_invalid;
  }
  return out;
}

DecodedRow decode_design_row(const Eigen::VectorXd& row, const CovariateLevels& levels) {
  const std::size_t n_lith = levels.lithology.size();
  const std::size_t n_tect = levels.tectonic.size() - 1;
  const std::size_t n_lc = levels.landcover.size() - 1;
  if (std::size_t(row.size()) != n_lith + n_tect + n_lc + 1)
    throw std::invalid_argument("decode_design_row: width mismatch");

  auto pick_one = [&](std::size_t offset, std::size_t count, bool required) {
    int found = -1;
    for (std::size_t i = 0; i < count; ++i) {
      const double v = row[Eigen::Index(offset + i)];
      if (v == 1.0) {
        if (found >= 0) throw std::invalid_argument("decode_design_row: multiple levels set");
        found = int(i);
      } else if (v != 0.0) {
        throw std::invalid_argument("decode_design_row: indicator not 0 or 1");
      }
    }
    if (required && found < 0)
      throw std::invalid_argument("decode_design_row: no lithology level set");
    return found;
  };

  DecodedRow out;
  out.lithology = levels.lithology[std::size_t(pick_one(0, n_lith, true))];
  const int tect = pick_one(n_lith, n_tect, false);
  out.tectonic = tect < 0 ? levels.tectonic[0] : levels.tectonic[std::size_t(tect) + 1];
  const int lc = pick_one(n_lith + n_tect, n_lc, false);
  out.landcover = lc < 0 ? levels.landcover[0] : levels.landcover[std::size_t(lc) + 1];
  out.rainfall_m = row[row.size() - 1];
  return out;
}

Point2 GridSpec::center(std::size_t index) const {
  const std::size_t ix = index % nx;
  const std::size_t iy = index / nx;
  return {x0 + (double(ix) + 0.5) * cell, y0 + (double(iy) + 0.5) * cell};
}

std::vector<Point2> GridSpec::inside_centers() const {
  std::vector<Point2> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (inside[i]) out.push_back(center(i));
  return out;
}

GridSpec build_grid(const Polygon& domain, double cell) {
  if (!(cell > 0.0)) throw std::invalid_argument("build_grid: cell must be positive");
  if (domain.size() < 3) throw std::invalid_argument("build_grid: polygon needs >= 3 vertices");
  if (!polygon_is_simple(domain)) throw std::invalid_argument("build_grid: polygon is not simple");

  const BBox box = polygon_bbox(domain);
  GridSpec g;
  g.x0 = box.xmin;
  g.y0 = box.ymin;
  g.cell = cell;
  // Epsilon guard keeps exact multiples from gaining a spurious row of cells.
  g.nx = std::size_t(std::max(1.0, std::ceil((box.width() - 1e-9) / cell)));
  g.ny = std::size_t(std::max(1.0, std::ceil((box.height() - 1e-9) / cell)));
  g.inside.resize(g.nx * g.ny);
  for (std::size_t i = 0; i < g.inside.size(); ++i)
    g.inside[i] = point_in_polygon(g.center(i), domain);
  return g;
}

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace radmap
