#include "radmap/validation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <vector>

namespace radmap {

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// Flat accumulators for one worker's share of the pair enumeration.
struct BinAccum {
  std::vector<double> sum_sq;
  std::vector<std::size_t> count;
  explicit BinAccum(std::size_t n) : sum_sq(n, 0.0), count(n, 0) {}
  void merge(const BinAccum& other) {
    for (std::size_t b = 0; b < sum_sq.size(); ++b) {
      sum_sq[b] += other.sum_sq[b];
      count[b] += other.count[b];
    }
  }
};

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }
double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd da = a.array() - a.mean();
  const Eigen::ArrayXd db = b.array() - b.mean();
  const double denom = std::sqrt(da.square().sum() * db.square().sum());
  if (denom == 0.0) return 0.0;
  return (da * db).sum() / denom;
}

// Collision-free cell key; lattice indices stay well inside 32 bits.
long long cell_key(long cx, long cy) {
  return (long long)((std::uint64_t(std::uint32_t(cx)) << 32) | std::uint32_t(cy));
}

}  // namespace

std::string variogram_to_csv(const VariogramEstimate& est) {
  std::string out = "lag,semivariance,pairs\n";
  for (const VariogramBin& b : est.bins) {
    out += format_double(b.lag);
    out += ',';
    out += format_double(b.semivariance);
    out += ',';
    out += std::to_string(b.pairs);
    out += '\n';
  }
  return out;
}

VariogramEstimate empirical_variogram(const std::vector<Point2>& points,
                                      const Eigen::VectorXd& values,
                                      const VariogramConfig& config, RngStream rng,
                                      int threads) {
  if (points.size() < 2) throw std::invalid_argument("empirical_variogram: need >= 2 points");
  if (std::size_t(values.size()) != points.size())
    throw std::invalid_argument("empirical_variogram: size mismatch");
  if (!(config.bin_width > 0.0) || !(config.max_lag > 0.0))
    throw std::invalid_argument("empirical_variogram: bin width and max lag must be positive");

  // Deterministic subsample when the point set is larger than requested.
  std::vector<Point2> pts;
  Eigen::VectorXd vals;
  if (points.size() > config.subsample && config.subsample >= 2) {
    std::vector<std::size_t> idx = rng.sample_indices(points.size(), config.subsample);
    std::sort(idx.begin(), idx.end());
    pts.reserve(idx.size());
    vals.resize(Eigen::Index(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      pts.push_back(points[idx[i]]);
      vals[Eigen::Index(i)] = values[Eigen::Index(idx[i])];
    }
  } else {
    pts = points;
    vals = values;
  }

  // Grid index with cell size = max_lag: all partners of a point live in the
  // 3x3 cell neighborhood.
  double xmin = pts[0].x, ymin = pts[0].y;
  for (const Point2& p : pts) {
    xmin = std::min(xmin, p.x);
    ymin = std::min(ymin, p.y);
  }
  const double cell = config.max_lag;
  auto cell_of = [&](Point2 p) {
    return std::pair<long, long>{long((p.x - xmin) / cell), long((p.y - ymin) / cell)};
  };
  std::unordered_map<long long, std::vector<std::size_t>> grid;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto [cx, cy] = cell_of(pts[i]);
    grid[cell_key(cx, cy)].push_back(i);
  }

  const std::size_t n_bins = std::size_t(std::ceil(config.max_lag / config.bin_width));
  int n_workers = threads > 0 ? threads : int(std::clamp(std::thread::hardware_concurrency(), 1u, 8u));
  n_workers = int(std::min<std::size_t>(std::size_t(n_workers), pts.size()));

  auto accums = std::vector<BinAccum>(std::size_t(n_workers), BinAccum(n_bins));
  auto worker = [&](int w) {
    BinAccum& acc = accums[std::size_t(w)];
    for (std::size_t i = std::size_t(w); i < pts.size(); i += std::size_t(n_workers)) {
      const auto [cx, cy] = cell_of(pts[i]);
      for (long dx = -1; dx <= 1; ++dx)
        for (long dy = -1; dy <= 1; ++dy) {
          const auto it = grid.find(cell_key(cx + dx, cy + dy));
          if (it == grid.end()) continue;
          for (std::size_t j : it->second) {
            if (j <= i) continue;  // each pair once
            const double d = dist(pts[i], pts[j]);
            if (d > config.max_lag || d == 0.0) continue;
            const std::size_t b = std::min(n_bins - 1, std::size_t(d / config.bin_width));
            const double diff = vals[Eigen::Index(i)] - vals[Eigen::Index(j)];
            acc.sum_sq[b] += diff * diff;
            ++acc.count[b];
          }
        }
    }
  };
  if (n_workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker, w);
    for (std::thread& t : pool) t.join();
  }
  for (int w = 1; w < n_workers; ++w) accums[0].merge(accums[std::size_t(w)]);

  VariogramEstimate est;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (accums[0].count[b] == 0) continue;
    VariogramBin bin;
    bin.lag = (double(b) + 0.5) * config.bin_width;
    bin.semivariance = accums[0].sum_sq[b] / (2.0 * double(accums[0].count[b]));
    bin.pairs = accums[0].count[b];
    est.bins.push_back(bin);
  }
  return est;
}

VariogramEstimate track_variogram(const std::vector<MeasurementRecord>& records, long max_lag) {
  if (max_lag < 1) throw std::invalid_argument("track_variogram: max lag must be >= 1");

  std::unordered_map<std::string, std::vector<std::size_t>> by_flight;
  for (std::size_t i = 0; i < records.size(); ++i)
    by_flight[records[i].flight_id].push_back(i);

  std::vector<double> sum_sq(std::size_t(max_lag), 0.0);
  std::vector<std::size_t> count(std::size_t(max_lag), 0);
  for (auto& [flight, idx] : by_flight) {
    if (idx.size() < 2) continue;  // too short to pair
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return records[a].seq < records[b].seq;
    });
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = a + 1; b < idx.size(); ++b) {
        const long lag = records[idx[b]].seq - records[idx[a]].seq;
        if (lag > max_lag) break;  // seq-sorted, later lags only grow
        if (lag < 1) continue;     // duplicate seq, not a track step
        const double diff = records[idx[b]].log_dose - records[idx[a]].log_dose;
        sum_sq[std::size_t(lag - 1)] += diff * diff;
        ++count[std::size_t(lag - 1)];
      }
  }

  VariogramEstimate est;
  for (long lag = 1; lag <= max_lag; ++lag) {
    const std::size_t at = std::size_t(lag - 1);
    if (count[at] == 0) continue;
    est.bins.push_back({double(lag), sum_sq[at] / (2.0 * double(count[at])), count[at]});
  }
  return est;
}

FoldAssignment assign_folds(const std::vector<Point2>& points, const FoldScheme& scheme,
                            RngStream rng) {
  if (points.empty()) throw std::invalid_argument("assign_folds: no records");

  FoldAssignment out;
  if (const RandomScheme* rs = std::get_if<RandomScheme>(&scheme)) {
    if (!(rs->train_fraction > 0.0) || !(rs->train_fraction < 1.0))
      throw std::invalid_argument("assign_folds: train fraction must be in (0, 1)");
    const std::size_t n = points.size();
    const std::size_t n_train = std::size_t(std::llround(rs->train_fraction * double(n)));
    if (n_train == 0 || n_train == n)
      throw std::runtime_error("assign_folds: a fold is empty; use more records");
    std::vector<std::size_t> perm = rng.sample_indices(n, n);
    out.n_folds = 2;
    out.fold.assign(n, 1);
    for (std::size_t i = 0; i < n_train; ++i) out.fold[perm[i]] = 0;
    out.eval_folds = {1};
    return out;
  }

  const BlockScheme& bs = std::get<BlockScheme>(scheme);
  if (!(bs.block_size > 0.0)) throw std::invalid_argument("assign_folds: block size must be positive");
  if (bs.n_folds < 2) throw std::invalid_argument("assign_folds: need >= 2 folds");

  double xmin = points[0].x, ymin = points[0].y;
  for (const Point2& p : points) {
    xmin = std::min(xmin, p.x);
    ymin = std::min(ymin, p.y);
  }
  // Blocks keyed by lattice cell; iteration over the ordered map keeps the
  // fold draw independent of record order.
  std::map<std::pair<long, long>, int> block_fold;
  std::vector<std::pair<long, long>> record_block(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    record_block[i] = {long((points[i].x - xmin) / bs.block_size),
                       long((points[i].y - ymin) / bs.block_size)};
    block_fold.emplace(record_block[i], -1);
  }
  for (auto& [block, fold] : block_fold)
    fold = int(rng.uniform_index(std::uint64_t(bs.n_folds)));

  out.n_folds = bs.n_folds;
  out.fold.resize(points.size());
  std::vector<std::size_t> per_fold(std::size_t(bs.n_folds), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    out.fold[i] = block_fold[record_block[i]];
    ++per_fold[std::size_t(out.fold[i])];
  }
  for (int f = 0; f < bs.n_folds; ++f) {
    if (per_fold[std::size_t(f)] == 0) {
      char buf[128];
      std::snprintf(buf, sizeof(buf),
                    "assign_folds: fold %d has no records; re-seed or use fewer folds", f);
      throw std::runtime_error(buf);
    }
    out.eval_folds.push_back(f);
  }
  return out;
}

double block_size_from_distances(const std::vector<Point2>& targets,
                                 const std::vector<Point2>& references,
                                 double exclusion_radius, double quantile) {
  if (targets.empty() || references.empty())
    throw std::invalid_argument("block_size_from_distances: empty point set");
  if (!(quantile > 0.0) || !(quantile <= 1.0))
    throw std::invalid_argument("block_size_from_distances: quantile must be in (0, 1]");
  if (exclusion_radius < 0.0)
    throw std::invalid_argument("block_size_from_distances: negative exclusion radius");

  // Grid index over references sized so the expanding ring search stays local.
  BBox box;
  box.xmin = box.xmax = references[0].x;
  box.ymin = box.ymax = references[0].y;
  for (const Point2& p : references) {
    box.xmin = std::min(box.xmin, p.x);
    box.xmax = std::max(box.xmax, p.x);
    box.ymin = std::min(box.ymin, p.y);
    box.ymax = std::max(box.ymax, p.y);
  }
  const double extent = std::max({box.width(), box.height(), 1.0});
  const double cell = extent / std::max(1.0, std::sqrt(double(references.size())));
  std::unordered_map<long long, std::vector<std::size_t>> grid;
  auto cell_of = [&](Point2 p) {
    return std::pair<long, long>{long(std::floor((p.x - box.xmin) / cell)),
                                 long(std::floor((p.y - box.ymin) / cell))};
  };
  for (std::size_t i = 0; i < references.size(); ++i) {
    const auto [cx, cy] = cell_of(references[i]);
    grid[cell_key(cx, cy)].push_back(i);
  }

  const long max_ring = long(std::ceil(extent / cell)) + 2;
  auto nearest = [&](Point2 p) {
    // Search rings around the bbox cell nearest to p; every reference sits in
    // some ring <= max_ring. A cell at Chebyshev ring r lies at least
    // (r - 1) * cell from p, so the search can stop once that bound beats the
    // current best.
    auto [cx, cy] = cell_of(p);
    cx = std::clamp(cx, 0L, max_ring);
    cy = std::clamp(cy, 0L, max_ring);
    double best = std::numeric_limits<double>::infinity();
    for (long ring = 0; ring <= max_ring; ++ring) {
      if (std::isfinite(best) && (double(ring) - 1.0) * cell > best) break;
      for (long dx = -ring; dx <= ring; ++dx)
        for (long dy = -ring; dy <= ring; ++dy) {
          if (std::max(std::labs(dx), std::labs(dy)) != ring) continue;
          const auto it = grid.find(cell_key(cx + dx, cy + dy));
          if (it == grid.end()) continue;
          for (std::size_t j : it->second) best = std::min(best, dist(p, references[j]));
        }
    }
    return best;
  };

  std::vector<double> dists;
  dists.reserve(targets.size());
  for (const Point2& t : targets) {
    const double d = nearest(t);
    if (d > exclusion_radius) dists.push_back(d);
  }
  if (dists.empty())
    throw std::runtime_error(
        "block_size_from_distances: no target beyond the exclusion radius");

  std::sort(dists.begin(), dists.end());
  // Linear-interpolation quantile over the order statistics.
  const double pos = quantile * double(dists.size() - 1);
  const std::size_t lo = std::size_t(pos);
  const std::size_t hi = std::min(lo + 1, dists.size() - 1);
  const double frac = pos - double(lo);
  return 2.0 * ((1.0 - frac) * dists[lo] + frac * dists[hi]);
}

double crps_normal(double mu, double sd, double y) {
  if (sd < 0.0) throw std::invalid_argument("crps_normal: negative sd");
  if (sd == 0.0) return std::abs(y - mu);
  const double z = (y - mu) / sd;
  return sd * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / std::sqrt(M_PI));
}

Scores score(const Eigen::VectorXd& mean_log, const Eigen::VectorXd& sd_log,
             const Eigen::VectorXd& obs_log, const Eigen::VectorXd& pred_dose,
             const Eigen::VectorXd& obs_dose) {
  const Eigen::Index n = mean_log.size();
  if (sd_log.size() != n || obs_log.size() != n || pred_dose.size() != n || obs_dose.size() != n)
    throw std::invalid_argument("score: size mismatch");
  if (n == 0) throw std::invalid_argument("score: no points");

  Scores s;
  s.rmse = std::sqrt((pred_dose - obs_dose).squaredNorm() / double(n));
  const double r = pearson(pred_dose, obs_dose);
  s.r2 = r * r;
  double crps = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) crps += crps_normal(mean_log[i], sd_log[i], obs_log[i]);
  s.crps = crps / double(n);
  return s;
}

CvReport aggregate_cv(std::vector<FoldScore> folds) {
  CvReport report;
  report.folds = std::move(folds);
  std::size_t ok = 0;
  for (const FoldScore& f : report.folds) {
    if (!f.ok) {
      report.partial = true;
      continue;
    }
    report.aggregate.rmse += f.scores.rmse;
    report.aggregate.r2 += f.scores.r2;
    report.aggregate.crps += f.scores.crps;
    ++ok;
  }
  if (ok > 0) {
    report.aggregate.rmse /= double(ok);
    report.aggregate.r2 /= double(ok);
    report.aggregate.crps /= double(ok);
  }
  return report;
}

std::string cv_report_to_csv(const CvReport& report) {
  std::string out = "fold,n_train,n_test,rmse_nsvh,r2,crps_log,status\n";
  for (const FoldScore& f : report.folds) {
    out += std::to_string(f.fold);
    out += ',';
    out += std::to_string(f.n_train);
    out += ',';
    out += std::to_string(f.n_test);
    out += ',';
    if (f.ok) {
      out += format_double(f.scores.rmse);
      out += ',';
      out += format_double(f.scores.r2);
      out += ',';
      out += format_double(f.scores.crps);
      out += ",ok\n";
    } else {
      out += ",,,failed: " + csv_quote(f.error);
      out += '\n';
    }
  }
  out += "aggregate,,,";
  out += format_double(report.aggregate.rmse);
  out += ',';
  out += format_double(report.aggregate.r2);
  out += ',';
  out += format_double(report.aggregate.crps);
  out += report.partial ? ",partial\n" : ",ok\n";
  return out;
}

}  // namespace radmap
