#include "radmap/inference.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace radmap {
namespace {

constexpr double kLogTwoPi = 1.8378770664093455;

double ldlt_log_det(const Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>& chol,
                    const char* what) {
  const Eigen::VectorXd& d = chol.vectorD();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d[i] > 0.0)) throw std::runtime_error(std::string(what) + ": not positive definite");
    sum += std::log(d[i]);
  }
  return sum;
}

// Rows of [bases... | design] as one sparse matrix over the joint state.
Eigen::SparseMatrix<double> joint_rows(const std::vector<const Eigen::SparseMatrix<double>*>& bases,
                                       const std::vector<Eigen::Index>& field_sizes,
                                       const Eigen::MatrixXd& design, Eigen::Index n_fixed,
                                       Eigen::Index rows) {
  if (design.cols() != n_fixed) throw std::invalid_argument("inference: design width mismatch");
  if (n_fixed > 0 && design.rows() != rows)
    throw std::invalid_argument("inference: design rows mismatch");
  Eigen::Index njoint = n_fixed;
  for (Eigen::Index s : field_sizes) njoint += s;

  std::vector<Eigen::Triplet<double>> trips;
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < bases.size(); ++i) {
    const Eigen::SparseMatrix<double>& a = *bases[i];
    if (a.rows() != rows) throw std::invalid_argument("inference: basis rows mismatch");
    if (a.cols() != field_sizes[i])
      throw std::invalid_argument("inference: basis width != field node count");
    for (int k = 0; k < a.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(a, k); it; ++it)
        trips.emplace_back(int(it.row()), int(off + it.col()), it.value());
    off += field_sizes[i];
  }
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < n_fixed; ++j)
      if (design(i, j) != 0.0) trips.emplace_back(int(i), int(off + j), design(i, j));

  Eigen::SparseMatrix<double> out(rows, njoint);
  out.setFromTriplets(trips.begin(), trips.end());
  return out;
}

std::vector<const Eigen::SparseMatrix<double>*> observation_bases(const ModelSpec& spec) {
  std::vector<const Eigen::SparseMatrix<double>*> out;
  for (const FieldModel& f : spec.fields) out.push_back(&f.basis);
  return out;
}

std::vector<Eigen::Index> field_sizes(const ModelSpec& spec) {
  std::vector<Eigen::Index> out;
  for (const FieldModel& f : spec.fields) out.push_back(f.fem.lumped_mass.size());
  return out;
}

// Prior density over the log hyperparameters, including the change of
// variables from the natural parameterizations. The noise prior is placed on
// the observation precision.
double hyper_prior_terms(const ModelSpec& spec, const Hyperparameters& theta) {
  const double noise_prec = 1.0 / (theta.noise_sd * theta.noise_sd);
  double lp = log_density(spec.noise_precision, noise_prec) + std::log(2.0 * noise_prec);
  for (std::size_t i = 0; i < spec.fields.size(); ++i) {
    lp += log_density(spec.fields[i].range_prior, theta.fields[i].range) +
          std::log(theta.fields[i].range);
    lp += log_density(spec.fields[i].sigma_prior, theta.fields[i].sigma) +
          std::log(theta.fields[i].sigma);
  }
  return lp;
}

Eigen::VectorXd to_log(const Hyperparameters& th) {
  Eigen::VectorXd z(1 + 2 * Eigen::Index(th.fields.size()));
  z[0] = std::log(th.noise_sd);
  for (std::size_t i = 0; i < th.fields.size(); ++i) {
    z[1 + 2 * Eigen::Index(i)] = std::log(th.fields[i].range);
    z[2 + 2 * Eigen::Index(i)] = std::log(th.fields[i].sigma);
  }
  return z;
}

Hyperparameters from_log(const Eigen::VectorXd& z) {
  Hyperparameters th;
  th.noise_sd = std::exp(z[0]);
  const std::size_t nf = std::size_t((z.size() - 1) / 2);
  for (std::size_t i = 0; i < nf; ++i)
    th.fields.push_back(
        SpdeParams{std::exp(z[1 + 2 * Eigen::Index(i)]), std::exp(z[2 + 2 * Eigen::Index(i)])});
  return th;
}

struct NmOutcome {
  Eigen::VectorXd z;
  double f = 0.0;
  bool converged = false;
};

NmOutcome nelder_mead(const std::function<double(const Eigen::VectorXd&)>& fn,
                      const Eigen::VectorXd& z0, int iters) {
  const int d = int(z0.size());
  struct Vertex {
    Eigen::VectorXd z;
    double f;
  };
  std::vector<Vertex> v;
  v.push_back({z0, fn(z0)});
  for (int i = 0; i < d; ++i) {
    Eigen::VectorXd z = z0;
    z[i] += 0.3;
    v.push_back({z, fn(z)});
  }
  auto by_f = [](const Vertex& a, const Vertex& b) { return a.f < b.f; };
  auto small_enough = [&]() {
    double size = 0.0;
    for (int i = 1; i <= d; ++i) size = std::max(size, (v[std::size_t(i)].z - v[0].z).norm());
    return v[std::size_t(d)].f - v[0].f < 1e-6 || size < 1e-4;
  };
  bool converged = false;
  for (int it = 0; it < iters; ++it) {
    std::sort(v.begin(), v.end(), by_f);
    if (small_enough()) {
      converged = true;
      break;
    }
    Eigen::VectorXd c = Eigen::VectorXd::Zero(d);
    for (int i = 0; i < d; ++i) c += v[std::size_t(i)].z;
    c /= double(d);
    Vertex& worst = v[std::size_t(d)];
    Eigen::VectorXd xr = c + (c - worst.z);
    const double fr = fn(xr);
    if (fr < v[0].f) {
      Eigen::VectorXd xe = c + 2.0 * (c - worst.z);
      const double fe = fn(xe);
      if (fe < fr)
        worst = {xe, fe};
      else
        worst = {xr, fr};
    } else if (fr < v[std::size_t(d - 1)].f) {
      worst = {xr, fr};
    } else {
      Eigen::VectorXd xc = c + 0.5 * (worst.z - c);
      const double fc = fn(xc);
      if (fc < std::min(fr, worst.f)) {
        worst = {xc, fc};
      } else {
        for (int i = 1; i <= d; ++i) {
          v[std::size_t(i)].z = v[0].z + 0.5 * (v[std::size_t(i)].z - v[0].z);
          v[std::size_t(i)].f = fn(v[std::size_t(i)].z);
        }
      }
    }
  }
  std::sort(v.begin(), v.end(), by_f);
  if (!converged) converged = small_enough();
  return {v[0].z, v[0].f, converged};
}

std::string format_theta(const Hyperparameters& th) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "noise_sd=%.6g", th.noise_sd);
  std::string out = buf;
  for (std::size_t i = 0; i < th.fields.size(); ++i) {
    std::snprintf(buf, sizeof buf, ", range_%zu=%.6g, sigma_%zu=%.6g", i + 1, th.fields[i].range,
                  i + 1, th.fields[i].sigma);
    out += buf;
  }
  return out;
}

}  // namespace

ConditionalPosterior::ConditionalPosterior(const ModelSpec& spec, const Hyperparameters& theta) {
  const Eigen::Index n_obs = spec.values.size();
  const Eigen::Index p = spec.design.cols();
  if (theta.fields.size() != spec.fields.size())
    throw std::invalid_argument("inference: hyperparameter field count mismatch");
  if (spec.fields.empty() && p == 0) throw std::invalid_argument("inference: empty model");
  if (!(theta.noise_sd > 0.0))
    throw std::invalid_argument("inference: hyperparameters must be positive");
  if (!(spec.fixed_effects.variance > 0.0))
    throw std::invalid_argument("inference: fixed-effect prior variance must be positive");

  const double noise_prec = 1.0 / (theta.noise_sd * theta.noise_sd);
  const double beta_var = spec.fixed_effects.variance;

  std::vector<Eigen::Triplet<double>> trips;
  double log_det_prior = -double(p) * std::log(beta_var);
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < spec.fields.size(); ++i) {
    const FieldModel& f = spec.fields[i];
    const SpdeParams& fp = theta.fields[i];
    if (!(fp.range > 0.0) || !(fp.sigma > 0.0))
      throw std::invalid_argument("inference: hyperparameters must be positive");
    const Eigen::Index ni = f.fem.lumped_mass.size();
    Eigen::SparseMatrix<double> qf = spde_precision(f.fem, fp);
    for (int k = 0; k < qf.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(qf, k); it; ++it)
        trips.emplace_back(int(off + it.row()), int(off + it.col()), it.value());

    // The field precision factors as tau^2 (kappa^2 C + G) C^{-1} (kappa^2 C + G)
    // with diagonal C, so its log determinant only needs a factorization of
    // the much sparser kappa^2 C + G.
    const double kappa = matern_kappa(fp.range);
    const double tau = matern_tau(fp.range, fp.sigma);
    Eigen::SparseMatrix<double> half(ni, ni);
    half = ((kappa * kappa) * f.fem.lumped_mass).asDiagonal();
    half += f.fem.stiffness;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> half_chol(half);
    if (half_chol.info() != Eigen::Success)
      throw std::runtime_error("inference: field precision factorization failed");
    log_det_prior += 2.0 * double(ni) * std::log(tau) +
                     2.0 * ldlt_log_det(half_chol, "inference: field precision") -
                     f.fem.lumped_mass.array().log().sum();
    off += ni;
  }
  for (Eigen::Index j = 0; j < p; ++j)
    trips.emplace_back(int(off + j), int(off + j), 1.0 / beta_var);
  const Eigen::Index njoint = off + p;

  Eigen::SparseMatrix<double> q_post(njoint, njoint);
  q_post.setFromTriplets(trips.begin(), trips.end());

  Eigen::SparseMatrix<double> b =
      joint_rows(observation_bases(spec), field_sizes(spec), spec.design, p, n_obs);
  Eigen::SparseMatrix<double> bt = b.transpose();
  q_post += noise_prec * (bt * b);
  chol_.compute(q_post);
  if (chol_.info() != Eigen::Success)
    throw std::runtime_error("inference: joint precision factorization failed");
  const double log_det_post = ldlt_log_det(chol_, "inference: joint precision");

  Eigen::VectorXd rhs = noise_prec * (bt * spec.values);
  mean_ = chol_.solve(rhs);

  const double quad = noise_prec * spec.values.squaredNorm() - rhs.dot(mean_);
  log_marginal_ = 0.5 * (log_det_prior - log_det_post) -
                  0.5 * double(n_obs) * (kLogTwoPi + 2.0 * std::log(theta.noise_sd)) - 0.5 * quad;
}

Eigen::VectorXd ConditionalPosterior::linear_sd(const Eigen::SparseMatrix<double>& lin, int chunk,
                                                int threads) const {
  const Eigen::Index njoint = mean_.size();
  if (lin.cols() != njoint) throw std::invalid_argument("inference: functional width mismatch");
  if (chunk < 1) chunk = 1;
  Eigen::SparseMatrix<double, Eigen::RowMajor> rows(lin);
  Eigen::VectorXd dinv = chol_.vectorD().cwiseInverse();
  Eigen::VectorXd out(lin.rows());
  const std::size_t n_chunks = std::size_t((lin.rows() + chunk - 1) / chunk);
  parallel_for(n_chunks, threads, [&](std::size_t ci) {
    const Eigen::Index i0 = Eigen::Index(ci) * chunk;
    const Eigen::Index m = std::min<Eigen::Index>(chunk, lin.rows() - i0);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(njoint, m);
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(rows, i0 + r); it; ++it)
        rhs(it.col(), r) = it.value();
    Eigen::MatrixXd sol = chol_.permutationP() * rhs;
    chol_.matrixL().solveInPlace(sol);
    for (Eigen::Index r = 0; r < m; ++r)
      out[i0 + r] = std::sqrt(sol.col(r).array().square().matrix().dot(dinv));
  });
  return out;
}

Eigen::VectorXd ConditionalPosterior::sample(RngStream& rng) const {
  const Eigen::Index njoint = mean_.size();
  Eigen::VectorXd z(njoint);
  for (Eigen::Index i = 0; i < njoint; ++i) z[i] = rng.normal();
  // Q = P^T L D L^T P, so x = mean + P^{-1} L^{-T} D^{-1/2} z has covariance Q^{-1}.
  z.array() *= chol_.vectorD().array().rsqrt();
  Eigen::VectorXd w = chol_.matrixU().solve(z);
  return mean_ + chol_.permutationPinv() * w;
}

double log_hyper_posterior(const ModelSpec& spec, const Hyperparameters& theta) {
  ConditionalPosterior cp(spec, theta);
  return cp.log_marginal() + hyper_prior_terms(spec, theta);
}

ModelFit fit_model(const ModelSpec& spec, const FitConfig& cfg) {
  const Eigen::Index p = spec.design.cols();
  const std::size_t nf = spec.fields.size();
  if (nf > 2) throw std::invalid_argument("fit_model: at most two fields supported");
  if (nf == 0 && p == 0) throw std::invalid_argument("fit_model: empty model");
  if (cfg.grid_steps < 0) throw std::invalid_argument("fit_model: grid_steps must be >= 0");
  if (!(cfg.grid_scale > 0.0) || !(cfg.fallback_step > 0.0))
    throw std::invalid_argument("fit_model: grid scaling must be positive");
  if (p > 0) {
    if (spec.values.size() <= p)
      throw std::invalid_argument("fit_model: need more observations than covariates");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(spec.design);
    if (qr.rank() < p) throw std::invalid_argument("fit_model: design is rank deficient");
  }

  Hyperparameters init = cfg.init;
  if (!(init.noise_sd > 0.0)) init.noise_sd = 0.5;
  if (init.fields.size() != nf) {
    if (!init.fields.empty())
      throw std::invalid_argument("fit_model: init hyperparameters have wrong field count");
    for (const FieldModel& f : spec.fields)
      init.fields.push_back(SpdeParams{quantile(f.range_prior, 0.5), 1.0});
  }
  for (const SpdeParams& fp : init.fields)
    if (!(fp.range > 0.0) || !(fp.sigma > 0.0))
      throw std::invalid_argument("fit_model: init hyperparameters must be positive");

  auto neg_post = [&](const Eigen::VectorXd& z) -> double {
    try {
      return -log_hyper_posterior(spec, from_log(z));
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  const Eigen::VectorXd z0 = to_log(init);
  const int d = int(z0.size());
  if (!std::isfinite(neg_post(z0)))
    throw std::invalid_argument("fit_model: initial hyperparameters are not usable");
  NmOutcome nm = nelder_mead(neg_post, z0, cfg.nelder_mead_iters);
  if (!std::isfinite(nm.f)) throw std::runtime_error("fit_model: mode search failed");
  if (!nm.converged)
    throw std::runtime_error("fit_model: mode search did not converge; best point: " +
                             format_theta(from_log(nm.z)));
  const Eigen::VectorXd zm = nm.z;
  const double f0 = nm.f;

  // Central-difference curvature of the negative log posterior at the mode.
  const double h = 0.05;
  Eigen::MatrixXd hess(d, d);
  bool usable = true;
  for (int i = 0; i < d && usable; ++i) {
    Eigen::VectorXd zp = zm, zn = zm;
    zp[i] += h;
    zn[i] -= h;
    const double fp = neg_post(zp), fm = neg_post(zn);
    hess(i, i) = (fp - 2.0 * f0 + fm) / (h * h);
    usable = std::isfinite(fp) && std::isfinite(fm);
  }
  for (int i = 0; i < d && usable; ++i)
    for (int j = i + 1; j < d && usable; ++j) {
      Eigen::VectorXd a = zm, b = zm, c = zm, e = zm;
      a[i] += h;
      a[j] += h;
      b[i] += h;
      b[j] -= h;
      c[i] -= h;
      c[j] += h;
      e[i] -= h;
      e[j] -= h;
      const double fa = neg_post(a), fb = neg_post(b), fc = neg_post(c), fe = neg_post(e);
      usable = std::isfinite(fa) && std::isfinite(fb) && std::isfinite(fc) && std::isfinite(fe);
      hess(i, j) = hess(j, i) = (fa - fb - fc + fe) / (4.0 * h * h);
    }

  Eigen::VectorXd step = Eigen::VectorXd::Zero(d);
  bool fallback = !usable;
  if (usable) {
    Eigen::LLT<Eigen::MatrixXd> llt(hess);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(d, d));
      for (int i = 0; i < d; ++i) {
        step[i] = cfg.grid_scale * std::sqrt(std::max(cov(i, i), 0.0));
        if (!std::isfinite(step[i]) || step[i] < 1e-3 || step[i] > 2.0) fallback = true;
      }
    } else {
      fallback = true;
    }
  }
  if (fallback) {
    step.setConstant(cfg.fallback_step);
    std::fprintf(stderr,
                 "warning: curvature at the mode is unusable; "
                 "integration grid uses a fixed log-scale step of %g\n",
                 cfg.fallback_step);
  }

  ModelFit fit;
  fit.mode = from_log(zm);
  fit.curvature_fallback = fallback;

  Eigen::Index n_latent = 0;
  for (const FieldModel& f : spec.fields) n_latent += f.fem.lumped_mass.size();
  const Eigen::Index njoint = n_latent + p;
  Eigen::SparseMatrix<double> beta_rows(p, njoint);
  if (p > 0) {
    std::vector<Eigen::Triplet<double>> trips;
    for (Eigen::Index j = 0; j < p; ++j) trips.emplace_back(int(j), int(n_latent + j), 1.0);
    beta_rows.setFromTriplets(trips.begin(), trips.end());
  }

  // Tensor grid around the mode; points are evaluated independently.
  const int gs = cfg.grid_steps;
  const int per_axis = 2 * gs + 1;
  std::size_t n_points = 1;
  for (int i = 0; i < d; ++i) n_points *= std::size_t(per_axis);

  struct PointEval {
    bool ok = false;
    Hyperparameters th;
    double lp = 0.0;
    Eigen::VectorXd mean;
    Eigen::VectorXd beta_sd;
  };
  std::vector<PointEval> evals(n_points);
  parallel_for(n_points, cfg.threads, [&](std::size_t k) {
    Eigen::VectorXd z = zm;
    std::size_t rem = k;
    for (int i = 0; i < d; ++i) {
      const int offset = int(rem % std::size_t(per_axis)) - gs;
      rem /= std::size_t(per_axis);
      z[i] += double(offset) * step[i];
    }
    const Hyperparameters th = from_log(z);
    try {
      ConditionalPosterior cp(spec, th);
      const double lp = cp.log_marginal() + hyper_prior_terms(spec, th);
      if (!std::isfinite(lp)) return;
      evals[k].th = th;
      evals[k].lp = lp;
      evals[k].mean = cp.mean();
      if (p > 0) evals[k].beta_sd = cp.linear_sd(beta_rows);
      evals[k].ok = true;
    } catch (const std::exception&) {
      // Unusable corner of the grid; remaining points are renormalized.
    }
  });

  std::size_t center = 0;
  for (int i = d - 1; i >= 0; --i) center = center * std::size_t(per_axis) + std::size_t(gs);
  if (!evals[center].ok) throw std::runtime_error("fit_model: evaluation at the mode failed");

  std::vector<Eigen::VectorXd> beta_sds;
  double max_lp = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n_points; ++k) {
    if (!evals[k].ok) continue;
    if (k == center) fit.mode_index = fit.grid.size();
    GridPoint gp;
    gp.theta = evals[k].th;
    gp.log_posterior = evals[k].lp;
    fit.grid.push_back(gp);
    fit.conditional_means.push_back(std::move(evals[k].mean));
    if (p > 0) beta_sds.push_back(std::move(evals[k].beta_sd));
    max_lp = std::max(max_lp, gp.log_posterior);
  }

  double total = 0.0;
  for (GridPoint& g : fit.grid) {
    g.weight = std::exp(g.log_posterior - max_lp);
    total += g.weight;
  }
  for (GridPoint& g : fit.grid) g.weight /= total;

  if (p > 0) {
    Eigen::VectorXd m1 = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd m2 = Eigen::VectorXd::Zero(p);
    for (std::size_t k = 0; k < fit.grid.size(); ++k) {
      const double w = fit.grid[k].weight;
      Eigen::VectorXd bm = fit.conditional_means[k].tail(p);
      m1 += w * bm;
      m2.array() += w * (beta_sds[k].array().square() + bm.array().square());
    }
    fit.beta_mean.resize(std::size_t(p));
    fit.beta_sd.resize(std::size_t(p));
    for (Eigen::Index j = 0; j < p; ++j) {
      fit.beta_mean[std::size_t(j)] = m1[j];
      fit.beta_sd[std::size_t(j)] = std::sqrt(std::max(m2[j] - m1[j] * m1[j], 0.0));
    }
  }
  fit.data_checksum =
      fnv1a64(std::string_view(reinterpret_cast<const char*>(spec.values.data()),
                               std::size_t(spec.values.size()) * sizeof(double)));
  return fit;
}

PredictionSummary predict_mixture(const ModelSpec& spec, const ModelFit& fit,
                                  const std::vector<Eigen::SparseMatrix<double>>& field_bases,
                                  const Eigen::MatrixXd& design, bool include_noise, int chunk,
                                  int threads) {
  if (fit.grid.empty()) throw std::invalid_argument("predict_mixture: empty grid");
  if (field_bases.size() != spec.fields.size())
    throw std::invalid_argument("predict_mixture: field basis count mismatch");
  if (!fit.conditional_means.empty() && fit.conditional_means.size() != fit.grid.size())
    throw std::invalid_argument("predict_mixture: conditional means do not match the grid");

  std::vector<const Eigen::SparseMatrix<double>*> bases;
  for (const Eigen::SparseMatrix<double>& b : field_bases) bases.push_back(&b);
  const Eigen::Index rows = bases.empty() ? design.rows() : bases[0]->rows();
  Eigen::SparseMatrix<double> lin =
      joint_rows(bases, field_sizes(spec), design, spec.design.cols(), rows);

  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(rows);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(rows);
  double used = 0.0;
  for (std::size_t k = 0; k < fit.grid.size(); ++k) {
    const GridPoint& gp = fit.grid[k];
    if (gp.weight <= 1e-12) continue;
    ConditionalPosterior cp(spec, gp.theta);
    const Eigen::VectorXd& joint_mean =
        fit.conditional_means.empty() ? cp.mean() : fit.conditional_means[k];
    if (joint_mean.size() != lin.cols())
      throw std::invalid_argument("predict_mixture: conditional mean width mismatch");
    Eigen::VectorXd mu = lin * joint_mean;
    Eigen::VectorXd sd = cp.linear_sd(lin, chunk, threads);
    Eigen::ArrayXd var = sd.array().square();
    if (include_noise) var += gp.theta.noise_sd * gp.theta.noise_sd;
    m1.array() += gp.weight * mu.array();
    m2.array() += gp.weight * (var + mu.array().square());
    used += gp.weight;
  }
  if (!(used > 0.0)) throw std::runtime_error("predict_mixture: no usable grid points");
  m1 /= used;
  m2 /= used;
  PredictionSummary out;
  out.mean = m1;
  out.sd = (m2.array() - m1.array().square()).max(0.0).sqrt().matrix();
  return out;
}

Eigen::MatrixXd sample_posterior(const ModelSpec& spec, const ModelFit& fit, int n,
                                 RngStream& rng) {
  if (n <= 0) throw std::invalid_argument("sample_posterior: n must be positive");
  if (fit.grid.empty()) throw std::invalid_argument("sample_posterior: empty grid");
  std::vector<double> cum(fit.grid.size());
  double total = 0.0;
  for (std::size_t k = 0; k < fit.grid.size(); ++k) {
    total += fit.grid[k].weight;
    cum[k] = total;
  }
  if (!(total > 0.0)) throw std::invalid_argument("sample_posterior: weights sum to zero");

  // Component draws consume the stream first so the grouping below stays
  // deterministic for a given seed.
  std::vector<std::vector<int>> columns_of(fit.grid.size());
  for (int s = 0; s < n; ++s) {
    const double u = rng.uniform01() * total;
    std::size_t k = std::size_t(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    if (k >= cum.size()) k = cum.size() - 1;
    columns_of[k].push_back(s);
  }
  Eigen::Index n_latent = 0;
  for (const FieldModel& f : spec.fields) n_latent += f.fem.lumped_mass.size();
  Eigen::MatrixXd out(n_latent + spec.design.cols(), n);
  for (std::size_t k = 0; k < columns_of.size(); ++k) {
    if (columns_of[k].empty()) continue;
    ConditionalPosterior cp(spec, fit.grid[k].theta);
    for (int col : columns_of[k]) out.col(col) = cp.sample(rng);
  }
  return out;
}

double lognormal_median(double mu) { return std::exp(mu); }

double lognormal_mean(double mu, double var) { return std::exp(mu + 0.5 * var); }

namespace {

nlohmann::json theta_to_json(const Hyperparameters& th) {
  nlohmann::json fields = nlohmann::json::array();
  for (const SpdeParams& f : th.fields) fields.push_back({{"range", f.range}, {"sigma", f.sigma}});
  return {{"noise_sd", th.noise_sd}, {"fields", std::move(fields)}};
}

Hyperparameters theta_from_json(const nlohmann::json& j) {
  Hyperparameters th;
  th.noise_sd = j.at("noise_sd").get<double>();
  for (const nlohmann::json& f : j.at("fields"))
    th.fields.push_back(SpdeParams{f.at("range").get<double>(), f.at("sigma").get<double>()});
  return th;
}

}  // namespace

std::string fit_to_json(const ModelFit& fit) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["mode"] = theta_to_json(fit.mode);
  j["mode_index"] = fit.mode_index;
  j["curvature_fallback"] = fit.curvature_fallback;
  nlohmann::json grid = nlohmann::json::array();
  for (const GridPoint& g : fit.grid) {
    nlohmann::json gj = theta_to_json(g.theta);
    gj["log_posterior"] = g.log_posterior;
    gj["weight"] = g.weight;
    grid.push_back(std::move(gj));
  }
  j["grid"] = std::move(grid);
  nlohmann::json means = nlohmann::json::array();
  for (const Eigen::VectorXd& m : fit.conditional_means) {
    std::vector<double> v(m.data(), m.data() + m.size());
    means.push_back(std::move(v));
  }
  j["conditional_means"] = std::move(means);
  j["beta_mean"] = fit.beta_mean;
  j["beta_sd"] = fit.beta_sd;
  j["design_names"] = fit.design_names;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fit.data_checksum));
  j["data_checksum"] = buf;
  return j.dump(2);
}

ModelFit fit_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  const int version = j.at("format_version").get<int>();
  if (version != 1)
    throw std::runtime_error("fit_from_json: unsupported format version " +
                             std::to_string(version));
  ModelFit fit;
  fit.mode = theta_from_json(j.at("mode"));
  fit.mode_index = j.at("mode_index").get<std::size_t>();
  fit.curvature_fallback = j.at("curvature_fallback").get<bool>();
  for (const nlohmann::json& g : j.at("grid")) {
    GridPoint gp;
    gp.theta = theta_from_json(g);
    gp.log_posterior = g.at("log_posterior").get<double>();
    gp.weight = g.at("weight").get<double>();
    fit.grid.push_back(gp);
  }
  for (const nlohmann::json& m : j.at("conditional_means")) {
    std::vector<double> v = m.get<std::vector<double>>();
    fit.conditional_means.push_back(
        Eigen::Map<const Eigen::VectorXd>(v.data(), Eigen::Index(v.size())));
  }
  fit.beta_mean = j.at("beta_mean").get<std::vector<double>>();
  fit.beta_sd = j.at("beta_sd").get<std::vector<double>>();
  fit.design_names = j.at("design_names").get<std::vector<std::string>>();
  fit.data_checksum = std::strtoull(j.at("data_checksum").get<std::string>().c_str(), nullptr, 16);
  return fit;
}

}  // namespace radmap
