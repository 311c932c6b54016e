// Exact Gaussian inference checked against dense linear algebra, conjugate
// closed forms, and simulation-based recovery, across all four model
// variants (regression only, field only, field + covariates, dual field).

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "radmap/fem.hpp"
#include "radmap/inference.hpp"
#include "radmap/mesh.hpp"
#include "radmap/spde.hpp"
#include "radmap/util.hpp"

using namespace radmap;

namespace {

std::vector<Point2> square(double s) {
  return {{0.0, 0.0}, {s, 0.0}, {s, s}, {0.0, s}};
}

enum class Variant { linear, spatial, mixed, extended };

struct TestModel {
  std::vector<TriMesh> meshes;
  ModelSpec spec;
  std::vector<Point2> pts;
};

// Compact observation set over one or two small meshes; dense oracles stay
// cheap at this size.
TestModel make_model(Variant v, std::uint64_t seed) {
  TestModel m;
  RngStream rng(seed);
  RngStream pts_rng = rng.derive("points");
  RngStream cov_rng = rng.derive("covariates");
  RngStream y_rng = rng.derive("values");

  const std::size_t n_obs = 40;
  for (std::size_t i = 0; i < n_obs; ++i)
    m.pts.push_back({pts_rng.uniform(0.5, 9.5), pts_rng.uniform(0.5, 9.5)});

  if (v != Variant::linear) {
    m.meshes.push_back(build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 7));
    FieldModel f;
    f.fem = assemble_fem(m.meshes.back());
    ProjectionMatrix proj = project_points(m.meshes.back(), m.pts);
    for (bool in : proj.inside) REQUIRE(in);
    f.basis = proj.A;
    f.range_prior = pc_range_prior(15.0, 0.5);
    f.sigma_prior = pc_sigma_prior(10.0, 0.01);
    m.spec.fields.push_back(std::move(f));
  }
  if (v == Variant::extended) {
    m.meshes.push_back(build_mesh(square(10.0), 2.5, 3.5, 31.0, 0.0, 3));
    FieldModel f;
    f.fem = assemble_fem(m.meshes.back());
    ProjectionMatrix proj = project_points(m.meshes.back(), m.pts);
    for (bool in : proj.inside) REQUIRE(in);
    f.basis = proj.A;
    f.range_prior = pc_range_prior(2.0, 0.98);
    f.sigma_prior = pc_sigma_prior(10.0, 0.01);
    m.spec.fields.push_back(std::move(f));
  }

  const Eigen::Index p = (v == Variant::spatial) ? 0 : 3;
  m.spec.design.resize(Eigen::Index(n_obs), p);
  if (p > 0) {
    for (std::size_t i = 0; i < n_obs; ++i) {
      m.spec.design(Eigen::Index(i), 0) = 1.0;
      m.spec.design(Eigen::Index(i), 1) = m.pts[i].x / 10.0;
      m.spec.design(Eigen::Index(i), 2) = cov_rng.normal();
    }
  }
  m.spec.values.resize(Eigen::Index(n_obs));
  for (std::size_t i = 0; i < n_obs; ++i)
    m.spec.values[Eigen::Index(i)] = 2.0 * y_rng.normal() + 0.5 * m.pts[i].y;
  return m;
}

Hyperparameters theta_for(const ModelSpec& spec) {
  Hyperparameters th;
  th.noise_sd = 0.7;
  if (!spec.fields.empty()) th.fields.push_back(SpdeParams{4.0, 1.3});
  if (spec.fields.size() > 1) th.fields.push_back(SpdeParams{1.2, 0.8});
  return th;
}

Eigen::Index joint_size(const ModelSpec& spec) {
  Eigen::Index n = spec.design.cols();
  for (const FieldModel& f : spec.fields) n += f.fem.lumped_mass.size();
  return n;
}

Eigen::MatrixXd dense_prior_precision(const ModelSpec& spec, const Hyperparameters& th) {
  const Eigen::Index n = joint_size(spec);
  const Eigen::Index p = spec.design.cols();
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, n);
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < spec.fields.size(); ++i) {
    const Eigen::Index ni = spec.fields[i].fem.lumped_mass.size();
    q.block(off, off, ni, ni) =
        Eigen::MatrixXd(spde_precision(spec.fields[i].fem, th.fields[i]));
    off += ni;
  }
  for (Eigen::Index j = 0; j < p; ++j)
    q(off + j, off + j) = 1.0 / spec.fixed_effects.variance;
  return q;
}

Eigen::MatrixXd dense_joint_design(const ModelSpec& spec) {
  const Eigen::Index m = spec.values.size();
  Eigen::MatrixXd bj(m, joint_size(spec));
  Eigen::Index off = 0;
  for (const FieldModel& f : spec.fields) {
    bj.middleCols(off, f.fem.lumped_mass.size()) = Eigen::MatrixXd(f.basis);
    off += f.fem.lumped_mass.size();
  }
  if (spec.design.cols() > 0) bj.rightCols(spec.design.cols()) = spec.design;
  return bj;
}

// Evidence of the collapsed Gaussian model, computed the textbook way from
// the dense observation covariance.
double dense_log_marginal(const ModelSpec& spec, const Hyperparameters& th) {
  const Eigen::Index m = spec.values.size();
  Eigen::MatrixXd qprior = dense_prior_precision(spec, th);
  Eigen::MatrixXd bj = dense_joint_design(spec);
  Eigen::MatrixXd cov = th.noise_sd * th.noise_sd * Eigen::MatrixXd::Identity(m, m) +
                        bj * qprior.llt().solve(bj.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  REQUIRE(llt.info() == Eigen::Success);
  Eigen::MatrixXd lmat = llt.matrixL();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) logdet += 2.0 * std::log(lmat(i, i));
  Eigen::VectorXd alpha = llt.solve(spec.values);
  return -0.5 * (double(m) * std::log(2.0 * M_PI) + logdet + spec.values.dot(alpha));
}

Eigen::MatrixXd dense_posterior_precision(const ModelSpec& spec, const Hyperparameters& th) {
  const double prec = 1.0 / (th.noise_sd * th.noise_sd);
  Eigen::MatrixXd bj = dense_joint_design(spec);
  return dense_prior_precision(spec, th) + prec * bj.transpose() * bj;
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const Eigen::ArrayXd da = a.array() - ma, db = b.array() - mb;
  return (da * db).sum() / std::sqrt(da.square().sum() * db.square().sum());
}

}  // namespace

TEST_CASE("all variants match a dense computation") {
  for (Variant v : {Variant::linear, Variant::spatial, Variant::mixed, Variant::extended}) {
    TestModel m = make_model(v, 91);
    const Hyperparameters th = theta_for(m.spec);
    ConditionalPosterior cp(m.spec, th);

    const double dense = dense_log_marginal(m.spec, th);
    CHECK(std::abs(cp.log_marginal() - dense) <= 1e-8 * std::abs(dense));

    const double prec = 1.0 / (th.noise_sd * th.noise_sd);
    Eigen::MatrixXd qpost = dense_posterior_precision(m.spec, th);
    Eigen::MatrixXd bj = dense_joint_design(m.spec);
    Eigen::VectorXd mu = qpost.ldlt().solve(prec * bj.transpose() * m.spec.values);
    CHECK((cp.mean() - mu).norm() <= 1e-8 * mu.norm());

    // Marginal sd of functionals mixing nodes of every block.
    const Eigen::Index njoint = joint_size(m.spec);
    Eigen::MatrixXd cov = qpost.inverse();
    std::vector<Eigen::Triplet<double>> trips;
    RngStream rng = RngStream(17).derive("functional");
    const Eigen::Index n_rows = 10;
    for (Eigen::Index r = 0; r < n_rows; ++r)
      for (int k = 0; k < 3; ++k)
        trips.emplace_back(int(r), int(rng.uniform_index(std::uint64_t(njoint))), rng.normal());
    Eigen::SparseMatrix<double> lin(n_rows, njoint);
    lin.setFromTriplets(trips.begin(), trips.end());

    Eigen::VectorXd sd = cp.linear_sd(lin);
    Eigen::MatrixXd lind(lin);
    for (Eigen::Index r = 0; r < n_rows; ++r) {
      const double exact = std::sqrt(lind.row(r) * cov * lind.row(r).transpose());
      CHECK(std::abs(sd[r] - exact) <= 1e-8 * exact);
    }

    Eigen::VectorXd sd_chunked = cp.linear_sd(lin, 3);
    CHECK((sd_chunked - sd).cwiseAbs().maxCoeff() <= 1e-13);
  }
}

TEST_CASE("intercept-only evidence matches the closed form at zero") {
  // Three zero observations, intercept with prior variance 1000, unit noise:
  // y ~ N(0, I + 1000 J), whose log density at 0 depends only on the
  // determinant 1 + 3 * 1000.
  ModelSpec spec;
  spec.design = Eigen::MatrixXd::Ones(3, 1);
  spec.values = Eigen::VectorXd::Zero(3);
  Hyperparameters th;
  th.noise_sd = 1.0;
  ConditionalPosterior cp(spec, th);
  const double expected = -1.5 * std::log(2.0 * M_PI) - 0.5 * std::log(3001.0);
  CHECK(std::abs(cp.log_marginal() - expected) <= 1e-12 * std::abs(expected));
}

TEST_CASE("unobserved field integrates out of the evidence exactly") {
  // Zero basis decouples the field; the evidence must reduce to the conjugate
  // intercept-plus-noise closed form, which also exercises the factored
  // log-determinant of the field precision against the joint factorization.
  TriMesh mesh = build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 7);
  const std::size_t n_obs = 25;
  RngStream rng = RngStream(23).derive("values");

  ModelSpec spec;
  FieldModel f;
  f.fem = assemble_fem(mesh);
  f.basis = Eigen::SparseMatrix<double>(Eigen::Index(n_obs), f.fem.lumped_mass.size());
  f.range_prior = pc_range_prior(15.0, 0.5);
  f.sigma_prior = pc_sigma_prior(10.0, 0.01);
  const Eigen::Index n_nodes = f.fem.lumped_mass.size();
  spec.fields.push_back(std::move(f));
  spec.design = Eigen::MatrixXd::Ones(Eigen::Index(n_obs), 1);
  spec.values.resize(Eigen::Index(n_obs));
  for (std::size_t i = 0; i < n_obs; ++i) spec.values[Eigen::Index(i)] = 1.5 + rng.normal();

  Hyperparameters th;
  th.noise_sd = 0.5;
  th.fields.push_back(SpdeParams{6.0, 1.1});
  ConditionalPosterior cp(spec, th);

  const double s2 = th.noise_sd * th.noise_sd;
  const double v = spec.fixed_effects.variance;
  const double n = double(n_obs);
  const double sum_y = spec.values.sum();
  const double logdet = n * std::log(s2) + std::log1p(n * v / s2);
  const double quad = spec.values.squaredNorm() / s2 - v / (s2 * (s2 + n * v)) * sum_y * sum_y;
  const double expected = -0.5 * (n * std::log(2.0 * M_PI) + logdet + quad);
  CHECK(std::abs(cp.log_marginal() - expected) <= 1e-10 * std::abs(expected));

  const double post_prec = 1.0 / v + n / s2;
  const double post_mean = (sum_y / s2) / post_prec;
  const double beta_hat = cp.mean()[n_nodes];
  CHECK(std::abs(beta_hat - post_mean) <= 1e-10 * std::abs(post_mean));

  Eigen::SparseMatrix<double> lin(1, n_nodes + 1);
  std::vector<Eigen::Triplet<double>> trips{Eigen::Triplet<double>(0, int(n_nodes), 1.0)};
  lin.setFromTriplets(trips.begin(), trips.end());
  const double sd = cp.linear_sd(lin)[0];
  CHECK(std::abs(sd - 1.0 / std::sqrt(post_prec)) <= 1e-10 / std::sqrt(post_prec));
}

TEST_CASE("evidence is one with no observations and priors integrate to one") {
  TriMesh mesh = build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 7);
  ModelSpec spec;
  FieldModel f;
  f.fem = assemble_fem(mesh);
  f.basis = Eigen::SparseMatrix<double>(0, f.fem.lumped_mass.size());
  f.range_prior = pc_range_prior(15.0, 0.5);
  f.sigma_prior = pc_sigma_prior(10.0, 0.01);
  spec.fields.push_back(std::move(f));
  spec.design = Eigen::MatrixXd(0, 0);
  spec.values = Eigen::VectorXd(0);

  Hyperparameters th;
  th.noise_sd = 0.5;
  th.fields.push_back(SpdeParams{6.0, 1.1});
  ConditionalPosterior cp(spec, th);
  CHECK(cp.log_marginal() == doctest::Approx(0.0).epsilon(1e-12));

  // With no data the hyper posterior is the prior density over the log
  // hyperparameters; the noise axis must integrate to one, which pins the
  // change of variables from the precision scale.
  const double fixed_terms =
      log_density(spec.fields[0].range_prior, th.fields[0].range) + std::log(th.fields[0].range) +
      log_density(spec.fields[0].sigma_prior, th.fields[0].sigma) + std::log(th.fields[0].sigma);
  auto noise_density = [&](double z) {
    Hyperparameters t = th;
    t.noise_sd = std::exp(z);
    return std::exp(log_hyper_posterior(spec, t) - fixed_terms);
  };
  const double lo = -8.0, hi = 14.0;
  const int steps = 4000;  // composite Simpson, even count
  const double hstep = (hi - lo) / double(steps);
  double integral = noise_density(lo) + noise_density(hi);
  for (int i = 1; i < steps; ++i)
    integral += noise_density(lo + double(i) * hstep) * ((i % 2 == 1) ? 4.0 : 2.0);
  integral *= hstep / 3.0;
  CHECK(std::abs(integral - 1.0) <= 1e-6);
}

TEST_CASE("observation order does not change the posterior") {
  TestModel m = make_model(Variant::mixed, 91);
  const Hyperparameters th = theta_for(m.spec);
  ConditionalPosterior base(m.spec, th);

  const Eigen::Index n_obs = m.spec.values.size();
  RngStream rng = RngStream(5).derive("shuffle");
  std::vector<std::size_t> perm = rng.sample_indices(std::size_t(n_obs), std::size_t(n_obs));

  ModelSpec shuffled = m.spec;
  shuffled.design.resize(n_obs, m.spec.design.cols());
  shuffled.values.resize(n_obs);
  Eigen::SparseMatrix<double, Eigen::RowMajor> by_row(m.spec.fields[0].basis);
  std::vector<Eigen::Triplet<double>> trips;
  for (Eigen::Index r = 0; r < n_obs; ++r) {
    const Eigen::Index src = Eigen::Index(perm[std::size_t(r)]);
    shuffled.design.row(r) = m.spec.design.row(src);
    shuffled.values[r] = m.spec.values[src];
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(by_row, src); it; ++it)
      trips.emplace_back(int(r), int(it.col()), it.value());
  }
  shuffled.fields[0].basis =
      Eigen::SparseMatrix<double>(n_obs, m.spec.fields[0].basis.cols());
  shuffled.fields[0].basis.setFromTriplets(trips.begin(), trips.end());

  ConditionalPosterior cp(shuffled, th);
  CHECK(std::abs(cp.log_marginal() - base.log_marginal()) <=
        1e-12 * std::abs(base.log_marginal()));
  CHECK((cp.mean() - base.mean()).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("more information never widens the predictive sd") {
  TriMesh mesh = build_mesh(square(10.0), 3.5, 5.0, 31.0, 0.0, 7);
  FemMatrices fem = assemble_fem(mesh);
  RngStream rng(41);
  RngStream pts_rng = rng.derive("points");
  RngStream y_rng = rng.derive("values");

  const std::size_t n_obs = 30;
  std::vector<Point2> pts;
  for (std::size_t i = 0; i < n_obs; ++i)
    pts.push_back({pts_rng.uniform(0.5, 9.5), pts_rng.uniform(0.5, 9.5)});
  const Point2 target{5.0, 5.0};

  auto make_spec = [&](bool with_target) {
    ModelSpec spec;
    FieldModel f;
    f.fem = fem;
    std::vector<Point2> all = pts;
    if (with_target) all.push_back(target);
    ProjectionMatrix proj = project_points(mesh, all);
    f.basis = proj.A;
    f.range_prior = pc_range_prior(15.0, 0.5);
    f.sigma_prior = pc_sigma_prior(10.0, 0.01);
    spec.fields.push_back(std::move(f));
    spec.design = Eigen::MatrixXd(Eigen::Index(all.size()), 0);
    spec.values.resize(Eigen::Index(all.size()));
    RngStream ys = y_rng;
    for (Eigen::Index i = 0; i < spec.values.size(); ++i) spec.values[i] = ys.normal();
    return spec;
  };

  Hyperparameters th;
  th.noise_sd = 0.4;
  th.fields.push_back(SpdeParams{5.0, 1.0});

  ProjectionMatrix target_proj = project_points(mesh, {target});
  REQUIRE(target_proj.inside[0]);

  ConditionalPosterior before(make_spec(false), th);
  ConditionalPosterior after(make_spec(true), th);
  const double sd_before = before.linear_sd(target_proj.A)[0];
  const double sd_after = after.linear_sd(target_proj.A)[0];
  CHECK(sd_after <= sd_before + 1e-12);
}

TEST_CASE("hyperparameters are recovered and predictions track the field") {
  TriMesh mesh = build_mesh(square(20.0), 2.0, 3.0, 31.0, 6.0, 5);
  FemMatrices fem = assemble_fem(mesh);

  const double true_range = 6.0, true_sigma = 1.5, true_noise = 0.3;
  Eigen::SparseMatrix<double> q = spde_precision(fem, SpdeParams{true_range, true_sigma});
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> chol(q);
  REQUIRE(chol.info() == Eigen::Success);
  RngStream root(20260819);
  RngStream field_rng = root.derive("field");
  Eigen::VectorXd u = sample_gmrf(chol, field_rng);

  RngStream pts_rng = root.derive("points");
  RngStream noise_rng = root.derive("noise");
  const std::size_t n_obs = 350;
  std::vector<Point2> pts;
  for (std::size_t i = 0; i < n_obs; ++i)
    pts.push_back({pts_rng.uniform(1.0, 19.0), pts_rng.uniform(1.0, 19.0)});
  ProjectionMatrix proj = project_points(mesh, pts);
  for (bool in : proj.inside) REQUIRE(in);

  ModelSpec spec;
  FieldModel f;
  f.fem = fem;
  f.basis = proj.A;
  f.range_prior = pc_range_prior(15.0, 0.5);
  f.sigma_prior = pc_sigma_prior(10.0, 0.01);
  spec.fields.push_back(std::move(f));
  spec.design.resize(Eigen::Index(n_obs), 2);
  const Eigen::Vector2d beta_true(0.8, -0.6);
  for (std::size_t i = 0; i < n_obs; ++i) {
    spec.design(Eigen::Index(i), 0) = 1.0;
    spec.design(Eigen::Index(i), 1) = (pts[i].x + pts[i].y) / 20.0 - 1.0;
  }
  spec.values = spec.fields[0].basis * u + spec.design * beta_true;
  for (std::size_t i = 0; i < n_obs; ++i)
    spec.values[Eigen::Index(i)] += true_noise * noise_rng.normal();

  FitConfig cfg;
  cfg.grid_steps = 1;
  cfg.threads = 4;
  ModelFit fit = fit_model(spec, cfg);

  CHECK(!fit.curvature_fallback);
  CHECK(fit.grid.size() == 27);
  CHECK(fit.conditional_means.size() == fit.grid.size());

  double total = 0.0;
  double max_lp = -1e300;
  std::size_t max_at = 0;
  for (std::size_t k = 0; k < fit.grid.size(); ++k) {
    CHECK(fit.grid[k].weight >= 0.0);
    total += fit.grid[k].weight;
    if (fit.grid[k].log_posterior > max_lp) {
      max_lp = fit.grid[k].log_posterior;
      max_at = k;
    }
  }
  CHECK(std::abs(total - 1.0) <= 1e-12);
  // The optimizer's mode sits on the grid and carries the top weight.
  CHECK(max_at == fit.mode_index);
  CHECK(fit.grid[fit.mode_index].theta.noise_sd ==
        doctest::Approx(fit.mode.noise_sd).epsilon(1e-12));

  CHECK(fit.mode.fields[0].range > true_range / 1.8);
  CHECK(fit.mode.fields[0].range < true_range * 1.8);
  CHECK(fit.mode.fields[0].sigma > true_sigma / 1.7);
  CHECK(fit.mode.fields[0].sigma < true_sigma * 1.7);
  CHECK(fit.mode.noise_sd > 0.21);
  CHECK(fit.mode.noise_sd < 0.42);

  REQUIRE(fit.beta_mean.size() == 2);
  REQUIRE(fit.beta_sd.size() == 2);
  // Both covariates are smooth surfaces and partly confounded with the field,
  // so their posterior sd stays order one; it must still be far below the
  // prior sd, which would indicate no learning at all.
  for (int j = 0; j < 2; ++j) {
    CHECK(fit.beta_sd[std::size_t(j)] > 0.0);
    CHECK(fit.beta_sd[std::size_t(j)] < 3.0);
    CHECK(std::abs(fit.beta_mean[std::size_t(j)] - beta_true[j]) <=
          4.0 * fit.beta_sd[std::size_t(j)] + 0.05);
  }

  // Posterior mean surface tracks the simulated truth inside the data region.
  std::vector<Point2> grid_pts;
  for (int iy = 0; iy < 15; ++iy)
    for (int ix = 0; ix < 15; ++ix)
      grid_pts.push_back({2.0 + 16.0 * double(ix) / 14.0, 2.0 + 16.0 * double(iy) / 14.0});
  ProjectionMatrix gproj = project_points(mesh, grid_pts);
  for (bool in : gproj.inside) REQUIRE(in);
  Eigen::MatrixXd gdesign(Eigen::Index(grid_pts.size()), 2);
  for (std::size_t i = 0; i < grid_pts.size(); ++i) {
    gdesign(Eigen::Index(i), 0) = 1.0;
    gdesign(Eigen::Index(i), 1) = (grid_pts[i].x + grid_pts[i].y) / 20.0 - 1.0;
  }
  Eigen::VectorXd truth = gproj.A * u + gdesign * beta_true;
  PredictionSummary ps = predict_mixture(spec, fit, {gproj.A}, gdesign, false, 256, 4);
  const double r = pearson(ps.mean, truth);
  CHECK(r * r >= 0.6);
  CHECK(ps.sd.minCoeff() > 0.0);
}

TEST_CASE("dual-field fit integrates a five-dimensional grid") {
  TestModel m = make_model(Variant::extended, 91);
  FitConfig cfg;
  cfg.grid_steps = 1;
  cfg.threads = 4;
  ModelFit fit = fit_model(m.spec, cfg);
  CHECK(fit.grid.size() == 243);  // 3^5
  CHECK(fit.conditional_means.size() == fit.grid.size());
  double total = 0.0;
  for (const GridPoint& g : fit.grid) total += g.weight;
  CHECK(std::abs(total - 1.0) <= 1e-12);
  CHECK(fit.mode.fields.size() == 2);
  CHECK(fit.conditional_means[0].size() == joint_size(m.spec));
}

TEST_CASE("noiseless regression recovers the coefficients") {
  RngStream rng(67);
  RngStream x_rng = rng.derive("design");
  RngStream e_rng = rng.derive("jitter");
  const Eigen::Index n = 60;
  ModelSpec spec;
  spec.design.resize(n, 3);
  const Eigen::Vector3d beta_true(2.0, -1.0, 0.5);
  for (Eigen::Index i = 0; i < n; ++i) {
    spec.design(i, 0) = 1.0;
    spec.design(i, 1) = x_rng.normal();
    spec.design(i, 2) = x_rng.normal();
  }
  spec.values = spec.design * beta_true;
  for (Eigen::Index i = 0; i < n; ++i) spec.values[i] += 1e-4 * e_rng.normal();

  FitConfig cfg;
  cfg.init.noise_sd = 0.01;
  cfg.grid_steps = 1;
  ModelFit fit = fit_model(spec, cfg);
  CHECK(fit.grid.size() == 3);  // one hyperparameter only
  REQUIRE(fit.beta_mean.size() == 3);
  for (int j = 0; j < 3; ++j)
    CHECK(std::abs(fit.beta_mean[std::size_t(j)] - beta_true[j]) <= 1e-3);
}

TEST_CASE("prediction at an observed point reproduces the observation") {
  // A surface that is linear in the coordinates is exactly representable by
  // the piecewise-linear basis, so with near-noiseless data the conditional
  // mean must interpolate it at the observation sites.
  TestModel m = make_model(Variant::spatial, 140);
  for (std::size_t i = 0; i < m.pts.size(); ++i)
    m.spec.values[Eigen::Index(i)] = 0.3 + 0.1 * m.pts[i].x + 0.2 * m.pts[i].y;

  Hyperparameters th;
  th.noise_sd = 0.05;
  th.fields.push_back(SpdeParams{5.0, 1.5});

  ModelFit fit;
  fit.mode = th;
  fit.grid.push_back({th, 0.0, 1.0});

  ProjectionMatrix proj = project_points(m.meshes[0], {m.pts[3]});
  REQUIRE(proj.inside[0]);
  Eigen::MatrixXd design(1, 0);
  PredictionSummary ps = predict_mixture(m.spec, fit, {proj.A}, design, false);
  CHECK(std::abs(ps.mean[0] - m.spec.values[3]) <= 2.0 * ps.sd[0] + 0.05);
}

TEST_CASE("mixture prediction matches per-component algebra") {
  TestModel m = make_model(Variant::mixed, 91);

  ModelFit fit;
  fit.mode.noise_sd = 0.45;
  fit.mode.fields.push_back(SpdeParams{7.0, 0.9});
  Hyperparameters t1;
  t1.noise_sd = 0.7;
  t1.fields.push_back(SpdeParams{4.0, 1.3});
  Hyperparameters t2;
  t2.noise_sd = 0.45;
  t2.fields.push_back(SpdeParams{7.0, 0.9});
  fit.grid.push_back({t1, -10.0, 0.35});
  fit.grid.push_back({t2, -9.0, 0.65});

  RngStream rng = RngStream(303).derive("targets");
  const std::size_t n_new = 12;
  std::vector<Point2> pts;
  for (std::size_t i = 0; i < n_new; ++i)
    pts.push_back({rng.uniform(1.0, 9.0), rng.uniform(1.0, 9.0)});
  ProjectionMatrix proj = project_points(m.meshes[0], pts);
  Eigen::MatrixXd design_new(Eigen::Index(n_new), 3);
  for (std::size_t i = 0; i < n_new; ++i) {
    design_new(Eigen::Index(i), 0) = 1.0;
    design_new(Eigen::Index(i), 1) = pts[i].x / 10.0;
    design_new(Eigen::Index(i), 2) = 0.2;
  }

  for (bool with_noise : {false, true}) {
    PredictionSummary ps = predict_mixture(m.spec, fit, {proj.A}, design_new, with_noise);
    REQUIRE(ps.mean.size() == Eigen::Index(n_new));

    Eigen::VectorXd m1 = Eigen::VectorXd::Zero(Eigen::Index(n_new));
    Eigen::VectorXd m2 = Eigen::VectorXd::Zero(Eigen::Index(n_new));
    Eigen::MatrixXd lin(Eigen::Index(n_new), joint_size(m.spec));
    lin.leftCols(m.spec.fields[0].fem.lumped_mass.size()) = Eigen::MatrixXd(proj.A);
    lin.rightCols(3) = design_new;
    for (const GridPoint& gp : fit.grid) {
      const double prec = 1.0 / (gp.theta.noise_sd * gp.theta.noise_sd);
      Eigen::MatrixXd qpost = dense_posterior_precision(m.spec, gp.theta);
      Eigen::MatrixXd bj = dense_joint_design(m.spec);
      Eigen::VectorXd mu = qpost.ldlt().solve(prec * bj.transpose() * m.spec.values);
      Eigen::MatrixXd cov = qpost.inverse();
      Eigen::VectorXd pmu = lin * mu;
      Eigen::VectorXd pvar = (lin * cov * lin.transpose()).diagonal();
      if (with_noise) pvar.array() += gp.theta.noise_sd * gp.theta.noise_sd;
      m1 += gp.weight * pmu;
      m2.array() += gp.weight * (pvar.array() + pmu.array().square());
    }
    for (Eigen::Index i = 0; i < Eigen::Index(n_new); ++i) {
      const double mean = m1[i];
      const double sd = std::sqrt(m2[i] - mean * mean);
      CHECK(std::abs(ps.mean[i] - mean) <= 1e-8 * (1.0 + std::abs(mean)));
      CHECK(std::abs(ps.sd[i] - sd) <= 1e-8 * sd);
    }
  }
}

TEST_CASE("posterior draws reproduce the conditional moments") {
  TestModel m = make_model(Variant::mixed, 91);
  Hyperparameters th = theta_for(m.spec);

  ModelFit single;
  single.mode = th;
  single.grid.push_back({th, 0.0, 1.0});

  const int n_draws = 10000;
  RngStream rng = RngStream(555).derive("fixed-point-draws");
  Eigen::MatrixXd draws = sample_posterior(m.spec, single, n_draws, rng);
  const Eigen::Index njoint = joint_size(m.spec);
  REQUIRE(draws.rows() == njoint);

  ConditionalPosterior cp(m.spec, th);
  std::vector<Eigen::Triplet<double>> trips;
  for (Eigen::Index i = 0; i < njoint; ++i) trips.emplace_back(int(i), int(i), 1.0);
  Eigen::SparseMatrix<double> eye(njoint, njoint);
  eye.setFromTriplets(trips.begin(), trips.end());
  Eigen::VectorXd sd = cp.linear_sd(eye);

  Eigen::VectorXd emp_mean = draws.rowwise().mean();
  for (Eigen::Index i = 0; i < njoint; ++i) {
    const double se = sd[i] / std::sqrt(double(n_draws));
    CHECK(std::abs(emp_mean[i] - cp.mean()[i]) <= 3.0 * se);
  }

  // Covariance of two adjacent mesh nodes against the dense inverse.
  const Eigen::Index ia = m.meshes[0].triangles[0][0];
  const Eigen::Index ib = m.meshes[0].triangles[0][1];
  Eigen::MatrixXd cov_dense = dense_posterior_precision(m.spec, th).inverse();
  double acc = 0.0;
  for (int c = 0; c < n_draws; ++c)
    acc += (draws(ia, c) - emp_mean[ia]) * (draws(ib, c) - emp_mean[ib]);
  const double emp_cov = acc / double(n_draws);
  CHECK(std::abs(emp_cov - cov_dense(ia, ib)) <= 0.10 * std::abs(cov_dense(ia, ib)));
}

TEST_CASE("posterior sampling is deterministic and mixes components") {
  TestModel m = make_model(Variant::mixed, 91);

  ModelFit fit;
  fit.mode.noise_sd = 0.45;
  fit.mode.fields.push_back(SpdeParams{7.0, 0.9});
  Hyperparameters t1;
  t1.noise_sd = 0.7;
  t1.fields.push_back(SpdeParams{4.0, 1.3});
  Hyperparameters t2;
  t2.noise_sd = 0.45;
  t2.fields.push_back(SpdeParams{7.0, 0.9});
  fit.grid.push_back({t1, -10.0, 0.35});
  fit.grid.push_back({t2, -9.0, 0.65});

  const int n_draws = 4000;
  RngStream rng_a = RngStream(777).derive("posterior-draws");
  Eigen::MatrixXd draws = sample_posterior(m.spec, fit, n_draws, rng_a);
  REQUIRE(draws.rows() == joint_size(m.spec));
  REQUIRE(draws.cols() == n_draws);

  RngStream rng_b = RngStream(777).derive("posterior-draws");
  Eigen::MatrixXd again = sample_posterior(m.spec, fit, n_draws, rng_b);
  CHECK((draws - again).cwiseAbs().maxCoeff() == 0.0);

  // Mixture moments of the intercept coefficient.
  const Eigen::Index idx = m.spec.fields[0].fem.lumped_mass.size();
  double mix_mean = 0.0, mix_m2 = 0.0;
  Eigen::SparseMatrix<double> lin(1, joint_size(m.spec));
  std::vector<Eigen::Triplet<double>> trips{Eigen::Triplet<double>(0, int(idx), 1.0)};
  lin.setFromTriplets(trips.begin(), trips.end());
  for (const GridPoint& gp : fit.grid) {
    ConditionalPosterior cp(m.spec, gp.theta);
    const double mu = cp.mean()[idx];
    const double sd = cp.linear_sd(lin)[0];
    mix_mean += gp.weight * mu;
    mix_m2 += gp.weight * (sd * sd + mu * mu);
  }
  const double mix_var = mix_m2 - mix_mean * mix_mean;

  double s1 = 0.0, s2 = 0.0;
  for (int c = 0; c < n_draws; ++c) {
    s1 += draws(idx, c);
    s2 += draws(idx, c) * draws(idx, c);
  }
  const double emp_mean = s1 / double(n_draws);
  const double emp_var = s2 / double(n_draws) - emp_mean * emp_mean;
  const double se = std::sqrt(mix_var / double(n_draws));
  CHECK(std::abs(emp_mean - mix_mean) <= 5.0 * se);
  CHECK(std::abs(emp_var - mix_var) <= 0.15 * mix_var);
}

TEST_CASE("fit artifacts survive a json round trip") {
  ModelFit fit;
  fit.mode.noise_sd = 0.31415926535897931;
  fit.mode.fields.push_back(SpdeParams{12.3456789, 0.987654321});
  fit.mode.fields.push_back(SpdeParams{1.75, 0.25});
  fit.mode_index = 1;
  fit.curvature_fallback = true;
  Hyperparameters t1 = fit.mode;
  Hyperparameters t2 = fit.mode;
  t2.fields[0].range = 13.5;
  fit.grid.push_back({t1, -1234.5678901234567, 0.25});
  fit.grid.push_back({t2, -1233.4567890123456, 0.75});
  fit.conditional_means.push_back((Eigen::VectorXd(3) << 1.0, -2.5, 3.25e-9).finished());
  fit.conditional_means.push_back((Eigen::VectorXd(3) << 0.0, 7.75, -1.0).finished());
  fit.beta_mean = {0.5, -1.25, 3.0e-7};
  fit.beta_sd = {0.01, 0.2, 1.5};
  fit.design_names = {"intercept", "lith_2", "rainfall"};
  fit.data_checksum = 0xdeadbeef12345678ull;

  const std::string text = fit_to_json(fit);
  ModelFit back = fit_from_json(text);
  CHECK(back.mode.noise_sd == fit.mode.noise_sd);
  REQUIRE(back.mode.fields.size() == 2);
  CHECK(back.mode.fields[0].range == fit.mode.fields[0].range);
  CHECK(back.mode.fields[1].sigma == fit.mode.fields[1].sigma);
  CHECK(back.mode_index == fit.mode_index);
  CHECK(back.curvature_fallback == fit.curvature_fallback);
  REQUIRE(back.grid.size() == fit.grid.size());
  for (std::size_t k = 0; k < fit.grid.size(); ++k) {
    CHECK(back.grid[k].theta.noise_sd == fit.grid[k].theta.noise_sd);
    CHECK(back.grid[k].theta.fields[0].range == fit.grid[k].theta.fields[0].range);
    CHECK(back.grid[k].log_posterior == fit.grid[k].log_posterior);
    CHECK(back.grid[k].weight == fit.grid[k].weight);
  }
  REQUIRE(back.conditional_means.size() == 2);
  CHECK((back.conditional_means[0] - fit.conditional_means[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.conditional_means[1] - fit.conditional_means[1]).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.beta_mean == fit.beta_mean);
  CHECK(back.beta_sd == fit.beta_sd);
  CHECK(back.design_names == fit.design_names);
  CHECK(back.data_checksum == fit.data_checksum);

  // Future format versions are an explicit error, not a silent misread.
  std::string bumped = text;
  const std::string tag = "\"format_version\": 1";
  bumped.replace(bumped.find(tag), tag.size(), "\"format_version\": 2");
  CHECK_THROWS_AS(fit_from_json(bumped), const std::runtime_error&);
}

TEST_CASE("invalid inputs are rejected") {
  TestModel m = make_model(Variant::mixed, 91);
  const Hyperparameters th = theta_for(m.spec);

  ModelSpec bad = m.spec;
  bad.design = Eigen::MatrixXd::Ones(bad.values.size() - 1, 3);
  CHECK_THROWS_AS(ConditionalPosterior(bad, th), const std::invalid_argument&);

  Hyperparameters zero_noise = th;
  zero_noise.noise_sd = 0.0;
  CHECK_THROWS_AS(ConditionalPosterior(m.spec, zero_noise), const std::invalid_argument&);
  Hyperparameters neg_range = th;
  neg_range.fields[0].range = -4.0;
  CHECK_THROWS_AS(ConditionalPosterior(m.spec, neg_range), const std::invalid_argument&);
  Hyperparameters wrong_count = th;
  wrong_count.fields.clear();
  CHECK_THROWS_AS(ConditionalPosterior(m.spec, wrong_count), const std::invalid_argument&);

  FitConfig cfg;
  cfg.grid_steps = -1;
  CHECK_THROWS_AS(fit_model(m.spec, cfg), const std::invalid_argument&);

  // An all-zeros covariate column is a rank failure, not a silent fit.
  ModelSpec degenerate = m.spec;
  degenerate.design.col(2).setZero();
  CHECK_THROWS_AS(fit_model(degenerate), const std::invalid_argument&);

  ModelSpec tiny = m.spec;
  tiny.fields.clear();
  tiny.design = Eigen::MatrixXd::Ones(2, 3);
  tiny.values = Eigen::VectorXd::Zero(2);
  CHECK_THROWS_AS(fit_model(tiny), const std::invalid_argument&);

  ConditionalPosterior cp(m.spec, th);
  Eigen::SparseMatrix<double> lin(1, 4);
  CHECK_THROWS_AS(cp.linear_sd(lin), const std::invalid_argument&);

  ModelFit fit;
  fit.grid.push_back({th, 0.0, 1.0});
  Eigen::MatrixXd design_bad = Eigen::MatrixXd::Ones(2, 2);
  Eigen::SparseMatrix<double> basis_new(2, m.spec.fields[0].fem.lumped_mass.size());
  CHECK_THROWS_AS(predict_mixture(m.spec, fit, {basis_new}, design_bad, false),
                  const std::invalid_argument&);
}

TEST_CASE("a failed mode search reports the best point found") {
  TestModel m = make_model(Variant::mixed, 91);
  FitConfig cfg;
  cfg.nelder_mead_iters = 2;  // cannot converge from the default start
  try {
    fit_model(m.spec, cfg);
    FAIL("expected non-convergence");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("did not converge") != std::string::npos);
    CHECK(msg.find("noise_sd") != std::string::npos);
  }
}

TEST_CASE("log-scale summaries map to the observation scale") {
  CHECK(lognormal_median(std::log(5.0)) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(lognormal_mean(std::log(5.0), 0.0) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(lognormal_mean(0.0, 2.0 * std::log(2.0)) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(lognormal_mean(1.0, 0.5) > lognormal_median(1.0));
}
