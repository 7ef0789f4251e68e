// Copyright 2026 The voxlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "voxlens/mixed_model.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

namespace voxlens {

namespace {

constexpr double kLogRatioMin = -30.0;  // ratio ~1e-13, reported as zero
constexpr double kLogRatioMax = 15.0;
constexpr double kStallSize = 1e-5;
constexpr int kStallIterations = 100;
// Coordinates pinned at the zero-variance bound leave the deviance flat, so
// the simplex cannot shrink there; a long plateau also ends the search.
constexpr int kPlateauIterations = 500;
constexpr double kPlateauGain = 1e-10;

double clamp_log_ratio(double t) { return std::clamp(t, kLogRatioMin, kLogRatioMax); }

double ratio_from_log(double t) {
  const double c = clamp_log_ratio(t);
  return c <= kLogRatioMin ? 0.0 : std::exp(c);
}

// Cross products of the canonically ordered data.
struct Normal {
  int n = 0;
  int p = 0;
  int q = 0;
  std::vector<int> offsets;  // first Z column of each factor
  Matrix ztz;
  Matrix ztx;
  Matrix xtx;
  Vector zty;
  Vector xty;
  // Canonically ordered data, for residuals.
  Matrix x;
  Vector y;
  std::vector<std::vector<int>> cols;  // per factor, Z column of each row
};

std::vector<int> canonical_order(const MixedModelSpec& spec) {
  std::vector<int> order(spec.n_obs());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    for (const auto& f : spec.factors)
      if (f.ids[a] != f.ids[b]) return f.ids[a] < f.ids[b];
    for (Eigen::Index c = 0; c < spec.design.cols(); ++c)
      if (spec.design(a, c) != spec.design(b, c)) return spec.design(a, c) < spec.design(b, c);
    if (spec.response[a] != spec.response[b]) return spec.response[a] < spec.response[b];
    return false;
  });
  return order;
}

Normal build_normal(const MixedModelSpec& spec) {
  Normal nm;
  nm.n = spec.n_obs();
  nm.p = static_cast<int>(spec.design.cols());
  for (const auto& f : spec.factors) {
    nm.offsets.push_back(nm.q);
    nm.q += f.n_levels();
  }
  nm.ztz = Matrix::Zero(nm.q, nm.q);
  nm.ztx = Matrix::Zero(nm.q, nm.p);
  nm.xtx = Matrix::Zero(nm.p, nm.p);
  nm.zty = Vector::Zero(nm.q);
  nm.xty = Vector::Zero(nm.p);
  const std::size_t g = spec.factors.size();
  std::vector<int> cols(g);
  const std::vector<int> order = canonical_order(spec);
  nm.x.resize(nm.n, nm.p);
  nm.y.resize(nm.n);
  nm.cols.assign(g, std::vector<int>(nm.n));
  for (int r = 0; r < nm.n; ++r) {
    nm.x.row(r) = spec.design.row(order[r]);
    nm.y(r) = spec.response[order[r]];
    for (std::size_t a = 0; a < g; ++a) nm.cols[a][r] = nm.offsets[a] + spec.factors[a].ids[order[r]];
  }
  for (int i : order) {
    const double y = spec.response[i];
    for (std::size_t a = 0; a < g; ++a) cols[a] = nm.offsets[a] + spec.factors[a].ids[i];
    for (std::size_t a = 0; a < g; ++a) {
      for (std::size_t b = 0; b < g; ++b) nm.ztz(cols[a], cols[b]) += 1.0;
      nm.ztx.row(cols[a]) += spec.design.row(i);
      nm.zty(cols[a]) += y;
    }
    nm.xtx.noalias() += spec.design.row(i).transpose() * spec.design.row(i);
    nm.xty += spec.design.row(i).transpose() * y;
  }
  return nm;
}

struct Evaluation {
  bool ok = false;
  double deviance = 0.0;
  double pwrss = 0.0;
  Vector beta;
  Matrix xtvx_inv;  // (Xᵀ H⁻¹ X)⁻¹
};

Evaluation evaluate(const Normal& nm, std::span<const double> ratios, bool want_beta) {
  const int q = nm.q, p = nm.p;
  Vector d(q);
  for (std::size_t a = 0; a < nm.offsets.size(); ++a) {
    const int end = a + 1 < nm.offsets.size() ? nm.offsets[a + 1] : q;
    d.segment(nm.offsets[a], end - nm.offsets[a]).setConstant(std::sqrt(ratios[a]));
  }
  Eigen::MatrixXd c(q + p, q + p);
  c.topLeftCorner(q, q) = d.asDiagonal() * nm.ztz * d.asDiagonal();
  c.topLeftCorner(q, q).diagonal().array() += 1.0;
  c.topRightCorner(q, p) = d.asDiagonal() * nm.ztx;
  c.bottomLeftCorner(p, q) = c.topRightCorner(q, p).transpose();
  c.bottomRightCorner(p, p) = nm.xtx;
  Vector s(q + p);
  s.head(q) = d.cwiseProduct(nm.zty);
  s.tail(p) = nm.xty;
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  Evaluation e;
  if (llt.info() != Eigen::Success) return e;
  const Vector sol = llt.solve(s);
  // Penalized residual sum of squares from explicit residuals; the shortcut
  // yᵀy − sᵀ·sol loses digits to cancellation.
  const Vector u = sol.head(q);
  const Vector b = d.cwiseProduct(u);
  Vector resid = nm.y - nm.x * sol.tail(p);
  for (const auto& cols : nm.cols)
    for (int r = 0; r < nm.n; ++r) resid(r) -= b(cols[r]);
  e.pwrss = resid.squaredNorm() + u.squaredNorm();
  if (!(e.pwrss > 0.0)) return e;
  const auto l = llt.matrixL();
  double logdet = 0.0;
  for (int i = 0; i < q + p; ++i) logdet += 2.0 * std::log(l(i, i));
  const double dof = nm.n - p;
  e.deviance = logdet + dof * (1.0 + std::log(2.0 * std::numbers::pi * e.pwrss / dof));
  if (!std::isfinite(e.deviance)) return e;
  e.ok = true;
  if (want_beta) {
    e.beta = sol.tail(p);
    Eigen::MatrixXd unit = Eigen::MatrixXd::Zero(q + p, p);
    unit.bottomRows(p).setIdentity();
    e.xtvx_inv = llt.solve(unit).bottomRows(p);
  }
  return e;
}

struct SearchState {
  const Normal* nm;
};

double simplex_objective(const gsl_vector* x, void* params) {
  const auto* st = static_cast<const SearchState*>(params);
  std::vector<double> ratios(x->size);
  for (std::size_t i = 0; i < x->size; ++i) ratios[i] = ratio_from_log(gsl_vector_get(x, i));
  const Evaluation e = evaluate(*st->nm, ratios, false);
  return e.ok ? e.deviance : GSL_POSINF;
}

struct SearchResult {
  std::vector<double> log_ratios;
  double deviance = 0.0;
  int iterations = 0;
  bool converged = false;
  double size = 0.0;
};

SearchResult run_simplex(const Normal& nm, std::vector<double> start, double step,
                         const LmmOptions& options) {
  const std::size_t g = start.size();
  SearchState st{&nm};
  gsl_multimin_function fn{&simplex_objective, g, &st};
  gsl_vector* x = gsl_vector_alloc(g);
  gsl_vector* steps = gsl_vector_alloc(g);
  for (std::size_t i = 0; i < g; ++i) gsl_vector_set(x, i, clamp_log_ratio(start[i]));
  gsl_vector_set_all(steps, step);
  gsl_multimin_fminimizer* m =
      gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, g);
  gsl_multimin_fminimizer_set(m, &fn, x, steps);
  SearchResult r;
  double best = GSL_POSINF;
  int stalled = 0;
  double plateau_best = GSL_POSINF;
  int plateau = 0;
  while (r.iterations < options.max_iterations) {
    ++r.iterations;
    if (gsl_multimin_fminimizer_iterate(m) != GSL_SUCCESS) break;
    r.size = gsl_multimin_fminimizer_size(m);
    if (gsl_multimin_test_size(r.size, options.tolerance) == GSL_SUCCESS) {
      r.converged = true;
      break;
    }
    // A small simplex that no longer lowers the deviance has reached the
    // resolution of the objective; the Newton polish takes over from there.
    plateau = m->fval < plateau_best - kPlateauGain * (1.0 + std::abs(plateau_best)) ? 0 : plateau + 1;
    if (plateau == 0) plateau_best = m->fval;
    stalled = m->fval < best ? 0 : stalled + 1;
    best = std::min(best, m->fval);
    if ((r.size < kStallSize && stalled >= kStallIterations) || plateau >= kPlateauIterations) {
      r.converged = true;
      break;
    }
  }
  r.deviance = m->fval;
  for (std::size_t i = 0; i < g; ++i) r.log_ratios.push_back(clamp_log_ratio(gsl_vector_get(m->x, i)));
  gsl_multimin_fminimizer_free(m);
  gsl_vector_free(steps);
  gsl_vector_free(x);
  return r;
}

double deviance_at(const Normal& nm, std::span<const double> log_ratios) {
  std::vector<double> ratios;
  for (double t : log_ratios) ratios.push_back(ratio_from_log(t));
  const Evaluation e = evaluate(nm, ratios, false);
  return e.ok ? e.deviance : INFINITY;
}

// Newton steps on finite-difference derivatives for the interior
// coordinates. The simplex alone stalls where deviance differences reach
// rounding level; gradients resolve the optimum far more finely.
void newton_polish(const Normal& nm, SearchResult& r) {
  std::vector<int> free;
  for (std::size_t i = 0; i < r.log_ratios.size(); ++i)
    if (r.log_ratios[i] > kLogRatioMin + 1.0 && r.log_ratios[i] < kLogRatioMax - 1.0)
      free.push_back(static_cast<int>(i));
  const int k = static_cast<int>(free.size());
  if (k == 0) return;
  const double hg = 1e-4, hh = 1e-3;
  for (int iter = 0; iter < 20; ++iter) {
    std::vector<double> t = r.log_ratios;
    auto f = [&](int a, double da, int b, double db) {
      std::vector<double> u = t;
      u[free[a]] += da;
      if (b >= 0) u[free[b]] += db;
      return deviance_at(nm, u);
    };
    const double f0 = r.deviance;
    Eigen::VectorXd grad(k);
    Eigen::MatrixXd hess(k, k);
    for (int a = 0; a < k; ++a) {
      grad(a) = (f(a, hg, -1, 0) - f(a, -hg, -1, 0)) / (2 * hg);
      hess(a, a) = (f(a, hh, -1, 0) - 2 * f0 + f(a, -hh, -1, 0)) / (hh * hh);
      for (int b = 0; b < a; ++b) {
        hess(a, b) = hess(b, a) = (f(a, hh, b, hh) - f(a, hh, b, -hh) - f(a, -hh, b, hh) +
                                   f(a, -hh, b, -hh)) / (4 * hh * hh);
      }
    }
    if (!grad.allFinite() || !hess.allFinite()) return;
    Eigen::LLT<Eigen::MatrixXd> llt(hess);
    if (llt.info() != Eigen::Success) return;
    const Eigen::VectorXd step = -llt.solve(grad);
    if (step.cwiseAbs().maxCoeff() > 1.0) return;  // far from a quadratic bowl
    std::vector<double> next = t;
    for (int a = 0; a < k; ++a) next[free[a]] = clamp_log_ratio(t[free[a]] + step(a));
    const double fn = deviance_at(nm, next);
    if (!(fn <= f0 + 1e-12 * std::abs(f0))) return;
    r.log_ratios = next;
    r.deviance = fn;
    if (step.cwiseAbs().maxCoeff() < 1e-10) return;
  }
}

// Makes GSL report errors through return codes instead of aborting.
struct GslErrorGuard {
  gsl_error_handler_t* previous;
  GslErrorGuard() : previous(gsl_set_error_handler_off()) {}
  ~GslErrorGuard() { gsl_set_error_handler(previous); }
};

}  // namespace

int GroupingFactor::n_levels() const {
  return ids.empty() ? 0 : *std::max_element(ids.begin(), ids.end()) + 1;
}

std::vector<int> dense_ids(std::span<const std::int64_t> keys) {
  std::unordered_map<std::int64_t, int> map;
  std::vector<int> out;
  out.reserve(keys.size());
  for (auto k : keys) out.push_back(map.emplace(k, static_cast<int>(map.size())).first->second);
  return out;
}

void MixedModelSpec::validate() const {
  const auto n = static_cast<Eigen::Index>(response.size());
  if (n == 0) throw InsufficientDataError("mixed model has no observations");
  if (design.rows() != n)
    throw DimensionError("design has " + std::to_string(design.rows()) + " rows for " +
                         std::to_string(n) + " observations");
  if (design.cols() == 0) throw DimensionError("design has no columns");
  if (static_cast<Eigen::Index>(fixed_names.size()) != design.cols())
    throw DimensionError("fixed_names does not match design columns");
  for (double y : response)
    if (!std::isfinite(y)) throw NumericError("non-finite response");
  if (!design.allFinite()) throw NumericError("non-finite design entry");
  for (const auto& f : factors) {
    if (static_cast<Eigen::Index>(f.ids.size()) != n)
      throw DimensionError("factor " + f.name + " has the wrong length");
    std::vector<char> seen(f.n_levels(), 0);
    for (int id : f.ids) {
      if (id < 0) throw ConfigError("factor " + f.name + " has a negative id");
      seen[id] = 1;
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
      throw ConfigError("factor " + f.name + " ids are not dense");
  }
}

int MixedFit::index_of(const std::string& name) const {
  auto it = std::find(fixed_names.begin(), fixed_names.end(), name);
  if (it == fixed_names.end()) throw ConfigError("no fixed effect named " + name);
  return static_cast<int>(it - fixed_names.begin());
}

double reml_loglik(const MixedModelSpec& spec, std::span<const double> ratios) {
  spec.validate();
  if (ratios.size() != spec.factors.size()) throw DimensionError("one ratio per factor");
  const Evaluation e = evaluate(build_normal(spec), ratios, false);
  if (!e.ok) throw NumericError("restricted likelihood is undefined at these ratios");
  return -0.5 * e.deviance;
}

MixedFit fit_lmm(const MixedModelSpec& spec, const LmmOptions& options) {
  spec.validate();
  const int n = spec.n_obs();
  const int p = static_cast<int>(spec.design.cols());
  const std::size_t g = spec.factors.size();
  if (Eigen::ColPivHouseholderQR<Matrix>(spec.design).rank() < p)
    throw DimensionError("fixed-effect design is rank deficient");
  if (n <= p) throw InsufficientDataError("need more observations than fixed effects");
  const Normal nm = build_normal(spec);

  MixedFit fit;
  fit.fixed_names = spec.fixed_names;
  for (const auto& f : spec.factors) fit.factor_names.push_back(f.name);
  fit.n_obs = n;

  std::vector<double> ratios(g, 0.0);
  if (options.fixed_ratios) {
    if (options.fixed_ratios->size() != g) throw DimensionError("one fixed ratio per factor");
    ratios = *options.fixed_ratios;
    for (double r : ratios)
      if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("fixed ratios must be >= 0");
    fit.converged = true;
    for (double r : ratios) fit.log_ratios.push_back(r > 0 ? std::log(r) : kLogRatioMin);
  } else if (g > 0) {
    GslErrorGuard guard;
    std::vector<double> start = options.start;
    if (start.empty()) start.assign(g, 0.0);
    if (start.size() != g) throw DimensionError("one start value per factor");
    SearchResult best = run_simplex(nm, start, 1.0, options);
    // A second search from the optimum guards against early simplex collapse.
    SearchResult again = run_simplex(nm, best.log_ratios, 0.25, options);
    fit.iterations = best.iterations + again.iterations;
    if (again.deviance <= best.deviance) best = again;
    if (best.converged) newton_polish(nm, best);
    if (!best.converged || !std::isfinite(best.deviance)) {
      std::ostringstream trace;
      trace << "REML search did not converge after " << fit.iterations
            << " iterations; simplex size " << best.size << ", deviance " << best.deviance
            << ", log ratios [";
      for (std::size_t i = 0; i < g; ++i) trace << (i ? ", " : "") << best.log_ratios[i];
      trace << "]";
      throw NumericError(trace.str());
    }
    fit.converged = true;
    fit.log_ratios = best.log_ratios;
    for (std::size_t i = 0; i < g; ++i) ratios[i] = ratio_from_log(best.log_ratios[i]);
  } else {
    fit.converged = true;
  }

  const Evaluation e = evaluate(nm, ratios, true);
  if (!e.ok) throw NumericError("mixed model is singular at the fitted variances");
  fit.residual_variance = e.pwrss / (n - p);
  for (double r : ratios) fit.variances.push_back(r * fit.residual_variance);
  fit.reml_loglik = -0.5 * e.deviance;
  fit.beta = e.beta;
  fit.covariance = fit.residual_variance * e.xtvx_inv;
  fit.se = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  return fit;
}

double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

std::string stars_for(double p) {
  if (!std::isfinite(p)) return "";
  std::ostringstream os;
  os.precision(4);
  os << p;
  const double rounded = std::stod(os.str());
  if (rounded <= 0.001) return "***";
  if (rounded <= 0.01) return "**";
  if (rounded <= 0.05) return "*";
  return "";
}

WaldResult wald_contrast(const MixedFit& fit, const Vector& contrast, const std::string& name) {
  if (contrast.size() != fit.beta.size()) throw DimensionError("contrast length mismatch");
  WaldResult r;
  r.name = name;
  r.estimate = contrast.dot(fit.beta);
  r.se = std::sqrt(std::max(contrast.dot(fit.covariance * contrast), 0.0));
  if (r.estimate == 0.0) {
    r.z = 0.0;
  } else {
    r.z = r.se > 0.0 ? r.estimate / r.se : std::copysign(INFINITY, r.estimate);
  }
  r.p = two_sided_p(r.z);
  r.stars = stars_for(r.p);
  return r;
}

WaldResult wald_test(const MixedFit& fit, int coefficient) {
  if (coefficient < 0 || coefficient >= fit.beta.size())
    throw ConfigError("coefficient index out of range");
  Vector c = Vector::Zero(fit.beta.size());
  c(coefficient) = 1.0;
  return wald_contrast(fit, c, fit.fixed_names[coefficient]);
}

WaldResult wald_test(const MixedFit& fit, const std::string& coefficient) {
  return wald_test(fit, fit.index_of(coefficient));
}

nlohmann::json to_json(const WaldResult& r) {
  return {{"name", r.name}, {"estimate", r.estimate}, {"se", r.se},
          {"z", r.z},       {"p", r.p},               {"stars", r.stars}};
}

nlohmann::json to_json(const MixedFit& fit) {
  nlohmann::json coefs = nlohmann::json::array();
  for (int i = 0; i < fit.beta.size(); ++i) coefs.push_back(to_json(wald_test(fit, i)));
  nlohmann::json vars = nlohmann::json::object();
  for (std::size_t i = 0; i < fit.factor_names.size(); ++i)
    vars[fit.factor_names[i]] = fit.variances[i];
  return {{"coefficients", coefs},
          {"variances", vars},
          {"residual_variance", fit.residual_variance},
          {"reml_loglik", fit.reml_loglik},
          {"n_obs", fit.n_obs},
          {"iterations", fit.iterations},
          {"converged", fit.converged}};
}

}  // namespace voxlens

