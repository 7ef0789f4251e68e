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

#ifndef VOXLENS_MIXED_MODEL_H_
#define VOXLENS_MIXED_MODEL_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/common.h"

namespace voxlens {

// One random intercept per level of a grouping factor.
struct GroupingFactor {
  std::string name;
  std::vector<int> ids;  // per observation, dense in [0, n_levels)
  int n_levels() const;
};

// Maps arbitrary keys to dense ids in order of first appearance.
std::vector<int> dense_ids(std::span<const std::int64_t> keys);

struct MixedModelSpec {
  std::vector<double> response;
  Matrix design;  // n × p fixed-effect design
  std::vector<std::string> fixed_names;
  std::vector<GroupingFactor> factors;

  int n_obs() const { return static_cast<int>(response.size()); }
  // Shapes, finiteness, dense ids. Rank is checked by the fit.
  void validate() const;
};

struct LmmOptions {
  int max_iterations = 4000;
  double tolerance = 1e-9;  // simplex size at convergence, in log-ratio units
  // Log variance ratios σ²_g / σ²_ε where the search starts.
  std::vector<double> start;
  // When set, the ratios are held at these values (zero allowed) and only β
  // and σ²_ε are estimated.
  std::optional<std::vector<double>> fixed_ratios;
};

struct MixedFit {
  std::vector<std::string> fixed_names;
  Vector beta;
  Vector se;
  Matrix covariance;  // of β̂
  std::vector<std::string> factor_names;
  std::vector<double> variances;  // σ²_g per factor
  double residual_variance = 0.0;
  double reml_loglik = 0.0;
  std::vector<double> log_ratios;
  int n_obs = 0;
  int iterations = 0;
  bool converged = false;

  int index_of(const std::string& name) const;
};

// REML estimates. The restricted likelihood is profiled over σ²_ε and
// maximized over the log variance ratios by Nelder–Mead; β̂ comes from the
// Henderson equations at the optimum. Observations are put in a canonical
// order first, so the fit does not depend on input order.
MixedFit fit_lmm(const MixedModelSpec& spec, const LmmOptions& options = {});

// Restricted log-likelihood at the given variance ratios.
double reml_loglik(const MixedModelSpec& spec, std::span<const double> ratios);

struct WaldResult {
  std::string name;
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p = 1.0;
  std::string stars;
};

// Significance label; p is compared after rounding to four significant digits.
std::string stars_for(double p);
double two_sided_p(double z);

WaldResult wald_test(const MixedFit& fit, const std::string& coefficient);
WaldResult wald_test(const MixedFit& fit, int coefficient);
// Test of a linear contrast cᵀβ = 0.
WaldResult wald_contrast(const MixedFit& fit, const Vector& contrast, const std::string& name);

nlohmann::json to_json(const MixedFit& fit);
nlohmann::json to_json(const WaldResult& result);

}  // namespace voxlens

#endif  // VOXLENS_MIXED_MODEL_H_
