// Copyright 2026 The mixnn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "mixnn/model.hpp"

// Prediction-time inference and statistical interpretation on a fitted model:
// point and interval prediction, linearized coefficients, variance
// decomposition with ICC, Shapley attributions, and the summary table.

namespace mixnn::interpret {

struct OutcomePrediction {
  std::string name;
  fam::Family family;
  int width = 1;
  std::vector<double> values;   // n x width, natural scale (mean/rate/probability)
  std::vector<int> classes;     // argmax labels for classification families
};

struct Predictions {
  int n = 0;
  std::vector<OutcomePrediction> outcomes;
};

Predictions predict_point(const Model& model, const ColumnTable& data);

struct Interval {
  std::vector<double> lower, upper;  // per row
  double alpha = 0.1;
};

// Monte Carlo predictive interval from M reparameterized passes. For
// Gaussian outcomes the learned observation noise is added to each draw
// (posterior predictive), which is what gives the intervals their stated
// coverage; pass include_observation_noise = false for mean-only intervals.
Interval predict_interval(const Model& model, const ColumnTable& data,
                          int outcome_index, int m_samples, double alpha,
                          unsigned long long seed,
                          bool include_observation_noise = true);

struct ExtractedParameters {
  std::vector<std::string> names;      // continuous features
  std::vector<double> coefficients;    // d(mean prediction)/dx at x-bar
  double intercept = 0.0;
  // Outcome-scale variance per (group, slope) table: mean squared effective
  // level value plus propagated posterior variance.
  std::map<std::string, double> variance_components;
  double sigma2_eps = 0.0;  // Gaussian observation variance (0 otherwise)
};

ExtractedParameters extract_parameters(const Model& model,
                                       const ColumnTable& data,
                                       int outcome_index = 0);

struct VarianceDecomposition {
  double sigma2_fixed = 0.0;
  std::map<std::string, double> sigma2_u;  // per table key
  double sigma2_eps = 0.0;
  std::map<std::string, double> icc;       // per grouping factor
  double r_squared = 0.0;
};

VarianceDecomposition variance_decomposition(const Model& model,
                                             const ColumnTable& data,
                                             int outcome_index = 0);

struct ShapReport {
  std::vector<std::string> feature_names;
  int n = 0, p = 0;
  std::vector<double> phi;       // n x p
  std::vector<double> baseline;  // per row: prediction with every feature at background
  std::vector<double> mc_se;     // per feature (sampled mode only)
  bool exact = true;
  // Edge importance for structured models: |B| scaled by the mean downstream
  // gradient magnitude, stored target-major like B itself.
  Eigen::MatrixXd edge_importance;
};

// Exact mode enumerates all 2^p coalitions (p <= 12); sampled mode uses
// antithetic permutation sampling. Background defaults to feature means
// (mode level for categoricals).
ShapReport shapley_values(const Model& model, const ColumnTable& data,
                          int outcome_index, bool exact,
                          int n_permutations = 64,
                          unsigned long long seed = 0,
                          const ColumnTable* background = nullptr);

struct RandomEffectShap {
  std::vector<std::string> term_keys;
  int n = 0, t = 0;
  std::vector<double> phi;        // n x t
  std::vector<double> mean_abs;   // per term
};

RandomEffectShap shapley_random_effects(const Model& model,
                                        const ColumnTable& data,
                                        int outcome_index = 0);

struct SummaryTable {
  struct Fixed {
    std::string term;
    double estimate, std_error, z_value, p_value;
  };
  struct VarComp {
    std::string group, term;
    double variance;
    double correlation;  // with the group intercept table; NaN when absent
  };
  std::vector<Fixed> fixed;
  std::vector<VarComp> varcomps;
  double sigma2_eps = 0.0;
  double loglik = 0.0;
  double aic = 0.0, bic = 0.0;
  int k_params = 0;
  int n = 0;
};

SummaryTable summary(const Model& model, const ColumnTable& data,
                     int outcome_index = 0);

std::string summary_csv(const SummaryTable& t);
std::string summary_json(const SummaryTable& t);
std::string shap_csv(const ShapReport& r);
std::string shap_json(const ShapReport& r);

}  // namespace mixnn::interpret
