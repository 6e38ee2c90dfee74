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

#include <Eigen/Dense>

// Closed-form mixed-model-equations solver: the oracle the variational
// trainer is checked against. Solves Henderson's joint system at a fixed
// variance ratio and profiles the ratio against the marginal Gaussian
// likelihood (61-point log grid plus golden-section refinement).

namespace mixnn::mme {

struct MmeResult {
  Eigen::VectorXd beta;
  Eigen::VectorXd u;
  double sigma_u2 = 0.0;
  double sigma_e2 = 0.0;
  double loglik = 0.0;
};

// Henderson's equations at given variance components:
//   [X'X  X'Z; Z'X  Z'Z + (sigma_e2/sigma_u2) I] [beta; u] = [X'y; Z'y].
MmeResult solve(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                const Eigen::VectorXd& y, double sigma_u2, double sigma_e2);

// Profiles the ratio sigma_u2/sigma_e2 over a log grid on [1e-3, 1e3] with
// golden-section refinement, maximizing the marginal Gaussian likelihood.
MmeResult profile(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                  const Eigen::VectorXd& y);

// Marginal log-likelihood at a given ratio (profiled over beta, sigma_e2).
double marginal_loglik(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                       const Eigen::VectorXd& y, double ratio);

}  // namespace mixnn::mme
