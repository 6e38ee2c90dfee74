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
#include <optional>
#include <string>
#include <vector>

#include "mixnn/tensor.hpp"

// Structured covariance models for random effects. Each builder returns the
// covariance together with its lower Cholesky factor; sampling correlated
// effects is a single factor-vector product. Random effects enter the encoder
// through the whitened parameterization u = L v, so these factors are also
// constructible as tape nodes when rho / lengthscale are trained.

namespace mixnn::cov {

enum class Kind { IID, AR1, ARMA, CS, KRON, KIN, GP };

std::string kind_name(Kind k);
Kind kind_from_name(const std::string& s);

struct CovarianceSpec {
  Kind kind = Kind::IID;
  double sigma2 = 1.0;
  double rho = 0.7;                  // AR1 / CS
  std::vector<double> phi, theta;    // ARMA (orders <= 2)
  double arma_sigma = 1.0;
  std::vector<CovarianceSpec> components;  // KRON: exactly two
  Eigen::MatrixXd kinship;           // KIN: relationship matrix
  std::vector<int> train_rows;       // KIN: kinship row per level (empty = identity)
  Eigen::MatrixXd coords;            // GP: one coordinate row per level
  std::vector<std::string> coordinate_cols;  // GP: resolved from data at build
  double lengthscale = 1.0;
  bool trainable = false;            // rho / lengthscale learned during fit

  bool exchangeable() const { return kind == Kind::IID || kind == Kind::CS; }
};

struct CovFactor {
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd chol_lower;
  int dim() const { return static_cast<int>(sigma.rows()); }
};

// Dense lower Cholesky; throws NumericalError naming the failing leading
// minor (1-based).
Eigen::MatrixXd cholesky_lower(const Eigen::MatrixXd& a);

CovFactor build_iid(double sigma2, int n);
CovFactor build_ar1(double sigma2, double rho, int n);
CovFactor build_arma(const std::vector<double>& phi,
                     const std::vector<double>& theta, double sigma, int n);
CovFactor build_cs(double sigma2, double rho, int n);
CovFactor build_kron(const CovFactor& a, const CovFactor& b);
CovFactor build_gp_rbf(const Eigen::MatrixXd& coords, double sigma2,
                       double lengthscale, bool jitter = true);

// Theoretical autocovariances gamma_0..gamma_{n-1} of the ARMA(p,q) process
// (p, q <= 2), from the initial linear system plus the AR recursion.
std::vector<double> arma_autocov(const std::vector<double>& phi,
                                 const std::vector<double>& theta, double sigma,
                                 int n);

struct KinshipResult {
  Eigen::MatrixXd k;
  int dropped_monomorphic = 0;
};

// K = Z Z^T / (2 sum p_j (1 - p_j)) with Z the column-centered genotypes.
KinshipResult build_kinship(const Eigen::MatrixXd& genotypes);

// u_new = K_{new,train} K_{train,train}^{-1} u_train (ridge 1e-8 * mean diag).
Eigen::VectorXd henderson_predict(const Eigen::MatrixXd& k_new_train,
                                  const Eigen::MatrixXd& k_train_train,
                                  const Eigen::VectorXd& u_train);

Eigen::VectorXd correlated_sample(const CovFactor& factor,
                                  const Eigen::VectorXd& eps);

// Builds the factor described by a spec for `n_levels` rows (KIN/GP read their
// stored matrices; sizes must agree).
CovFactor build_factor(const CovarianceSpec& spec, int n_levels);

// Tape-node version of the factor for trainable structures. `rho_raw` is the
// unconstrained parameter with rho = tanh(rho_raw); `log_ell` gives
// lengthscale = exp(log_ell). Pass default-constructed Vars to pin a
// parameter at its spec value.
ad::Var build_chol_node(ad::Tape& tape, const CovarianceSpec& spec,
                        int n_levels, ad::Var rho_raw, ad::Var log_ell);

// Whitespace-delimited square matrix (one row per line).
Eigen::MatrixXd load_matrix_text(const std::string& path);
void save_matrix_text(const std::string& path, const Eigen::MatrixXd& m);

}  // namespace mixnn::cov
