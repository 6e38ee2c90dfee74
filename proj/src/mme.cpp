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

#include "mixnn/mme.hpp"

#include <cmath>

#include "mixnn/common.hpp"

namespace mixnn::mme {

MmeResult solve(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                const Eigen::VectorXd& y, double sigma_u2, double sigma_e2) {
  const int p = static_cast<int>(x.cols());
  const int q = static_cast<int>(z.cols());
  if (x.rows() != y.size() || (q > 0 && z.rows() != y.size())) {
    throw DataError("mme: dimension mismatch");
  }
  if (q == 0) {
    MmeResult r;
    r.beta = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    r.sigma_u2 = sigma_u2;
    r.sigma_e2 = sigma_e2;
    return r;
  }
  if (sigma_u2 <= 0 || sigma_e2 <= 0) {
    throw DataError("mme: variance components must be positive");
  }
  const double lambda = sigma_e2 / sigma_u2;
  Eigen::MatrixXd a(p + q, p + q);
  a.topLeftCorner(p, p) = x.transpose() * x;
  a.topRightCorner(p, q) = x.transpose() * z;
  a.bottomLeftCorner(q, p) = z.transpose() * x;
  a.bottomRightCorner(q, q) =
      z.transpose() * z + lambda * Eigen::MatrixXd::Identity(q, q);
  Eigen::VectorXd rhs(p + q);
  rhs.head(p) = x.transpose() * y;
  rhs.tail(q) = z.transpose() * y;
  Eigen::VectorXd sol = a.ldlt().solve(rhs);

  MmeResult r;
  r.beta = sol.head(p);
  r.u = sol.tail(q);
  r.sigma_u2 = sigma_u2;
  r.sigma_e2 = sigma_e2;
  return r;
}

double marginal_loglik(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                       const Eigen::VectorXd& y, double ratio) {
  // V = I + ratio Z Z'; Woodbury keeps everything at the level-count scale:
  //   V^{-1} A = A - Z (Z'Z + I/ratio)^{-1} Z'A,
  //   log|V| = log|I + ratio Z'Z|.
  const int n = static_cast<int>(y.size());
  const int q = static_cast<int>(z.cols());
  Eigen::MatrixXd inner =
      z.transpose() * z + Eigen::MatrixXd::Identity(q, q) / ratio;
  Eigen::LLT<Eigen::MatrixXd> inner_llt(inner);
  if (inner_llt.info() != Eigen::Success) {
    throw NumericalError("mme: inner system not positive definite");
  }
  auto vinv = [&](const Eigen::MatrixXd& a) -> Eigen::MatrixXd {
    return a - z * inner_llt.solve(z.transpose() * a);
  };
  Eigen::MatrixXd viX = vinv(x);
  Eigen::VectorXd viy = vinv(y).col(0);
  Eigen::VectorXd beta =
      (x.transpose() * viX).ldlt().solve(x.transpose() * viy);
  Eigen::VectorXd r = y - x * beta;
  const double quad = r.dot(vinv(r).col(0));
  const double sigma_e2 = quad / n;

  // log|V| = log|inner| + q log(ratio) since inner = (Z'Z + I/ratio).
  double logdet_inner = 0;
  for (int i = 0; i < q; ++i) {
    logdet_inner += 2.0 * std::log(inner_llt.matrixL()(i, i));
  }
  const double logdet_v = logdet_inner + q * std::log(ratio);
  return -0.5 * (n * std::log(2.0 * M_PI * sigma_e2) + logdet_v + n);
}

MmeResult profile(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z,
                  const Eigen::VectorXd& y) {
  const int n = static_cast<int>(y.size());
  double best_ratio = 1.0;
  double best_ll = -std::numeric_limits<double>::infinity();
  const int grid = 61;
  for (int i = 0; i < grid; ++i) {
    const double lg = -3.0 + 6.0 * i / (grid - 1);
    const double ratio = std::pow(10.0, lg);
    const double ll = marginal_loglik(x, z, y, ratio);
    if (ll > best_ll) {
      best_ll = ll;
      best_ratio = ratio;
    }
  }
  // Golden-section refinement on log10(ratio).
  double lo = std::log10(best_ratio) - 0.12;
  double hi = std::log10(best_ratio) + 0.12;
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - gr * (hi - lo);
  double dpt = lo + gr * (hi - lo);
  double fc = marginal_loglik(x, z, y, std::pow(10.0, c));
  double fd = marginal_loglik(x, z, y, std::pow(10.0, dpt));
  for (int it = 0; it < 40; ++it) {
    if (fc > fd) {
      hi = dpt;
      dpt = c;
      fd = fc;
      c = hi - gr * (hi - lo);
      fc = marginal_loglik(x, z, y, std::pow(10.0, c));
    } else {
      lo = c;
      c = dpt;
      fc = fd;
      dpt = lo + gr * (hi - lo);
      fd = marginal_loglik(x, z, y, std::pow(10.0, dpt));
    }
  }
  const double ratio = std::pow(10.0, 0.5 * (lo + hi));

  // Recover sigma_e2 at the optimum, then solve Henderson's system.
  const int q = static_cast<int>(z.cols());
  Eigen::MatrixXd inner =
      z.transpose() * z + Eigen::MatrixXd::Identity(q, q) / ratio;
  Eigen::LLT<Eigen::MatrixXd> inner_llt(inner);
  auto vinv = [&](const Eigen::MatrixXd& a) -> Eigen::MatrixXd {
    return a - z * inner_llt.solve(z.transpose() * a);
  };
  Eigen::MatrixXd viX = vinv(x);
  Eigen::VectorXd viy = vinv(y).col(0);
  Eigen::VectorXd beta =
      (x.transpose() * viX).ldlt().solve(x.transpose() * viy);
  Eigen::VectorXd r = y - x * beta;
  const double sigma_e2 = r.dot(vinv(r).col(0)) / n;
  const double sigma_u2 = ratio * sigma_e2;

  MmeResult out = solve(x, z, y, sigma_u2, sigma_e2);
  out.loglik = marginal_loglik(x, z, y, ratio);
  return out;
}

}  // namespace mixnn::mme
