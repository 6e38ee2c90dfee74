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

#include "mixnn/covariance.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace mixnn::cov {

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::IID: return "IID";
    case Kind::AR1: return "AR1";
    case Kind::ARMA: return "ARMA";
    case Kind::CS: return "CS";
    case Kind::KRON: return "KRON";
    case Kind::KIN: return "KIN";
    case Kind::GP: return "GP";
  }
  return "IID";
}

Kind kind_from_name(const std::string& s) {
  if (s == "IID") return Kind::IID;
  if (s == "AR1") return Kind::AR1;
  if (s == "ARMA") return Kind::ARMA;
  if (s == "CS") return Kind::CS;
  if (s == "KRON") return Kind::KRON;
  if (s == "KIN" || s == "K") return Kind::KIN;
  if (s == "GP") return Kind::GP;
  throw DataError("unknown covariance kind '" + s + "'");
}

Eigen::MatrixXd cholesky_lower(const Eigen::MatrixXd& a) {
  const int n = static_cast<int>(a.rows());
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    double d = a(k, k);
    for (int j = 0; j < k; ++j) d -= l(k, j) * l(k, j);
    if (d <= 0.0) {
      throw NumericalError("cholesky: leading minor " + std::to_string(k + 1) +
                           " is not positive definite");
    }
    l(k, k) = std::sqrt(d);
    for (int i = k + 1; i < n; ++i) {
      double v = a(i, k);
      for (int j = 0; j < k; ++j) v -= l(i, j) * l(k, j);
      l(i, k) = v / l(k, k);
    }
  }
  return l;
}

namespace {

CovFactor factor_from_sigma(Eigen::MatrixXd sigma, bool jitter = false) {
  CovFactor f;
  if (jitter) {
    const double eps = 1e-8 * sigma.diagonal().mean();
    sigma.diagonal().array() += eps;
  }
  f.chol_lower = cholesky_lower(sigma);
  f.sigma = std::move(sigma);
  return f;
}

}  // namespace

CovFactor build_iid(double sigma2, int n) {
  if (n <= 0) throw DataError("IID covariance: n must be positive");
  if (sigma2 <= 0) throw DataError("IID covariance: sigma2 must be > 0");
  CovFactor f;
  f.sigma = sigma2 * Eigen::MatrixXd::Identity(n, n);
  f.chol_lower = std::sqrt(sigma2) * Eigen::MatrixXd::Identity(n, n);
  return f;
}

CovFactor build_ar1(double sigma2, double rho, int n) {
  if (n <= 0) throw DataError("AR1 covariance: n must be positive");
  if (sigma2 <= 0) throw DataError("AR1 covariance: sigma2 must be > 0");
  if (std::abs(rho) >= 1.0) {
    throw DataError("AR1 covariance: |rho| must be < 1, got " +
                    std::to_string(rho));
  }
  Eigen::MatrixXd s(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) s(i, j) = sigma2 * std::pow(rho, std::abs(i - j));
  return factor_from_sigma(std::move(s));
}

std::vector<double> arma_autocov(const std::vector<double>& phi,
                                 const std::vector<double>& theta, double sigma,
                                 int n) {
  const int p = static_cast<int>(phi.size());
  const int q = static_cast<int>(theta.size());
  if (p > 2 || q > 2) throw DataError("ARMA covariance: orders p,q must be <= 2");
  if (sigma <= 0) throw DataError("ARMA covariance: sigma must be > 0");
  // Stationarity of the AR polynomial, closed-form for p <= 2.
  if (p == 1 && std::abs(phi[0]) >= 1.0) {
    throw DataError("ARMA covariance: AR(1) coefficient is non-stationary");
  }
  if (p == 2) {
    const double f1 = phi[0], f2 = phi[1];
    if (std::abs(f2) >= 1.0 || f2 + f1 >= 1.0 || f2 - f1 >= 1.0) {
      throw DataError("ARMA covariance: AR(2) coefficients are non-stationary");
    }
  }

  const double s2 = sigma * sigma;
  // MA(inf) weights psi_0..psi_q with theta_0 = 1.
  std::vector<double> th(q + 1, 0.0);
  th[0] = 1.0;
  for (int j = 0; j < q; ++j) th[j + 1] = theta[j];
  std::vector<double> psi(q + 1, 0.0);
  for (int j = 0; j <= q; ++j) {
    psi[j] = th[j];
    for (int i = 1; i <= std::min(j, p); ++i) psi[j] += phi[i - 1] * psi[j - i];
  }

  // Initial equations: gamma_k - sum_i phi_i gamma_{|k-i|} = s2 sum_{j>=k} th_j psi_{j-k}
  // for k = 0..K with K = max(p, q); solve the small dense system.
  const int kmax = std::max(p, q);
  const int m = kmax + 1;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
  for (int k = 0; k < m; ++k) {
    a(k, k) += 1.0;
    for (int i = 1; i <= p; ++i) a(k, std::abs(k - i)) -= phi[i - 1];
    for (int j = k; j <= q; ++j) b(k) += s2 * th[j] * psi[j - k];
  }
  Eigen::VectorXd g0 = a.fullPivLu().solve(b);

  std::vector<double> gamma(std::max(n, m), 0.0);
  for (int k = 0; k < m; ++k) gamma[k] = g0(k);
  for (int k = m; k < n; ++k) {
    double v = 0;
    for (int i = 1; i <= p; ++i) v += phi[i - 1] * gamma[k - i];
    gamma[k] = v;
  }
  gamma.resize(n);
  return gamma;
}

CovFactor build_arma(const std::vector<double>& phi,
                     const std::vector<double>& theta, double sigma, int n) {
  if (n <= 0) throw DataError("ARMA covariance: n must be positive");
  const auto gamma = arma_autocov(phi, theta, sigma, n);
  Eigen::MatrixXd s(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) s(i, j) = gamma[std::abs(i - j)];
  return factor_from_sigma(std::move(s));
}

CovFactor build_cs(double sigma2, double rho, int n) {
  if (n <= 0) throw DataError("CS covariance: n must be positive");
  if (sigma2 <= 0) throw DataError("CS covariance: sigma2 must be > 0");
  const double bound = n > 1 ? -1.0 / (n - 1) : -1.0;
  if (rho < bound + 1e-9 || rho >= 1.0) {
    throw DataError("CS covariance: rho must lie in [" + std::to_string(bound) +
                    ", 1); got " + std::to_string(rho));
  }
  Eigen::MatrixXd s =
      sigma2 * ((1.0 - rho) * Eigen::MatrixXd::Identity(n, n) +
                rho * Eigen::MatrixXd::Ones(n, n));
  return factor_from_sigma(std::move(s));
}

CovFactor build_kron(const CovFactor& a, const CovFactor& b) {
  const int na = a.dim(), nb = b.dim();
  const long total = static_cast<long>(na) * nb;
  if (total > 10000) {
    throw DataError("Kronecker covariance: " + std::to_string(total) +
                    " rows exceeds the 10^4 limit");
  }
  CovFactor f;
  f.sigma.resize(total, total);
  f.chol_lower = Eigen::MatrixXd::Zero(total, total);
  for (int i = 0; i < na; ++i) {
    for (int j = 0; j < na; ++j) {
      f.sigma.block(i * nb, j * nb, nb, nb) = a.sigma(i, j) * b.sigma;
      f.chol_lower.block(i * nb, j * nb, nb, nb) =
          a.chol_lower(i, j) * b.chol_lower;
    }
  }
  return f;
}

CovFactor build_gp_rbf(const Eigen::MatrixXd& coords, double sigma2,
                       double lengthscale, bool jitter) {
  const int n = static_cast<int>(coords.rows());
  if (n <= 0) throw DataError("GP covariance: no coordinates");
  if (sigma2 <= 0) throw DataError("GP covariance: sigma2 must be > 0");
  if (lengthscale <= 0) throw DataError("GP covariance: lengthscale must be > 0");
  Eigen::MatrixXd s(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double d2 = (coords.row(i) - coords.row(j)).squaredNorm();
      if (i != j && d2 == 0.0 && !jitter) {
        throw DataError("GP covariance: duplicate coordinates at rows " +
                        std::to_string(j) + " and " + std::to_string(i) +
                        " (jitter disabled)");
      }
      s(i, j) = s(j, i) = sigma2 * std::exp(-d2 / (2.0 * lengthscale * lengthscale));
    }
  }
  if (jitter) s.diagonal().array() += 1e-6 * sigma2;
  return factor_from_sigma(std::move(s), /*jitter=*/true);
}

KinshipResult build_kinship(const Eigen::MatrixXd& genotypes) {
  const int n = static_cast<int>(genotypes.rows());
  const int m = static_cast<int>(genotypes.cols());
  KinshipResult out;
  double denom = 0;
  Eigen::MatrixXd z(n, 0);
  std::vector<int> kept;
  for (int j = 0; j < m; ++j) {
    const double pj = genotypes.col(j).mean() / 2.0;
    if (pj <= 0.0 || pj >= 1.0) {
      ++out.dropped_monomorphic;
      continue;
    }
    kept.push_back(j);
    denom += 2.0 * pj * (1.0 - pj);
  }
  if (kept.empty()) {
    throw DataError("kinship: every genotype column is monomorphic");
  }
  z.resize(n, static_cast<int>(kept.size()));
  for (std::size_t c = 0; c < kept.size(); ++c) {
    const int j = kept[c];
    const double pj = genotypes.col(j).mean() / 2.0;
    z.col(static_cast<int>(c)) = genotypes.col(j).array() - 2.0 * pj;
  }
  out.k = z * z.transpose() / denom;
  return out;
}

Eigen::VectorXd henderson_predict(const Eigen::MatrixXd& k_new_train,
                                  const Eigen::MatrixXd& k_train_train,
                                  const Eigen::VectorXd& u_train) {
  if (k_new_train.cols() != k_train_train.rows() ||
      k_train_train.rows() != k_train_train.cols() ||
      k_train_train.cols() != u_train.size()) {
    throw DataError("henderson_predict: dimension mismatch");
  }
  Eigen::MatrixXd ktt = k_train_train;
  ktt.diagonal().array() += 1e-8 * ktt.diagonal().mean();
  return k_new_train * ktt.ldlt().solve(u_train);
}

Eigen::VectorXd correlated_sample(const CovFactor& factor,
                                  const Eigen::VectorXd& eps) {
  if (eps.size() != factor.dim())
    throw DataError("correlated_sample: eps length mismatch");
  return factor.chol_lower * eps;
}

CovFactor build_factor(const CovarianceSpec& spec, int n_levels) {
  switch (spec.kind) {
    case Kind::IID:
      return build_iid(spec.sigma2, n_levels);
    case Kind::AR1:
      return build_ar1(spec.sigma2, spec.rho, n_levels);
    case Kind::ARMA:
      return build_arma(spec.phi, spec.theta, spec.arma_sigma, n_levels);
    case Kind::CS:
      return build_cs(spec.sigma2, spec.rho, n_levels);
    case Kind::KRON: {
      if (spec.components.size() != 2) {
        throw DataError("KRON covariance: exactly two components required");
      }
      // The outer component spans groups of levels; sizes must multiply to
      // n_levels. Component dims are taken from their own specs.
      const auto& ca = spec.components[0];
      const auto& cb = spec.components[1];
      int nb = cb.kind == Kind::KIN ? static_cast<int>(cb.kinship.rows())
             : cb.kind == Kind::GP  ? static_cast<int>(cb.coords.rows())
                                    : 0;
      if (nb == 0) {
        // Infer: split n_levels by the first component's natural size if
        // available, else require a square split.
        int na = ca.kind == Kind::KIN ? static_cast<int>(ca.kinship.rows())
               : ca.kind == Kind::GP  ? static_cast<int>(ca.coords.rows())
                                      : 0;
        if (na > 0 && n_levels % na == 0) {
          nb = n_levels / na;
        } else {
          throw DataError(
              "KRON covariance: cannot infer component sizes; give KIN/GP "
              "components or matching dimensions");
        }
      }
      if (n_levels % nb != 0) {
        throw DataError("KRON covariance: component sizes do not divide " +
                        std::to_string(n_levels));
      }
      const int na = n_levels / nb;
      return build_kron(build_factor(ca, na), build_factor(cb, nb));
    }
    case Kind::KIN: {
      Eigen::MatrixXd k = spec.kinship;
      if (!spec.train_rows.empty()) {
        const int n = static_cast<int>(spec.train_rows.size());
        Eigen::MatrixXd sub(n, n);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            sub(i, j) = k(spec.train_rows[i], spec.train_rows[j]);
        k = std::move(sub);
      }
      if (k.rows() != n_levels) {
        throw DataError("KIN covariance: kinship is " +
                        std::to_string(k.rows()) + "x" +
                        std::to_string(k.cols()) + " but " +
                        std::to_string(n_levels) + " levels were fitted");
      }
      return factor_from_sigma(spec.sigma2 * k, /*jitter=*/true);
    }
    case Kind::GP: {
      if (spec.coords.rows() != n_levels) {
        throw DataError("GP covariance: " + std::to_string(spec.coords.rows()) +
                        " coordinate rows for " + std::to_string(n_levels) +
                        " levels");
      }
      return build_gp_rbf(spec.coords, spec.sigma2, spec.lengthscale);
    }
  }
  throw DataError("unreachable covariance kind");
}

namespace {

std::vector<double> to_flat(const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()) * m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      v[static_cast<std::size_t>(i) * m.cols() + j] = m(i, j);
  return v;
}

}  // namespace

ad::Var build_chol_node(ad::Tape& tape, const CovarianceSpec& spec,
                        int n_levels, ad::Var rho_raw, ad::Var log_ell) {
  using namespace ad;
  const int n = n_levels;
  const bool train_rho = spec.trainable && rho_raw.valid() &&
                         (spec.kind == Kind::AR1 || spec.kind == Kind::CS);
  const bool train_ell = spec.trainable && log_ell.valid() && spec.kind == Kind::GP;

  if (!train_rho && !train_ell) {
    const CovFactor f = build_factor(spec, n);
    return tape.constant(Shape{n, n}, to_flat(f.chol_lower));
  }

  if (spec.kind == Kind::AR1) {
    // Sigma = sigma2 * sum_k rho^k M_k with M_k the |i-j| = k indicator.
    Var rho = tanh(rho_raw);
    Var sigma = tape.constant(Shape{n, n},
                              to_flat(spec.sigma2 * Eigen::MatrixXd::Identity(n, n)));
    Var rpow = tape.scalar_const(1.0);
    for (int k = 1; k < n; ++k) {
      rpow = mul(rpow, rho);
      Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (std::abs(i - j) == k) mask(i, j) = spec.sigma2;
      sigma = add(sigma, mul(rpow, tape.constant(Shape{n, n}, to_flat(mask))));
    }
    return cholesky(sigma);
  }
  if (spec.kind == Kind::CS) {
    // Sigma = sigma2 * (I + rho (J - I)); PSD enforced softly by tanh range,
    // training keeps rho above the bound via the cholesky failure signal.
    Var rho = tanh(rho_raw);
    Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd jmi = Eigen::MatrixXd::Ones(n, n) - eye;
    Var sigma = add(tape.constant(Shape{n, n}, to_flat(spec.sigma2 * eye)),
                    mul(rho, tape.constant(Shape{n, n}, to_flat(spec.sigma2 * jmi))));
    return cholesky(sigma);
  }
  // GP with trainable lengthscale.
  Eigen::MatrixXd d2(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      d2(i, j) = (spec.coords.row(i) - spec.coords.row(j)).squaredNorm();
  Var scalefac = ad::exp(scale(log_ell, -2.0));  // 1 / ell^2
  Var expo = mul(tape.constant(Shape{n, n}, to_flat(-0.5 * d2)), scalefac);
  Var k = scale(ad::exp(expo), spec.sigma2);
  Eigen::MatrixXd jit =
      (1e-6 * spec.sigma2 + 1e-8 * spec.sigma2) * Eigen::MatrixXd::Identity(n, n);
  k = add(k, tape.constant(Shape{n, n}, to_flat(jit)));
  return cholesky(k);
}

Eigen::MatrixXd load_matrix_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("matrix file '" + path + "' is empty");
  const std::size_t cols = rows[0].size();
  for (const auto& r : rows) {
    if (r.size() != cols) {
      throw DataError("matrix file '" + path + "' has ragged rows");
    }
  }
  Eigen::MatrixXd m(rows.size(), cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rows[i][j];
  return m;
}

void save_matrix_text(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.precision(17);
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      if (j) out << ' ';
      out << m(i, j);
    }
    out << '\n';
  }
}

}  // namespace mixnn::cov
