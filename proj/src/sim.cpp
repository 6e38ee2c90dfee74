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

#include "mixnn/sim.hpp"

#include <cmath>
#include <random>

#include "mixnn/covariance.hpp"

namespace mixnn::sim {

SimResult simulate_lmm(const LmmParams& p, unsigned long long seed) {
  if (p.groups < 1 || p.per_group < 1) throw DataError("lmm: empty design");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;

  const int n = p.groups * p.per_group;
  const int np = static_cast<int>(p.beta.size());
  SimResult out;
  out.sigma_e = p.sigma_e;
  out.beta = p.beta;
  out.u.resize(p.groups, 1);
  for (int g = 0; g < p.groups; ++g) out.u(g, 0) = p.sigma_u * nd(rng);

  std::vector<std::vector<double>> x(np, std::vector<double>(n));
  std::vector<double> y(n);
  std::vector<int> gcode(n);
  std::vector<std::string> glevels;
  for (int g = 0; g < p.groups; ++g) glevels.push_back("g" + std::to_string(g));

  for (int i = 0; i < n; ++i) {
    const int g = i / p.per_group;
    double mean = out.u(g, 0);
    for (int j = 0; j < np; ++j) {
      x[j][i] = nd(rng);
      mean += p.beta[j] * x[j][i];
    }
    y[i] = mean + p.sigma_e * nd(rng);
    gcode[i] = g;
  }

  out.data.add_numeric("y", std::move(y));
  for (int j = 0; j < np; ++j) {
    out.data.add_numeric("x" + std::to_string(j + 1), std::move(x[j]));
  }
  out.data.add_categorical("g", std::move(gcode), std::move(glevels));
  return out;
}

SimResult simulate_sleepstudy(int subjects, int days, unsigned long long seed) {
  if (subjects < 1 || days < 2) throw DataError("sleepstudy: bad shape");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;

  const double beta0 = 250.0, beta1 = 10.0;
  const double sd_icpt = 30.0, sd_slope = 8.0, sd_eps = 10.0;

  SimResult out;
  out.beta = {beta0, beta1};
  out.sigma_e = sd_eps;
  out.u.resize(subjects, 2);
  for (int s = 0; s < subjects; ++s) {
    out.u(s, 0) = sd_icpt * nd(rng);
    out.u(s, 1) = sd_slope * nd(rng);
  }

  const int n = subjects * days;
  std::vector<double> y(n), day(n);
  std::vector<int> subj(n);
  std::vector<std::string> levels;
  for (int s = 0; s < subjects; ++s) levels.push_back("s" + std::to_string(s));
  for (int s = 0; s < subjects; ++s) {
    for (int d = 0; d < days; ++d) {
      const int i = s * days + d;
      day[i] = d;
      subj[i] = s;
      y[i] = (beta0 + out.u(s, 0)) + (beta1 + out.u(s, 1)) * d + sd_eps * nd(rng);
    }
  }
  out.data.add_numeric("y", std::move(y));
  out.data.add_numeric("day", std::move(day));
  out.data.add_categorical("subject", std::move(subj), std::move(levels));
  return out;
}

SimResult simulate_sem_chain(int n, double noise, unsigned long long seed) {
  if (n < 1) throw DataError("sem_chain: n must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;

  const double w12 = 0.8, w23 = 0.9, w3y = 0.7;
  SimResult out;
  out.sigma_e = noise;
  out.adjacency = Eigen::MatrixXd::Zero(4, 4);
  out.adjacency(0, 1) = w12;  // x1 -> x2
  out.adjacency(1, 2) = w23;  // x2 -> x3
  out.adjacency(2, 3) = w3y;  // x3 -> y

  std::vector<double> x1(n), x2(n), x3(n), y(n);
  for (int i = 0; i < n; ++i) {
    x1[i] = nd(rng);
    x2[i] = w12 * x1[i] + noise * nd(rng);
    x3[i] = w23 * x2[i] + noise * nd(rng);
    y[i] = w3y * x3[i] + noise * nd(rng);
  }
  out.data.add_numeric("x1", std::move(x1));
  out.data.add_numeric("x2", std::move(x2));
  out.data.add_numeric("x3", std::move(x3));
  out.data.add_numeric("y", std::move(y));
  return out;
}

SimResult simulate_spatial(int grid, double lengthscale, double sigma_e,
                           unsigned long long seed) {
  if (grid < 2) throw DataError("spatial: grid must be >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;

  const int n = grid * grid;
  Eigen::MatrixXd coords(n, 2);
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      coords(i * grid + j, 0) = i;
      coords(i * grid + j, 1) = j;
    }
  }
  auto factor = cov::build_gp_rbf(coords, 1.0, lengthscale);
  Eigen::VectorXd eps(n);
  for (int i = 0; i < n; ++i) eps(i) = nd(rng);
  Eigen::VectorXd field = cov::correlated_sample(factor, eps);

  SimResult out;
  out.sigma_e = sigma_e;
  out.u.resize(n, 1);
  out.u.col(0) = field;

  std::vector<double> y(n), sx(n), sy(n);
  std::vector<int> loc(n);
  std::vector<std::string> levels;
  for (int i = 0; i < n; ++i) {
    sx[i] = coords(i, 0);
    sy[i] = coords(i, 1);
    y[i] = field(i) + sigma_e * nd(rng);
    loc[i] = i;
    levels.push_back("c" + std::to_string(i));
  }
  out.data.add_numeric("y", std::move(y));
  out.data.add_numeric("sx", std::move(sx));
  out.data.add_numeric("sy", std::move(sy));
  out.data.add_categorical("loc", std::move(loc), std::move(levels));
  return out;
}

SimResult simulate(const std::string& kind,
                   const std::map<std::string, double>& params,
                   unsigned long long seed) {
  auto get = [&](const std::string& name, double fallback) {
    auto it = params.find(name);
    return it == params.end() ? fallback : it->second;
  };
  if (kind == "lmm") {
    LmmParams p;
    p.groups = static_cast<int>(get("groups", 30));
    p.per_group = static_cast<int>(get("per_group", 20));
    p.sigma_u = get("sigma_u", 1.0);
    p.sigma_e = get("sigma_e", 0.5);
    const int np = static_cast<int>(get("p", 2));
    if (np != 2) {
      p.beta.assign(np, 1.0);
    }
    return simulate_lmm(p, seed);
  }
  if (kind == "sleepstudy_like") {
    return simulate_sleepstudy(static_cast<int>(get("subjects", 18)),
                               static_cast<int>(get("days", 10)), seed);
  }
  if (kind == "sem_chain") {
    return simulate_sem_chain(static_cast<int>(get("n", 2000)),
                              get("noise", 0.1), seed);
  }
  if (kind == "spatial") {
    return simulate_spatial(static_cast<int>(get("grid", 10)),
                            get("lengthscale", 2.0), get("sigma_e", 0.1), seed);
  }
  throw DataError("unknown simulation kind '" + kind + "'");
}

}  // namespace mixnn::sim
