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
#include <map>
#include <string>

#include "mixnn/columns.hpp"

// Dataset simulators with ground truth, used by the oracle-based tests and
// exposed through the CLI.

namespace mixnn::sim {

struct SimResult {
  ColumnTable data;
  std::vector<double> beta;    // fixed-effect truth
  Eigen::MatrixXd u;           // per-level random-effect truth (levels x terms)
  Eigen::MatrixXd adjacency;   // ground-truth graph (sem_chain)
  double sigma_e = 0.0;
};

struct LmmParams {
  int groups = 30;
  int per_group = 20;
  std::vector<double> beta{2.0, -1.0};
  double sigma_u = 1.0;
  double sigma_e = 0.5;
};

// y = X beta + u_g + eps with IID group intercepts; columns y, x1..xp, g.
SimResult simulate_lmm(const LmmParams& p, unsigned long long seed);

// Random intercept + slope over `days` time points per subject;
// columns y, day, subject.
SimResult simulate_sleepstudy(int subjects, int days, unsigned long long seed);

// Linear chain x1 -> x2 -> x3 -> y with given noise; adjacency is 4x4 in
// variable order (x1, x2, x3, y).
SimResult simulate_sem_chain(int n, double noise, unsigned long long seed);

// GP-RBF surface sampled on a grid x grid lattice plus observation noise;
// columns y, sx, sy, loc.
SimResult simulate_spatial(int grid, double lengthscale, double sigma_e,
                           unsigned long long seed);

// CLI dispatcher over the kinds above; numeric parameters by name.
SimResult simulate(const std::string& kind,
                   const std::map<std::string, double>& params,
                   unsigned long long seed);

}  // namespace mixnn::sim
