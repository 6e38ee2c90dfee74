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
#include <functional>
#include <optional>
#include <vector>

#include "mixnn/tensor.hpp"

// GSEM backbone: stacked hidden layers with optional structural transforms.
// Static structure solves eta = (I - B)^{-1} xi exactly for strictly
// lower-triangular B; the free variant and the hybrid mode use a damped
// fixed-point iteration unrolled on the tape, stabilized during training by
// the spectral contraction penalty.

namespace mixnn::gsem {

enum class Activation { Relu, Tanh, Gelu };
enum class Structure { None, Static, StaticFree, Dynamic, Hybrid };

Activation activation_from_name(const std::string& s);
std::string activation_name(Activation a);
Structure structure_from_name(const std::string& s);
std::string structure_name(Structure s);

struct GsemConfig {
  std::vector<int> hidden_dims{64, 32};
  Activation activation = Activation::Relu;
  double dropout = 0.1;
  bool layer_norm = false;
  bool residual = false;
  Structure structure = Structure::None;
  int n_heads = 2;
  double edge_threshold = 0.3;  // reporting threshold for learned graphs
};

// eta = (I - B)^{-1} xi for strictly lower-triangular B (unit-lower solve,
// exact). xi is n x d with samples as rows.
ad::Var static_transform(ad::Var xi, ad::Var b_strict_lower);

// trace(exp(B (x) B)) - d.
ad::Var dag_penalty(ad::Var b);
// ||B||_1.
ad::Var sparse_penalty(ad::Var b);

// Squared spectral norm of (B_s + B_d), 20 power-iteration steps, fixed seed.
ad::Var contraction_penalty(ad::Var b_s, ad::Var b_d);

struct AttentionParams {
  ad::Var value_embed;  // d x d token value embedding
  ad::Var pos_embed;    // d x d token position embedding
  ad::Var wq, wk, wv;   // d x d projections, split across heads
  ad::Var wo;           // d x 1 output projection per token
  int n_heads = 2;
};

struct AttentionResult {
  ad::Var output;              // n x d
  std::vector<ad::Var> b_d;    // per-sample head-averaged attention (d x d)
  ad::Var b_mean;              // batch mean of b_d
};

// Multi-head self-attention over the feature axis (features as tokens,
// evaluated per sample). Requires d divisible by n_heads.
AttentionResult dynamic_attention(ad::Var eta, const AttentionParams& params);

struct HybridOptions {
  double damping = 0.5;
  int max_iters = 50;
  double tol = 1e-8;
  int fixed_iters = 0;  // >0 pins the iteration count (exact gradients for FD)
};

// Solves eta = xi + (B_s + B_d(eta)) eta by damped fixed-point iteration on
// the tape. `bd_fn` maps the current iterate (n x d) to per-sample d x d
// matrices; pass an empty function for B_d = 0. Non-convergence increments
// *failures and the last iterate is returned.
ad::Var hybrid_transform(ad::Var xi, ad::Var b_static,
                         const std::function<std::vector<ad::Var>(ad::Var)>& bd_fn,
                         const HybridOptions& opts = {}, int* failures = nullptr);

// --- structural regression ----------------------------------------------------

// Fits B in X ~ X B (diagonal masked to zero) by Adam on
//   (1/2n) ||X - XB||_F^2 + lambda_sparse ||B||_1 + lambda_dag h(B),
// the continuous structure-learning objective over observed columns.
struct StructureFitOptions {
  double lambda_dag = 0.1;
  double lambda_sparse = 0.01;
  double lr = 0.02;
  int epochs = 600;
  unsigned long long seed = 0;
};
Eigen::MatrixXd fit_structure(const Eigen::MatrixXd& x,
                              const StructureFitOptions& opts);

// Thresholds |B| and searches the resulting digraph for a cycle; returns the
// node sequence when one exists.
std::optional<std::vector<int>> find_cycle(const Eigen::MatrixXd& b,
                                           double threshold);

}  // namespace mixnn::gsem
