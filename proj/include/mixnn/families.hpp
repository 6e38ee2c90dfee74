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

#include <optional>
#include <string>
#include <vector>

#include "mixnn/tensor.hpp"

// Outcome heads: one affine map per outcome to the family's parameter width,
// exact negative log-likelihoods (per-row means), and optional output-level
// SEM coupling across the concatenated parameter axis.

namespace mixnn::fam {

enum class Family {
  Gaussian,
  Binomial,
  Multinomial,
  Poisson,
  NegBin,
  MvGaussian,
  Multilabel,
};

std::string family_name(Family f);
Family family_from_name(const std::string& s);

struct OutcomeSpec {
  std::string name;
  std::vector<std::string> targets;  // one column per outcome dimension
  Family family = Family::Gaussian;
  int n_classes = 2;       // Multinomial
  double dispersion_init = 1.0;  // NegBin phi
  double weight = 1.0;     // per-outcome loss weight (default 1, unweighted sum)
};

// Width of the raw parameter block theta_k produced by the head.
int param_width(const OutcomeSpec& spec);

// --- negative log-likelihoods (mean over rows) --------------------------------

ad::Var gaussian_nll(ad::Var mu, ad::Var log_sigma2, ad::Var y);
ad::Var binomial_nll(ad::Var logit, ad::Var y);
ad::Var multinomial_nll(ad::Var logits, const std::vector<int>& y);
ad::Var poisson_nll(ad::Var eta, ad::Var y);
ad::Var negbin_nll(ad::Var eta, ad::Var log_phi, ad::Var y);
// chol_lower is the m x m factor of the outcome covariance; log_diag its
// log-diagonal (the 2*sum(log L_ii) term is taken from it directly).
ad::Var mvgaussian_nll(ad::Var mu, ad::Var chol_lower, ad::Var log_diag,
                       ad::Var y);
ad::Var multilabel_nll(ad::Var logits, ad::Var y);

// --- output-level SEM ----------------------------------------------------------

enum class OutputSemMode { None, Learned, Edges };

struct OutputEdge {
  std::string from;  // "outcome" or "outcome.k" for multi-parameter families
  std::string to;
  std::optional<double> weight;  // fixed value; nullopt = free parameter
};

// Resolves "name" / "name.k" references to indices in the stacked parameter
// axis. Throws DataError on unknown references or a cyclic edge list (the
// cycle path is included in the message).
struct ResolvedEdges {
  int total_width = 0;
  std::vector<int> from, to;
  std::vector<std::optional<double>> weight;
};
ResolvedEdges resolve_edges(const std::vector<OutputEdge>& edges,
                            const std::vector<OutcomeSpec>& outcomes);

// theta = (I - B_out)^{-1} theta_raw across the stacked parameter axis.
// For an acyclic fixed pattern this is the exact Neumann sum.
ad::Var apply_output_sem(ad::Var theta_raw, ad::Var b_out);

}  // namespace mixnn::fam
