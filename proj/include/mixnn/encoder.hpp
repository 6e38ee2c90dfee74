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
#include <random>
#include <span>
#include <string>

#include "mixnn/covariance.hpp"
#include "mixnn/tensor.hpp"

// Mixed-effects encoder: fixed-effect embedding plus variational random
// effects combined as H = H_fixed + sum_{g,s} z_{g,s} (x) u_{g,s}. Random
// effects use the whitened parameterization: the variational table holds
// N(mu, diag(sigma^2)) coordinates v, and structured covariance enters as a
// fixed (or trained) correlating transform u = L v across levels.

namespace mixnn::enc {

enum class UnknownStrategy { Zero, Learned };

struct EncoderConfig {
  int embed_dim = 16;
  std::map<std::string, int> cat_embed_dims;  // overrides per column
  bool enforce_centering = true;
  UnknownStrategy unknown_strategy = UnknownStrategy::Zero;
};

// Default embedding width for a categorical of the given cardinality.
int cat_embed_dim(const EncoderConfig& cfg, const std::string& col,
                  int cardinality);

// Subtracts the column mean from every row (the centering constraint on the
// variational means, applied inside the forward pass).
ad::Var center_rows(ad::Var mu);

// Draws the table in whitened coordinates: train mode v = mu + sigma (x) eps,
// eval mode v = mu; then applies the correlating factor when present.
// `chol` may be an invalid Var for the identity transform.
ad::Var sample_table(ad::Tape& tape, ad::Var mu, ad::Var log_var, ad::Var chol,
                     bool train, std::mt19937_64& rng);

// Gathers rows by group index; index -1 selects the unknown-group row
// (zero vector or the learned row, per strategy).
ad::Var gather_with_unknown(ad::Var table, std::span<const int> index,
                            ad::Var unknown_row);

// H_fixed + sum_t z_t (x) u_t with the scalar slope broadcast across the
// embedding coordinates.
ad::Var combine(ad::Var h_fixed, std::span<const ad::Var> z_cols,
                std::span<const ad::Var> u_rows);

}  // namespace mixnn::enc
