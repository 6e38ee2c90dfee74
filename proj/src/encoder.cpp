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

#include "mixnn/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace mixnn::enc {

using namespace ad;

int cat_embed_dim(const EncoderConfig& cfg, const std::string& col,
                  int cardinality) {
  auto it = cfg.cat_embed_dims.find(col);
  if (it != cfg.cat_embed_dims.end()) return it->second;
  return std::max(1, std::min(16, (cardinality + 1) / 2));
}

Var center_rows(Var mu) {
  Tape& t = *mu.tape();
  const int rows = mu.rows();
  Var colmean = scale(sum_cols(mu), 1.0 / rows);
  (void)t;
  return sub(mu, colmean);
}

Var sample_table(Tape& tape, Var mu, Var log_var, Var chol, bool train,
                 std::mt19937_64& rng) {
  Var v = mu;
  if (train) {
    const int n = mu.rows(), d = mu.cols();
    std::normal_distribution<double> nd;
    std::vector<double> eps(static_cast<std::size_t>(n) * d);
    for (auto& e : eps) e = nd(rng);
    Var epsv = tape.constant(Shape{n, d}, std::move(eps));
    Var sigma = ad::exp(scale(log_var, 0.5));
    v = add(mu, mul(sigma, epsv));
  }
  if (chol.valid()) v = matmul(chol, v);
  return v;
}

Var gather_with_unknown(Var table, std::span<const int> index,
                        Var unknown_row) {
  const int n_levels = table.rows();
  bool any_unknown = false;
  for (int i : index) any_unknown = any_unknown || i < 0;
  if (!any_unknown) return gather_rows(table, index);

  Var ext = table;
  if (unknown_row.valid()) {
    std::vector<Var> parts{table, unknown_row};
    ext = concat_rows(parts);
  } else {
    Tape& t = *table.tape();
    Var zero = t.constant(Shape{1, table.cols()},
                          std::vector<double>(table.cols(), 0.0));
    std::vector<Var> parts{table, zero};
    ext = concat_rows(parts);
  }
  std::vector<int> remapped(index.begin(), index.end());
  for (auto& i : remapped) {
    if (i < 0) i = n_levels;
  }
  return gather_rows(ext, remapped);
}

Var combine(Var h_fixed, std::span<const ad::Var> z_cols,
            std::span<const ad::Var> u_rows) {
  if (z_cols.size() != u_rows.size()) {
    throw NumericalError("combine: term count mismatch");
  }
  Var h = h_fixed;
  for (std::size_t t = 0; t < z_cols.size(); ++t) {
    h = add(h, mul(z_cols[t], u_rows[t]));
  }
  return h;
}

}  // namespace mixnn::enc
