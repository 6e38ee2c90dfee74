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

#include "mixnn/manifold.hpp"

#include <cmath>

namespace mixnn::mani {

using namespace ad;

void ManifoldBlockConfig::validate() const {
  if (grid_shape.empty() || grid_shape.size() > 2) {
    throw DataError("manifold block: grid_shape must be 1-D or 2-D");
  }
  for (int g : grid_shape) {
    if (g < 1) throw DataError("manifold block: grid dimensions must be >= 1");
  }
  if (cells() > 4096) {
    throw DataError("manifold block: " + std::to_string(cells()) +
                    " cells exceeds the 4096 limit");
  }
  if (spde_alpha < 1 || spde_alpha > 3) {
    throw DataError("manifold block: spde_alpha must be in {1, 2, 3}");
  }
  if (spde_kappa_init <= 0) {
    throw DataError("manifold block: spde_kappa_init must be > 0");
  }
}

Aggregation aggregation_from_name(const std::string& s) {
  if (s == "concat") return Aggregation::Concat;
  if (s == "sum") return Aggregation::Sum;
  if (s == "attention") return Aggregation::Attention;
  throw DataError("unknown aggregation mode '" + s + "'");
}

std::string aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::Concat: return "concat";
    case Aggregation::Sum: return "sum";
    case Aggregation::Attention: return "attention";
  }
  return "sum";
}

namespace {

std::vector<std::pair<int, int>> grid_coords(const std::vector<int>& shape) {
  std::vector<std::pair<int, int>> out;
  if (shape.size() == 1) {
    for (int i = 0; i < shape[0]; ++i) out.emplace_back(i, 0);
  } else {
    for (int i = 0; i < shape[0]; ++i)
      for (int j = 0; j < shape[1]; ++j) out.emplace_back(i, j);
  }
  return out;
}

}  // namespace

Eigen::SparseMatrix<double> discrete_laplacian(const std::vector<int>& shape) {
  if (shape.empty() || shape.size() > 2) {
    throw DataError("discrete_laplacian: grid must be 1-D or 2-D");
  }
  const auto coords = grid_coords(shape);
  const int n = static_cast<int>(coords.size());
  const int cols = shape.size() == 2 ? shape[1] : 1;
  auto index = [&](int i, int j) { return i * cols + j; };

  std::vector<Eigen::Triplet<double>> trip;
  for (int c = 0; c < n; ++c) {
    const auto [i, j] = coords[c];
    int neighbors = 0;
    auto link = [&](int ni, int nj) {
      trip.emplace_back(c, index(ni, nj), 1.0);
      ++neighbors;
    };
    if (i > 0) link(i - 1, j);
    if (i + 1 < shape[0]) link(i + 1, j);
    if (shape.size() == 2) {
      if (j > 0) link(i, j - 1);
      if (j + 1 < shape[1]) link(i, j + 1);
    }
    trip.emplace_back(c, c, -static_cast<double>(neighbors));
  }
  Eigen::SparseMatrix<double> lap(n, n);
  lap.setFromTriplets(trip.begin(), trip.end());
  return lap;
}

SparsePrecision spde_precision(double kappa, int alpha,
                               const Eigen::SparseMatrix<double>& lap) {
  if (kappa <= 0) throw DataError("spde_precision: kappa must be > 0");
  if (alpha < 1) throw DataError("spde_precision: alpha must be >= 1");
  const int n = static_cast<int>(lap.rows());
  Eigen::SparseMatrix<double> eye(n, n);
  eye.setIdentity();
  Eigen::SparseMatrix<double> base = kappa * kappa * eye - lap;
  Eigen::SparseMatrix<double> q = base;
  for (int a = 1; a < alpha; ++a) q = (q * base).pruned();

  SparsePrecision out;
  out.dim = n;
  out.q = q;
  out.llt = std::make_shared<Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>>();
  out.llt->compute(q);
  if (out.llt->info() != Eigen::Success) {
    throw NumericalError("spde_precision: factorization failed at kappa = " +
                         std::to_string(kappa));
  }
  return out;
}

Eigen::VectorXd spde_sample(const SparsePrecision& q,
                            const Eigen::VectorXd& eps) {
  if (eps.size() != q.dim) throw DataError("spde_sample: eps length mismatch");
  // P Q P^T = L L^T; u = P^T L^{-T} eps has covariance Q^{-1}.
  Eigen::VectorXd y = q.llt->matrixU().solve(eps);
  return q.llt->permutationPinv() * y;
}

ad::Var spde_field_node(Tape& tape, Var log_kappa, int alpha,
                        const Eigen::MatrixXd& lap_dense,
                        const std::vector<double>& eps) {
  const int n = static_cast<int>(lap_dense.rows());
  std::vector<double> eye(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> lapv(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    eye[static_cast<std::size_t>(i) * n + i] = 1.0;
    for (int j = 0; j < n; ++j)
      lapv[static_cast<std::size_t>(i) * n + j] = lap_dense(i, j);
  }
  Var k2 = ad::exp(scale(log_kappa, 2.0));
  Var base = sub(mul(k2, tape.constant(Shape{n, n}, std::move(eye))),
                 tape.constant(Shape{n, n}, std::move(lapv)));
  Var q = base;
  for (int a = 1; a < alpha; ++a) q = matmul(q, base);
  Var l = cholesky(q);
  Var epsv = tape.constant(Shape{n, 1}, std::span<const double>(eps));
  // L^T u = eps
  return triangular_solve(transpose(l), epsv, /*lower=*/false);
}

Eigen::MatrixXd spatial_sem_mask(const std::vector<int>& shape,
                                 double lengthscale) {
  if (lengthscale <= 0) throw DataError("spatial SEM: lengthscale must be > 0");
  const auto coords = grid_coords(shape);
  const int n = static_cast<int>(coords.size());
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) {  // raster-order strict lower triangle
      const double di = coords[i].first - coords[j].first;
      const double dj = coords[i].second - coords[j].second;
      const double d2 = di * di + dj * dj;
      mask(i, j) = std::exp(-d2 / (2.0 * lengthscale * lengthscale));
    }
  }
  return mask;
}

Var sem_layer_spatial(Var xi_grid, Var b_free, const Eigen::MatrixXd& mask) {
  Tape& t = *xi_grid.tape();
  const int n = static_cast<int>(mask.rows());
  std::vector<double> maskv(static_cast<std::size_t>(n) * n);
  std::vector<double> eye(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    eye[static_cast<std::size_t>(i) * n + i] = 1.0;
    for (int j = 0; j < n; ++j)
      maskv[static_cast<std::size_t>(i) * n + j] = mask(i, j);
  }
  Var b = mul(b_free, t.constant(Shape{n, n}, std::move(maskv)));
  Var system = sub(t.constant(Shape{n, n}, std::move(eye)), b);
  Var eta_t = triangular_solve(system, transpose(xi_grid), /*lower=*/true,
                               /*unit_diag=*/true);
  return transpose(eta_t);
}

Var aggregate(std::span<const Var> blocks, Aggregation mode, Var logits) {
  if (blocks.empty()) throw DataError("aggregate: no block outputs");
  switch (mode) {
    case Aggregation::Concat:
      return concat_cols(blocks);
    case Aggregation::Sum: {
      Var acc = blocks[0];
      for (std::size_t i = 1; i < blocks.size(); ++i) {
        if (blocks[i].cols() != acc.cols()) {
          throw DataError("aggregate: sum requires equal block widths");
        }
        acc = add(acc, blocks[i]);
      }
      return acc;
    }
    case Aggregation::Attention: {
      if (!logits.valid() || logits.shape().size() != static_cast<int>(blocks.size())) {
        throw DataError("aggregate: attention needs one logit per block");
      }
      Var w = softmax_rows(logits);  // 1 x L
      Var acc;
      for (std::size_t i = 0; i < blocks.size(); ++i) {
        Var wi = slice_cols(w, static_cast<int>(i), static_cast<int>(i) + 1);
        Var term = mul(wi, blocks[i]);
        acc = acc.valid() ? add(acc, term) : term;
      }
      return acc;
    }
  }
  throw DataError("aggregate: unreachable");
}

}  // namespace mixnn::mani
