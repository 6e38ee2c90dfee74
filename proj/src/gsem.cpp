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

#include "mixnn/gsem.hpp"

#include <cmath>

namespace mixnn::gsem {

using namespace ad;

Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "gelu") return Activation::Gelu;
  throw DataError("unknown activation '" + s + "'");
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Gelu: return "gelu";
  }
  return "relu";
}

Structure structure_from_name(const std::string& s) {
  if (s == "none") return Structure::None;
  if (s == "static") return Structure::Static;
  if (s == "static_free") return Structure::StaticFree;
  if (s == "dynamic") return Structure::Dynamic;
  if (s == "hybrid") return Structure::Hybrid;
  throw DataError("unknown structure mode '" + s + "'");
}

std::string structure_name(Structure s) {
  switch (s) {
    case Structure::None: return "none";
    case Structure::Static: return "static";
    case Structure::StaticFree: return "static_free";
    case Structure::Dynamic: return "dynamic";
    case Structure::Hybrid: return "hybrid";
  }
  return "none";
}

Var static_transform(Var xi, Var b_strict_lower) {
  Tape& t = *xi.tape();
  const int d = xi.cols();
  std::vector<double> eye(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) eye[static_cast<std::size_t>(i) * d + i] = 1.0;
  Var ident = t.constant(Shape{d, d}, std::move(eye));
  Var system = sub(ident, b_strict_lower);
  // (I - B) eta^T = xi^T with unit diagonal: forward substitution, exact.
  Var eta_t = triangular_solve(system, transpose(xi), /*lower=*/true,
                               /*unit_diag=*/true);
  return transpose(eta_t);
}

Var dag_penalty(Var b) {
  Tape& t = *b.tape();
  const int d = b.rows();
  Var had = mul(b, b);
  return sub(trace(matexp(had)), t.scalar_const(static_cast<double>(d)));
}

Var sparse_penalty(Var b) { return l1_norm(b); }

Var contraction_penalty(Var b_s, Var b_d) {
  return spectral_norm_sq(add(b_s, b_d), /*iters=*/20, /*seed=*/0x5eed);
}

AttentionResult dynamic_attention(Var eta, const AttentionParams& params) {
  Tape& t = *eta.tape();
  const int n = eta.rows(), d = eta.cols();
  const int heads = params.n_heads;
  if (heads <= 0 || d % heads != 0) {
    throw DataError("dynamic_attention: width " + std::to_string(d) +
                    " is not divisible into " + std::to_string(heads) +
                    " heads");
  }
  const int dk = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  AttentionResult res;
  std::vector<Var> out_rows;
  out_rows.reserve(n);
  Var bsum;
  for (int i = 0; i < n; ++i) {
    Var row = slice_rows(eta, i, i + 1);  // 1 x d
    // Token matrix: token j is eta_ij * E_j + P_j, one row per feature.
    Var tok = add(mul(transpose(row), params.value_embed), params.pos_embed);
    Var q = matmul(tok, params.wq);
    Var k = matmul(tok, params.wk);
    Var v = matmul(tok, params.wv);
    std::vector<Var> head_outs;
    Var bavg;
    for (int h = 0; h < heads; ++h) {
      Var qh = slice_cols(q, h * dk, (h + 1) * dk);
      Var kh = slice_cols(k, h * dk, (h + 1) * dk);
      Var vh = slice_cols(v, h * dk, (h + 1) * dk);
      Var att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
      head_outs.push_back(matmul(att, vh));
      bavg = bavg.valid() ? add(bavg, att) : att;
    }
    bavg = scale(bavg, 1.0 / heads);
    res.b_d.push_back(bavg);
    bsum = bsum.valid() ? add(bsum, bavg) : bavg;
    Var merged = concat_cols(head_outs);       // d x d
    Var out_row = transpose(matmul(merged, params.wo));  // 1 x d
    out_rows.push_back(out_row);
  }
  res.output = concat_rows(out_rows);
  res.b_mean = scale(bsum, 1.0 / n);
  (void)t;
  return res;
}

Var hybrid_transform(Var xi, Var b_static,
                     const std::function<std::vector<Var>(Var)>& bd_fn,
                     const HybridOptions& opts, int* failures) {
  const int n = xi.rows();
  const double gamma = opts.damping;
  const int iters = opts.fixed_iters > 0 ? opts.fixed_iters : opts.max_iters;
  Var eta = xi;
  double residual = 0;
  for (int it = 0; it < iters; ++it) {
    // target = xi + eta (B_s + B_d(eta))^T, evaluated row-wise when B_d is
    // sample-dependent.
    Var coupled;
    if (bd_fn) {
      std::vector<Var> bds = bd_fn(eta);
      std::vector<Var> rows;
      rows.reserve(n);
      for (int i = 0; i < n; ++i) {
        Var row = slice_rows(eta, i, i + 1);
        Var b = add(b_static, bds[i]);
        rows.push_back(matmul(row, transpose(b)));
      }
      coupled = concat_rows(rows);
    } else {
      coupled = matmul(eta, transpose(b_static));
    }
    Var target = add(xi, coupled);
    Var next = add(scale(eta, 1.0 - gamma), scale(target, gamma));
    residual = 0;
    const auto& ev = eta.values();
    const auto& nv = next.values();
    for (std::size_t i = 0; i < ev.size(); ++i)
      residual = std::max(residual, std::abs(nv[i] - ev[i]));
    eta = next;
    if (opts.fixed_iters == 0 && residual < opts.tol) return eta;
  }
  if (opts.fixed_iters == 0 && residual >= opts.tol && failures) ++(*failures);
  return eta;
}

Eigen::MatrixXd fit_structure(const Eigen::MatrixXd& x,
                              const StructureFitOptions& opts) {
  const int n = static_cast<int>(x.rows());
  const int p = static_cast<int>(x.cols());
  if (n == 0 || p == 0) throw DataError("fit_structure: empty data");

  std::vector<double> xs(static_cast<std::size_t>(n) * p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) xs[static_cast<std::size_t>(i) * p + j] = x(i, j);

  std::vector<double> offdiag(static_cast<std::size_t>(p) * p, 1.0);
  for (int i = 0; i < p; ++i) offdiag[static_cast<std::size_t>(i) * p + i] = 0.0;

  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> nd(0.0, 0.01);
  std::vector<double> bval(static_cast<std::size_t>(p) * p);
  for (auto& v : bval) v = nd(rng);

  std::vector<double> m(bval.size(), 0.0), v2(bval.size(), 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    Tape tape;
    Var b = tape.leaf(Shape{p, p}, bval);
    Var bm = mul(b, tape.constant(Shape{p, p}, std::span<const double>(offdiag)));
    Var xv = tape.constant(Shape{n, p}, std::span<const double>(xs));
    Var resid = sub(xv, matmul(xv, bm));
    Var loss = scale(sum(mul(resid, resid)), 0.5 / n);
    loss = add(loss, scale(sparse_penalty(bm), opts.lambda_sparse));
    loss = add(loss, scale(dag_penalty(bm), opts.lambda_dag));
    tape.backward(loss);
    const auto& g = b.grad();
    const double corr1 = 1.0 - std::pow(b1, epoch);
    const double corr2 = 1.0 - std::pow(b2, epoch);
    for (std::size_t i = 0; i < bval.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v2[i] = b2 * v2[i] + (1 - b2) * g[i] * g[i];
      bval[i] -= opts.lr * (m[i] / corr1) / (std::sqrt(v2[i] / corr2) + eps);
    }
  }
  Eigen::MatrixXd out(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j)
      out(i, j) = i == j ? 0.0 : bval[static_cast<std::size_t>(i) * p + j];
  return out;
}

std::optional<std::vector<int>> find_cycle(const Eigen::MatrixXd& b,
                                           double threshold) {
  const int p = static_cast<int>(b.rows());
  std::vector<std::vector<int>> adj(p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j)
      if (i != j && std::abs(b(i, j)) > threshold) adj[i].push_back(j);

  std::vector<int> state(p, 0);
  std::vector<int> stack;
  std::optional<std::vector<int>> found;
  std::function<bool(int)> dfs = [&](int u) {
    state[u] = 1;
    stack.push_back(u);
    for (int w : adj[u]) {
      if (state[w] == 1) {
        std::vector<int> cycle;
        bool in = false;
        for (int s : stack) {
          if (s == w) in = true;
          if (in) cycle.push_back(s);
        }
        cycle.push_back(w);
        found = cycle;
        return true;
      }
      if (state[w] == 0 && dfs(w)) return true;
    }
    stack.pop_back();
    state[u] = 2;
    return false;
  };
  for (int v = 0; v < p; ++v) {
    if (state[v] == 0 && dfs(v)) return found;
  }
  return std::nullopt;
}

}  // namespace mixnn::gsem
