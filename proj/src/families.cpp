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

#include "mixnn/families.hpp"

#include <cmath>
#include <map>

namespace mixnn::fam {

using namespace ad;

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

std::string family_name(Family f) {
  switch (f) {
    case Family::Gaussian: return "gaussian";
    case Family::Binomial: return "binomial";
    case Family::Multinomial: return "multinomial";
    case Family::Poisson: return "poisson";
    case Family::NegBin: return "negbin";
    case Family::MvGaussian: return "mvgaussian";
    case Family::Multilabel: return "multilabel";
  }
  return "gaussian";
}

Family family_from_name(const std::string& s) {
  if (s == "gaussian") return Family::Gaussian;
  if (s == "binomial") return Family::Binomial;
  if (s == "multinomial") return Family::Multinomial;
  if (s == "poisson") return Family::Poisson;
  if (s == "negbin") return Family::NegBin;
  if (s == "mvgaussian") return Family::MvGaussian;
  if (s == "multilabel") return Family::Multilabel;
  throw DataError("unknown outcome family '" + s + "'");
}

int param_width(const OutcomeSpec& spec) {
  switch (spec.family) {
    case Family::Gaussian:
    case Family::Binomial:
    case Family::Poisson:
    case Family::NegBin:
      return 1;
    case Family::Multinomial:
      return spec.n_classes;
    case Family::MvGaussian:
    case Family::Multilabel:
      return static_cast<int>(spec.targets.size());
  }
  return 1;
}

Var gaussian_nll(Var mu, Var log_sigma2, Var y) {
  Tape& t = *mu.tape();
  Var resid = sub(y, mu);
  Var quad = mul(mean(mul(resid, resid)), ad::exp(neg(log_sigma2)));
  Var logdet = add(log_sigma2, t.scalar_const(kLog2Pi));
  return scale(add(logdet, quad), 0.5);
}

Var binomial_nll(Var logit, Var y) {
  // softplus(x) - y x with softplus via logsumexp([0, x]) for stability.
  Tape& t = *logit.tape();
  Var zeros = t.constant(Shape{logit.rows(), 1},
                         std::vector<double>(logit.rows(), 0.0));
  std::vector<Var> parts{zeros, logit};
  Var softplus = logsumexp_rows(concat_cols(parts));
  return mean(sub(softplus, mul(y, logit)));
}

Var multinomial_nll(Var logits, const std::vector<int>& y) {
  Tape& t = *logits.tape();
  const int n = logits.rows(), k = logits.cols();
  if (static_cast<int>(y.size()) != n)
    throw DataError("multinomial_nll: label count mismatch");
  std::vector<double> onehot(static_cast<std::size_t>(n) * k, 0.0);
  for (int i = 0; i < n; ++i) {
    if (y[i] < 0 || y[i] >= k) {
      throw DataError("multinomial_nll: class label " + std::to_string(y[i]) +
                      " outside [0, " + std::to_string(k) + ")");
    }
    onehot[static_cast<std::size_t>(i) * k + y[i]] = 1.0;
  }
  Var oh = t.constant(Shape{n, k}, std::move(onehot));
  Var true_logit = sum_rows(mul(logits, oh));
  return mean(sub(logsumexp_rows(logits), true_logit));
}

Var poisson_nll(Var eta, Var y) {
  Tape& t = *eta.tape();
  Var ones = t.constant(Shape{y.rows(), y.cols()},
                        std::vector<double>(y.shape().size(), 1.0));
  Var lgam = lgamma(add(y, ones));  // constant wrt parameters
  return mean(add(sub(ad::exp(eta), mul(y, eta)), lgam));
}

Var negbin_nll(Var eta, Var log_phi, Var y) {
  Tape& t = *eta.tape();
  Var phi = ad::exp(log_phi);      // 1x1, broadcast below
  Var mu = ad::exp(eta);
  Var log_phimu = ad::log(add(phi, mu));
  Var ones = t.constant(Shape{y.rows(), y.cols()},
                        std::vector<double>(y.shape().size(), 1.0));
  // -lgamma(y+phi) + lgamma(phi) + lgamma(y+1)
  //   - phi (log phi - log(phi+mu)) - y (eta - log(phi+mu))
  Var term = neg(lgamma(add(y, phi)));
  term = add(term, lgamma(phi));
  term = add(term, lgamma(add(y, ones)));
  term = sub(term, mul(phi, sub(log_phi, log_phimu)));
  term = sub(term, mul(y, sub(eta, log_phimu)));
  return mean(term);
}

Var mvgaussian_nll(Var mu, Var chol_lower, Var log_diag, Var y) {
  Tape& t = *mu.tape();
  const int n = mu.rows(), m = mu.cols();
  if (y.rows() != n || y.cols() != m)
    throw DataError("mvgaussian_nll: target shape mismatch");
  Var resid = sub(y, mu);
  Var w = triangular_solve(chol_lower, transpose(resid), /*lower=*/true);
  Var quad = scale(sum(mul(w, w)), 1.0 / n);
  Var logdet = scale(sum(log_diag), 2.0);
  Var c = t.scalar_const(m * kLog2Pi);
  return scale(add(add(c, logdet), quad), 0.5);
}

Var multilabel_nll(Var logits, Var y) {
  // Coordinate-wise binomial; stable softplus per column, summed.
  Tape& t = *logits.tape();
  const int n = logits.rows(), m = logits.cols();
  Var total = t.scalar_const(0.0);
  for (int j = 0; j < m; ++j) {
    Var lj = slice_cols(logits, j, j + 1);
    Var yj = slice_cols(y, j, j + 1);
    total = add(total, binomial_nll(lj, yj));
  }
  return total;
}

ResolvedEdges resolve_edges(const std::vector<OutputEdge>& edges,
                            const std::vector<OutcomeSpec>& outcomes) {
  ResolvedEdges out;
  std::map<std::string, int> offset;
  int pos = 0;
  for (const auto& o : outcomes) {
    offset[o.name] = pos;
    pos += param_width(o);
  }
  out.total_width = pos;

  auto resolve = [&](const std::string& ref) {
    std::string name = ref;
    int idx = 0;
    const auto dot = ref.rfind('.');
    if (dot != std::string::npos) {
      const std::string tail = ref.substr(dot + 1);
      bool numeric = !tail.empty();
      for (char c : tail) numeric = numeric && std::isdigit(static_cast<unsigned char>(c));
      if (numeric && offset.count(ref.substr(0, dot))) {
        name = ref.substr(0, dot);
        idx = std::stoi(tail);
      }
    }
    auto it = offset.find(name);
    if (it == offset.end()) {
      throw DataError("output SEM edge references unknown outcome '" + ref + "'");
    }
    int width = 0;
    for (const auto& o : outcomes) {
      if (o.name == name) width = param_width(o);
    }
    if (idx < 0 || idx >= width) {
      throw DataError("output SEM edge '" + ref + "': parameter index out of range");
    }
    return it->second + idx;
  };

  for (const auto& e : edges) {
    out.from.push_back(resolve(e.from));
    out.to.push_back(resolve(e.to));
    out.weight.push_back(e.weight);
  }

  // Cycle rejection via DFS; the offending path is reported.
  std::vector<std::vector<int>> adj(out.total_width);
  for (std::size_t i = 0; i < out.from.size(); ++i)
    adj[out.from[i]].push_back(out.to[i]);
  std::vector<int> state(out.total_width, 0);
  std::vector<int> stack;
  std::function<void(int)> dfs = [&](int v) {
    state[v] = 1;
    stack.push_back(v);
    for (int w : adj[v]) {
      if (state[w] == 1) {
        std::string path;
        bool in_cycle = false;
        for (int s : stack) {
          if (s == w) in_cycle = true;
          if (in_cycle) path += std::to_string(s) + " -> ";
        }
        path += std::to_string(w);
        throw DataError("output SEM edge list contains a cycle: " + path);
      }
      if (state[w] == 0) dfs(w);
    }
    stack.pop_back();
    state[v] = 2;
  };
  for (int v = 0; v < out.total_width; ++v) {
    if (state[v] == 0) dfs(v);
  }
  return out;
}

Var apply_output_sem(Var theta_raw, Var b_out) {
  // theta^T = (I - B)^{-1} theta_raw^T via the Neumann sum; exact once B is
  // nilpotent (acyclic pattern), and the learned mode drives B toward that
  // set with the DAG penalty.
  const int p = b_out.rows();
  Var x = transpose(theta_raw);
  Var acc = x;
  for (int k = 1; k < p; ++k) {
    x = matmul(b_out, x);
    acc = add(acc, x);
  }
  return transpose(acc);
}

}  // namespace mixnn::fam
