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

#include "mixnn/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mixnn::interpret {

using namespace ad;

namespace {

std::vector<int> all_rows(int n) {
  std::vector<int> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

double sigmoid_d(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Natural-scale transform of the raw head parameters.
OutcomePrediction naturalize(const fam::OutcomeSpec& spec,
                             const std::vector<double>& theta, int n, int w) {
  OutcomePrediction out;
  out.name = spec.name;
  out.family = spec.family;
  out.width = w;
  out.values.resize(theta.size());
  switch (spec.family) {
    case fam::Family::Gaussian:
    case fam::Family::MvGaussian:
      out.values = theta;
      break;
    case fam::Family::Poisson:
    case fam::Family::NegBin:
      for (std::size_t i = 0; i < theta.size(); ++i)
        out.values[i] = std::exp(theta[i]);
      break;
    case fam::Family::Binomial:
    case fam::Family::Multilabel:
      for (std::size_t i = 0; i < theta.size(); ++i)
        out.values[i] = sigmoid_d(theta[i]);
      break;
    case fam::Family::Multinomial: {
      for (int i = 0; i < n; ++i) {
        double mx = theta[static_cast<std::size_t>(i) * w];
        for (int j = 1; j < w; ++j)
          mx = std::max(mx, theta[static_cast<std::size_t>(i) * w + j]);
        double z = 0;
        for (int j = 0; j < w; ++j)
          z += std::exp(theta[static_cast<std::size_t>(i) * w + j] - mx);
        for (int j = 0; j < w; ++j)
          out.values[static_cast<std::size_t>(i) * w + j] =
              std::exp(theta[static_cast<std::size_t>(i) * w + j] - mx) / z;
      }
      break;
    }
  }
  if (spec.family == fam::Family::Binomial) {
    out.classes.resize(n);
    for (int i = 0; i < n; ++i) out.classes[i] = out.values[i] > 0.5 ? 1 : 0;
  } else if (spec.family == fam::Family::Multinomial) {
    out.classes.resize(n);
    for (int i = 0; i < n; ++i) {
      int best = 0;
      for (int j = 1; j < w; ++j) {
        if (out.values[static_cast<std::size_t>(i) * w + j] >
            out.values[static_cast<std::size_t>(i) * w + best]) {
          best = j;
        }
      }
      out.classes[i] = best;
    }
  }
  return out;
}

// One deterministic or sampled pass over given rows; returns natural-scale
// predictions for every outcome.
Predictions run_forward(const Model& model, const PreparedData& data,
                        const std::vector<int>& rows, const ForwardOptions& opts,
                        std::mt19937_64& rng) {
  Tape tape;
  std::map<std::string, Var> leaves;
  auto fwd = model.forward(tape, data, rows, opts, rng, leaves);
  Predictions out;
  out.n = static_cast<int>(rows.size());
  for (std::size_t k = 0; k < model.cfg.outcomes.size(); ++k) {
    const int w = fam::param_width(model.cfg.outcomes[k]);
    out.outcomes.push_back(
        naturalize(model.cfg.outcomes[k], fwd.theta[k].values(), out.n, w));
  }
  return out;
}

double quantile7(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double h = (v.size() - 1) * q;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = h - lo;
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

double variance_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double m = 0;
  for (double x : v) m += x;
  m /= v.size();
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / v.size();
}

// Single-row table holding column means (mode level for categoricals) with
// every grouping column set to an unseen label, so the probe row carries the
// population-level prediction.
ColumnTable population_row(const Model& model, const ColumnTable& data) {
  ColumnTable probe;
  std::set<std::string> needed;
  for (const auto& f : model.ast.fixed) {
    if (f.kind != formula::TermKind::Intercept) needed.insert(f.name);
  }
  for (const auto& r : model.ast.random) {
    needed.insert(r.group);
    for (const auto& s : r.slopes) needed.insert(s);
  }
  for (const auto& name : needed) {
    const Column& c = data.at(name);
    const bool is_group = [&] {
      for (const auto& r : model.ast.random) {
        if (r.group == name) return true;
      }
      return false;
    }();
    if (is_group) {
      probe.add_categorical(name, {0}, {"__population__"});
      continue;
    }
    if (c.kind == Column::Kind::Numeric) {
      double m = 0;
      for (double v : c.num) m += v;
      probe.add_numeric(name, {m / static_cast<double>(c.num.size())});
    } else {
      std::map<int, int> counts;
      for (int code : c.codes) counts[code]++;
      int best = 0, best_count = -1;
      for (const auto& [code, cnt] : counts) {
        if (cnt > best_count) {
          best = code;
          best_count = cnt;
        }
      }
      probe.add_categorical(name, {0}, {c.levels[best]});
    }
  }
  probe.n_rows = 1;
  return probe;
}

// Natural-scale node for a width-1 outcome (the quantity linearized and
// attributed by the interpretation tools).
Var natural_node(const fam::OutcomeSpec& spec, Var theta) {
  switch (spec.family) {
    case fam::Family::Poisson:
    case fam::Family::NegBin:
      return ad::exp(theta);
    case fam::Family::Binomial:
    case fam::Family::Multilabel:
      return sigmoid(theta);
    default:
      return theta;
  }
}

// Effective covariance factor with trained structure parameters substituted.
Eigen::MatrixXd effective_chol(const Model& model, const TableInfo& t) {
  cov::CovarianceSpec spec = t.cov;
  if (model.params.has(t.key + "/rho_raw")) {
    spec.rho = std::tanh(model.params.at(t.key + "/rho_raw").value[0]);
  }
  if (model.params.has(t.key + "/log_ell")) {
    spec.lengthscale = std::exp(model.params.at(t.key + "/log_ell").value[0]);
  }
  return cov::build_factor(spec, t.n_levels).chol_lower;
}

}  // namespace

Predictions predict_point(const Model& model, const ColumnTable& data) {
  PreparedData prepared = model.prepare(data, /*require_targets=*/false);
  std::mt19937_64 rng(0);
  ForwardOptions opts;  // eval mode: posterior means, deterministic
  return run_forward(model, prepared, all_rows(prepared.n), opts, rng);
}

Interval predict_interval(const Model& model, const ColumnTable& data,
                          int outcome_index, int m_samples, double alpha,
                          unsigned long long seed,
                          bool include_observation_noise) {
  if (m_samples < 2) throw DataError("predict_interval: need at least 2 samples");
  const auto& spec = model.cfg.outcomes.at(outcome_index);
  if (fam::param_width(spec) != 1) {
    throw DataError("predict_interval: only width-1 outcomes supported");
  }
  PreparedData prepared = model.prepare(data, /*require_targets=*/false);
  const int n = prepared.n;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;

  double obs_sd = 0.0;
  if (include_observation_noise && spec.family == fam::Family::Gaussian) {
    obs_sd = std::sqrt(
        std::exp(model.params.at("head/" + spec.name + "/log_sigma2").value[0]));
  }

  std::vector<std::vector<double>> draws(n);
  for (auto& d : draws) d.reserve(m_samples);
  ForwardOptions opts;
  opts.sample_re = true;
  const auto rows = all_rows(n);
  for (int m = 0; m < m_samples; ++m) {
    auto pred = run_forward(model, prepared, rows, opts, rng);
    const auto& v = pred.outcomes[outcome_index].values;
    for (int i = 0; i < n; ++i) {
      double y = v[i];
      if (obs_sd > 0) y += obs_sd * nd(rng);
      draws[i].push_back(y);
    }
  }
  Interval out;
  out.alpha = alpha;
  out.lower.resize(n);
  out.upper.resize(n);
  for (int i = 0; i < n; ++i) {
    out.lower[i] = quantile7(draws[i], alpha / 2.0);
    out.upper[i] = quantile7(draws[i], 1.0 - alpha / 2.0);
  }
  return out;
}

ExtractedParameters extract_parameters(const Model& model,
                                       const ColumnTable& data,
                                       int outcome_index) {
  ExtractedParameters out;
  const auto& spec = model.cfg.outcomes.at(outcome_index);

  ColumnTable probe = population_row(model, data);
  PreparedData prepared = model.prepare(probe, /*require_targets=*/false);
  out.names = prepared.design.cont_names;

  Tape tape;
  std::map<std::string, Var> leaves;
  ForwardOptions opts;
  opts.probe_inputs = true;
  std::mt19937_64 rng(0);
  auto fwd = model.forward(tape, prepared, {0}, opts, rng, leaves);
  Var pred = natural_node(spec, slice_cols(fwd.theta[outcome_index], 0, 1));
  tape.backward(pred);

  const double f0 = pred.scalar();
  double dot = 0;
  if (fwd.x_cont.valid()) {
    const auto& g = fwd.x_cont.grad();
    const auto& xv = fwd.x_cont.values();
    out.coefficients.assign(g.begin(), g.end());
    for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * xv[j];
  }
  out.intercept = f0 - dot;

  // Outcome-scale variance components: effective per-level values a_g = J u_g
  // with J the gradient of the prediction wrt the term's contribution.
  const int d = model.encoder_width;
  for (std::size_t t = 0; t < model.tables.size(); ++t) {
    const auto& info = model.tables[t];
    const auto& jg = fwd.contribs[t].grad();  // 1 x d
    const Tensor& mu = model.params.at(info.key + "/mu");
    const Tensor& lv = model.params.at(info.key + "/logvar");
    const int levels = info.n_levels;

    // Mirror the forward transform: centered mean, then the covariance factor.
    Eigen::MatrixXd muc(levels, d);
    for (int i = 0; i < levels; ++i)
      for (int j = 0; j < d; ++j)
        muc(i, j) = mu.value[static_cast<std::size_t>(i) * d + j];
    if (model.cfg.encoder.enforce_centering && info.centering_applies()) {
      muc.rowwise() -= muc.colwise().mean();
    }
    Eigen::MatrixXd lmat;
    if (info.has_cov) {
      lmat = effective_chol(model, info);
      muc = lmat * muc;
    }

    double second_moment = 0;
    for (int g = 0; g < levels; ++g) {
      double a = 0;
      for (int j = 0; j < d; ++j) a += jg[j] * muc(g, j);
      second_moment += a * a;
    }
    second_moment /= levels;

    double j2s2 = 0;  // mean over levels of sum_j J_j^2 sigma_{g j}^2
    std::vector<double> per_level(levels, 0.0);
    for (int g = 0; g < levels; ++g) {
      double s = 0;
      for (int j = 0; j < d; ++j) {
        const double sg2 = std::exp(lv.value[static_cast<std::size_t>(g) * d + j]);
        s += jg[j] * jg[j] * sg2;
      }
      per_level[g] = s;
    }
    if (info.has_cov) {
      for (int g = 0; g < levels; ++g) {
        double s = 0;
        for (int h = 0; h < levels; ++h) s += lmat(g, h) * lmat(g, h) * per_level[h];
        j2s2 += s;
      }
    } else {
      for (int g = 0; g < levels; ++g) j2s2 += per_level[g];
    }
    j2s2 /= levels;

    out.variance_components[info.key] = second_moment + j2s2;
  }

  if (spec.family == fam::Family::Gaussian) {
    out.sigma2_eps =
        std::exp(model.params.at("head/" + spec.name + "/log_sigma2").value[0]);
  }
  return out;
}

VarianceDecomposition variance_decomposition(const Model& model,
                                             const ColumnTable& data,
                                             int outcome_index) {
  VarianceDecomposition out;
  const auto& spec = model.cfg.outcomes.at(outcome_index);
  PreparedData prepared = model.prepare(data, /*require_targets=*/true);
  const auto rows = all_rows(prepared.n);
  std::mt19937_64 rng(0);

  ForwardOptions eval_opts;
  auto full = run_forward(model, prepared, rows, eval_opts, rng);
  const auto& yhat = full.outcomes[outcome_index].values;

  ForwardOptions fixed_opts;
  for (std::size_t t = 0; t < model.tables.size(); ++t) {
    fixed_opts.mute_tables.push_back(static_cast<int>(t));
  }
  auto fixed_only = run_forward(model, prepared, rows, fixed_opts, rng);
  out.sigma2_fixed = variance_of(fixed_only.outcomes[outcome_index].values);

  for (std::size_t t = 0; t < model.tables.size(); ++t) {
    ForwardOptions opts;
    opts.mute_tables.push_back(static_cast<int>(t));
    auto without = run_forward(model, prepared, rows, opts, rng);
    std::vector<double> contrib(prepared.n);
    for (int i = 0; i < prepared.n; ++i) {
      contrib[i] = yhat[i] - without.outcomes[outcome_index].values[i];
    }
    out.sigma2_u[model.tables[t].key] = variance_of(contrib);
  }

  const auto& y = prepared.y_num[outcome_index];
  std::vector<double> resid(prepared.n);
  for (int i = 0; i < prepared.n; ++i) resid[i] = y[i] - yhat[i];

  if (spec.family == fam::Family::Gaussian) {
    out.sigma2_eps =
        std::exp(model.params.at("head/" + spec.name + "/log_sigma2").value[0]);
  } else {
    out.sigma2_eps = variance_of(resid);
  }

  std::map<std::string, double> group_var;
  for (const auto& t : model.tables) {
    group_var[t.group] += out.sigma2_u[t.key];
  }
  for (const auto& [g, v] : group_var) {
    out.icc[g] = v / (v + out.sigma2_eps);
  }
  out.r_squared = 1.0 - out.sigma2_eps / std::max(variance_of(y), 1e-300);
  return out;
}

namespace {

struct FeatureSet {
  std::vector<std::string> names;
  std::vector<bool> is_cat;       // parallel to names
  std::vector<int> cont_index;    // into design cont columns (-1 for cats)
  std::vector<int> cat_index;     // into design cat columns (-1 for cont)
  std::vector<double> cont_background;
  std::vector<int> cat_background;
};

FeatureSet feature_set(const PreparedData& prepared,
                       const ColumnTable* background) {
  FeatureSet fs;
  const auto& d = prepared.design;
  for (int j = 0; j < d.p_cont; ++j) {
    fs.names.push_back(d.cont_names[j]);
    fs.is_cat.push_back(false);
    fs.cont_index.push_back(j);
    fs.cat_index.push_back(-1);
    double m = 0;
    if (background && background->has(d.cont_names[j])) {
      const auto& col = background->at(d.cont_names[j]).num;
      for (double v : col) m += v;
      m /= static_cast<double>(col.size());
    } else {
      for (int i = 0; i < d.n; ++i)
        m += d.x_cont[static_cast<std::size_t>(i) * d.p_cont + j];
      m /= d.n;
    }
    fs.cont_background.push_back(m);
  }
  for (std::size_t c = 0; c < d.cats.size(); ++c) {
    fs.names.push_back(d.cats[c].name);
    fs.is_cat.push_back(true);
    fs.cont_index.push_back(-1);
    fs.cat_index.push_back(static_cast<int>(c));
    std::map<int, int> counts;
    for (int code : d.cats[c].codes) counts[code]++;
    int best = 0, bc = -1;
    for (const auto& [code, cnt] : counts) {
      if (cnt > bc) {
        best = code;
        bc = cnt;
      }
    }
    fs.cat_background.push_back(best);
  }
  return fs;
}

// Prediction of rows with the features outside the coalition replaced by
// their background values.
std::vector<double> coalition_value(const Model& model,
                                    const PreparedData& prepared,
                                    const std::vector<int>& rows,
                                    const FeatureSet& fs, unsigned mask,
                                    int outcome_index) {
  PreparedData masked = prepared;
  auto& d = masked.design;
  for (std::size_t f = 0; f < fs.names.size(); ++f) {
    if (mask & (1u << f)) continue;  // feature in coalition: keep observed
    if (fs.is_cat[f]) {
      auto& codes = d.cats[fs.cat_index[f]].codes;
      std::fill(codes.begin(), codes.end(), fs.cat_background[f]);
    } else {
      const int j = fs.cont_index[f];
      for (int i = 0; i < d.n; ++i)
        d.x_cont[static_cast<std::size_t>(i) * d.p_cont + j] =
            fs.cont_background[f];
    }
  }
  std::mt19937_64 rng(0);
  ForwardOptions opts;
  auto pred = run_forward(model, masked, rows, opts, rng);
  const auto& o = pred.outcomes[outcome_index];
  std::vector<double> v(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    v[i] = o.values[static_cast<std::size_t>(i) * o.width];
  }
  return v;
}

}  // namespace

ShapReport shapley_values(const Model& model, const ColumnTable& data,
                          int outcome_index, bool exact, int n_permutations,
                          unsigned long long seed,
                          const ColumnTable* background) {
  PreparedData prepared = model.prepare(data, /*require_targets=*/false);
  const auto rows = all_rows(prepared.n);
  FeatureSet fs = feature_set(prepared, background);
  const int p = static_cast<int>(fs.names.size());
  const int n = prepared.n;

  ShapReport rep;
  rep.feature_names = fs.names;
  rep.n = n;
  rep.p = p;
  rep.exact = exact;
  rep.phi.assign(static_cast<std::size_t>(n) * p, 0.0);

  if (p == 0) return rep;

  if (exact) {
    if (p > 12) {
      throw DataError("exact Shapley mode supports at most 12 features (got " +
                      std::to_string(p) + "); use sampled mode");
    }
    const unsigned total = 1u << p;
    std::vector<std::vector<double>> value(total);
    for (unsigned mask = 0; mask < total; ++mask) {
      value[mask] = coalition_value(model, prepared, rows, fs, mask, outcome_index);
    }
    rep.baseline = value[0];

    std::vector<double> fact(p + 1, 1.0);
    for (int i = 1; i <= p; ++i) fact[i] = fact[i - 1] * i;
    for (int j = 0; j < p; ++j) {
      for (unsigned mask = 0; mask < total; ++mask) {
        if (mask & (1u << j)) continue;
        const int s = __builtin_popcount(mask);
        const double w = fact[s] * fact[p - s - 1] / fact[p];
        const auto& with = value[mask | (1u << j)];
        const auto& without = value[mask];
        for (int i = 0; i < n; ++i) {
          rep.phi[static_cast<std::size_t>(i) * p + j] += w * (with[i] - without[i]);
        }
      }
    }
  } else {
    if (n_permutations < 2) n_permutations = 2;
    if (n_permutations % 2) ++n_permutations;  // antithetic pairs
    std::mt19937_64 rng(seed);
    std::vector<int> perm(p);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> sum(static_cast<std::size_t>(n) * p, 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(n) * p, 0.0);
    rep.baseline = coalition_value(model, prepared, rows, fs, 0, outcome_index);

    auto walk = [&](const std::vector<int>& order) {
      unsigned mask = 0;
      std::vector<double> prev = rep.baseline;
      for (int j : order) {
        mask |= (1u << j);
        auto cur = coalition_value(model, prepared, rows, fs, mask, outcome_index);
        for (int i = 0; i < n; ++i) {
          const double m = cur[i] - prev[i];
          sum[static_cast<std::size_t>(i) * p + j] += m;
          sumsq[static_cast<std::size_t>(i) * p + j] += m * m;
        }
        prev = std::move(cur);
      }
    };
    const int pairs = n_permutations / 2;
    for (int k = 0; k < pairs; ++k) {
      std::shuffle(perm.begin(), perm.end(), rng);
      walk(perm);
      std::vector<int> rev(perm.rbegin(), perm.rend());
      walk(rev);
    }
    const double kperm = n_permutations;
    rep.mc_se.assign(p, 0.0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < p; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * p + j;
        const double mean = sum[idx] / kperm;
        rep.phi[idx] = mean;
        const double var = std::max(0.0, sumsq[idx] / kperm - mean * mean);
        rep.mc_se[j] += std::sqrt(var / kperm);
      }
    }
    for (double& se : rep.mc_se) se /= n;
  }

  // Edge importance for structured backbones: |B| scaled by the mean
  // magnitude of the prediction gradient at the target coordinate.
  try {
    Eigen::MatrixXd b = model.structure_matrix();
    Tape tape;
    std::map<std::string, Var> leaves;
    ForwardOptions opts;
    std::mt19937_64 rng(0);
    auto fwd = model.forward(tape, prepared, rows, opts, rng, leaves);
    Var pred = mean(natural_node(model.cfg.outcomes[outcome_index],
                                 slice_cols(fwd.theta[outcome_index], 0, 1)));
    tape.backward(pred);
    if (fwd.first_structure_eta.valid()) {
      const auto& g = fwd.first_structure_eta.grad();
      const int dsz = fwd.first_structure_eta.cols();
      Eigen::VectorXd w = Eigen::VectorXd::Zero(dsz);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < dsz; ++j)
          w(j) += std::abs(g[static_cast<std::size_t>(i) * dsz + j]);
      w /= n;
      rep.edge_importance = b.cwiseAbs();
      for (int i = 0; i < b.rows(); ++i) rep.edge_importance.row(i) *= w(i);
    }
  } catch (const DataError&) {
    // unstructured model: no edge importances
  }
  return rep;
}

RandomEffectShap shapley_random_effects(const Model& model,
                                        const ColumnTable& data,
                                        int outcome_index) {
  RandomEffectShap rep;
  const int t = static_cast<int>(model.tables.size());
  if (t > 8) {
    throw DataError("shapley_random_effects supports at most 8 terms (got " +
                    std::to_string(t) + ")");
  }
  PreparedData prepared = model.prepare(data, /*require_targets=*/false);
  const auto rows = all_rows(prepared.n);
  const int n = prepared.n;
  rep.n = n;
  rep.t = t;
  for (const auto& info : model.tables) rep.term_keys.push_back(info.key);
  rep.phi.assign(static_cast<std::size_t>(n) * std::max(t, 1), 0.0);
  if (t == 0) return rep;

  std::mt19937_64 rng(0);
  const unsigned total = 1u << t;
  std::vector<std::vector<double>> value(total);
  for (unsigned mask = 0; mask < total; ++mask) {
    ForwardOptions opts;
    for (int k = 0; k < t; ++k) {
      if (!(mask & (1u << k))) opts.mute_tables.push_back(k);
    }
    auto pred = run_forward(model, prepared, rows, opts, rng);
    const auto& o = pred.outcomes[outcome_index];
    value[mask].resize(n);
    for (int i = 0; i < n; ++i)
      value[mask][i] = o.values[static_cast<std::size_t>(i) * o.width];
  }
  std::vector<double> fact(t + 1, 1.0);
  for (int i = 1; i <= t; ++i) fact[i] = fact[i - 1] * i;
  for (int j = 0; j < t; ++j) {
    for (unsigned mask = 0; mask < total; ++mask) {
      if (mask & (1u << j)) continue;
      const int s = __builtin_popcount(mask);
      const double w = fact[s] * fact[t - s - 1] / fact[t];
      for (int i = 0; i < n; ++i) {
        rep.phi[static_cast<std::size_t>(i) * t + j] +=
            w * (value[mask | (1u << j)][i] - value[mask][i]);
      }
    }
  }
  rep.mean_abs.assign(t, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < t; ++j)
      rep.mean_abs[j] += std::abs(rep.phi[static_cast<std::size_t>(i) * t + j]);
  for (double& v : rep.mean_abs) v /= n;
  return rep;
}

SummaryTable summary(const Model& model, const ColumnTable& data,
                     int outcome_index) {
  SummaryTable out;
  const auto& spec = model.cfg.outcomes.at(outcome_index);
  PreparedData prepared = model.prepare(data, /*require_targets=*/true);
  out.n = prepared.n;

  auto ex = extract_parameters(model, data, outcome_index);

  // Approximate standard errors from the linearized (Taylor) surrogate:
  // OLS curvature at the feature means.
  const int p = static_cast<int>(ex.coefficients.size());
  const auto& d = prepared.design;
  Eigen::MatrixXd j(prepared.n, p + 1);
  for (int i = 0; i < prepared.n; ++i) {
    j(i, 0) = 1.0;
    for (int c = 0; c < p; ++c)
      j(i, c + 1) = d.x_cont[static_cast<std::size_t>(i) * d.p_cont + c];
  }
  double sigma2 = ex.sigma2_eps;
  {
    auto pred = predict_point(model, data);
    const auto& o = pred.outcomes[outcome_index];
    const auto& y = prepared.y_num[outcome_index];
    if (sigma2 <= 0 && !y.empty()) {
      std::vector<double> resid(prepared.n);
      for (int i = 0; i < prepared.n; ++i)
        resid[i] = y[i] - o.values[static_cast<std::size_t>(i) * o.width];
      double m = 0;
      for (double r : resid) m += r * r;
      sigma2 = m / std::max(prepared.n - p - 1, 1);
    }
  }
  Eigen::MatrixXd jtj = j.transpose() * j;
  Eigen::MatrixXd cov = sigma2 * jtj.ldlt().solve(
                                     Eigen::MatrixXd::Identity(p + 1, p + 1));

  auto add_fixed = [&](const std::string& term, double est, double se) {
    SummaryTable::Fixed f;
    f.term = term;
    f.estimate = est;
    f.std_error = se;
    f.z_value = se > 0 ? est / se : 0.0;
    f.p_value = se > 0 ? std::erfc(std::abs(f.z_value) / std::sqrt(2.0)) : 1.0;
    out.fixed.push_back(f);
  };
  if (model.ast.has_intercept()) {
    add_fixed("(Intercept)", ex.intercept, std::sqrt(std::max(cov(0, 0), 0.0)));
  }
  for (int c = 0; c < p; ++c) {
    add_fixed(ex.names[c], ex.coefficients[c],
              std::sqrt(std::max(cov(c + 1, c + 1), 0.0)));
  }

  // Variance components with within-group correlations against the intercept
  // table (posterior-mean effective values).
  std::map<std::string, std::vector<double>> group_intercept_values;
  Tape tape;
  std::map<std::string, Var> leaves;
  ForwardOptions popts;
  popts.probe_inputs = true;
  std::mt19937_64 rng(0);
  ColumnTable probe = population_row(model, data);
  PreparedData pp = model.prepare(probe, false);
  auto fwd = model.forward(tape, pp, {0}, popts, rng, leaves);
  Var pred = natural_node(spec, slice_cols(fwd.theta[outcome_index], 0, 1));
  tape.backward(pred);

  auto effective_values = [&](std::size_t t) {
    const auto& info = model.tables[t];
    const auto& jg = fwd.contribs[t].grad();
    const Tensor& mu = model.params.at(info.key + "/mu");
    const int dsz = model.encoder_width;
    Eigen::MatrixXd muc(info.n_levels, dsz);
    for (int i = 0; i < info.n_levels; ++i)
      for (int jj = 0; jj < dsz; ++jj)
        muc(i, jj) = mu.value[static_cast<std::size_t>(i) * dsz + jj];
    if (model.cfg.encoder.enforce_centering && info.centering_applies()) {
      muc.rowwise() -= muc.colwise().mean();
    }
    if (info.has_cov) muc = effective_chol(model, info) * muc;
    std::vector<double> a(info.n_levels, 0.0);
    for (int g = 0; g < info.n_levels; ++g)
      for (int jj = 0; jj < dsz; ++jj) a[g] += jg[jj] * muc(g, jj);
    return a;
  };

  for (std::size_t t = 0; t < model.tables.size(); ++t) {
    const auto& info = model.tables[t];
    if (info.slope == "1") group_intercept_values[info.group] = effective_values(t);
  }
  for (std::size_t t = 0; t < model.tables.size(); ++t) {
    const auto& info = model.tables[t];
    SummaryTable::VarComp vc;
    vc.group = info.group;
    vc.term = info.slope == "1" ? "(Intercept)" : info.slope;
    vc.variance = ex.variance_components[info.key];
    vc.correlation = std::numeric_limits<double>::quiet_NaN();
    if (info.slope != "1" && group_intercept_values.count(info.group)) {
      const auto a = effective_values(t);
      const auto& b = group_intercept_values[info.group];
      double ma = 0, mb = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
      }
      ma /= a.size();
      mb /= b.size();
      double sab = 0, sa = 0, sb = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        sa += (a[i] - ma) * (a[i] - ma);
        sb += (b[i] - mb) * (b[i] - mb);
      }
      if (sa > 0 && sb > 0) vc.correlation = sab / std::sqrt(sa * sb);
    }
    out.varcomps.push_back(vc);
  }
  out.sigma2_eps = ex.sigma2_eps;

  // Log-likelihood at posterior means; statistical parameter count only.
  {
    Tape t2;
    std::map<std::string, Var> l2;
    ForwardOptions eval_opts;
    std::mt19937_64 r2(0);
    auto rows = all_rows(prepared.n);
    auto loss = model.batch_loss(t2, prepared, rows, eval_opts, r2,
                                 /*lambda_kl=*/0.0, 0.0, 0.0, 0.0,
                                 /*row_scale=*/static_cast<double>(prepared.n),
                                 /*kl_fraction=*/0.0, l2);
    double nll = 0;
    for (const auto& [k, v] : loss.components) {
      if (k.rfind("nll/", 0) == 0) nll += v;
    }
    out.loglik = -nll;
  }
  int k_params = static_cast<int>(out.fixed.size());
  for (const auto& c : prepared.design.cats) k_params += c.cardinality - 1;
  k_params += static_cast<int>(out.varcomps.size());
  if (spec.family == fam::Family::Gaussian) k_params += 1;
  out.k_params = k_params;
  out.aic = 2.0 * k_params - 2.0 * out.loglik;
  out.bic = k_params * std::log(static_cast<double>(out.n)) - 2.0 * out.loglik;
  return out;
}

std::string summary_csv(const SummaryTable& t) {
  std::ostringstream os;
  os.precision(10);
  os << "section,term,estimate,std_error,z_value,p_value\n";
  for (const auto& f : t.fixed) {
    os << "fixed," << f.term << ',' << f.estimate << ',' << f.std_error << ','
       << f.z_value << ',' << f.p_value << '\n';
  }
  for (const auto& v : t.varcomps) {
    os << "random," << v.group << '|' << v.term << ',' << v.variance << ',';
    if (std::isnan(v.correlation)) {
      os << ",,\n";
    } else {
      os << v.correlation << ",,\n";
    }
  }
  os << "residual,sigma2," << t.sigma2_eps << ",,,\n";
  os << "fit,loglik," << t.loglik << ",,,\n";
  os << "fit,aic," << t.aic << ",,,\n";
  os << "fit,bic," << t.bic << ",,,\n";
  os << "fit,k," << t.k_params << ",,,\n";
  os << "fit,n," << t.n << ",,,\n";
  return os.str();
}

std::string summary_json(const SummaryTable& t) {
  nlohmann::json j;
  for (const auto& f : t.fixed) {
    j["fixed"].push_back({{"term", f.term},
                          {"estimate", f.estimate},
                          {"std_error", f.std_error},
                          {"z_value", f.z_value},
                          {"p_value", f.p_value}});
  }
  for (const auto& v : t.varcomps) {
    nlohmann::json vc{{"group", v.group}, {"term", v.term}, {"variance", v.variance}};
    if (!std::isnan(v.correlation)) vc["correlation"] = v.correlation;
    j["random"].push_back(vc);
  }
  j["residual"] = {{"sigma2", t.sigma2_eps}};
  j["fit"] = {{"loglik", t.loglik}, {"aic", t.aic}, {"bic", t.bic},
              {"k", t.k_params}, {"n", t.n}};
  return j.dump(2);
}

std::string shap_csv(const ShapReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "row";
  for (const auto& n : r.feature_names) os << ',' << n;
  os << ",baseline\n";
  for (int i = 0; i < r.n; ++i) {
    os << i;
    for (int j = 0; j < r.p; ++j)
      os << ',' << r.phi[static_cast<std::size_t>(i) * r.p + j];
    os << ',' << (r.baseline.empty() ? 0.0 : r.baseline[i]) << '\n';
  }
  return os.str();
}

std::string shap_json(const ShapReport& r) {
  nlohmann::json j;
  j["features"] = r.feature_names;
  j["exact"] = r.exact;
  for (int i = 0; i < r.n; ++i) {
    nlohmann::json row;
    for (int jj = 0; jj < r.p; ++jj)
      row.push_back(r.phi[static_cast<std::size_t>(i) * r.p + jj]);
    j["phi"].push_back(row);
  }
  j["baseline"] = r.baseline;
  if (!r.mc_se.empty()) j["mc_se"] = r.mc_se;
  if (r.edge_importance.size() > 0) {
    for (int i = 0; i < r.edge_importance.rows(); ++i) {
      nlohmann::json row;
      for (int c = 0; c < r.edge_importance.cols(); ++c)
        row.push_back(r.edge_importance(i, c));
      j["edge_importance"].push_back(row);
    }
  }
  return j.dump(2);
}

}  // namespace mixnn::interpret
