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

#include "mixnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mixnn {

using namespace ad;

Tensor& ParamStore::add(const std::string& name, Shape shape,
                        std::vector<double> init) {
  if (tensors_.count(name)) throw DataError("duplicate parameter '" + name + "'");
  if (static_cast<int>(init.size()) != shape.size()) {
    throw DataError("parameter '" + name + "': init size mismatch");
  }
  Tensor t;
  t.shape = shape;
  t.value = std::move(init);
  t.grad.assign(t.value.size(), 0.0);
  return tensors_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, v] : tensors_) out.push_back(k);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [k, t] : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
}

namespace {

std::vector<double> normal_init(std::mt19937_64& rng, int count, double sd) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(count);
  for (auto& x : v) x = nd(rng);
  return v;
}

std::vector<double> zeros(int count) { return std::vector<double>(count, 0.0); }

}  // namespace

Model Model::build(const ModelConfig& cfg_in, const ColumnTable& data,
                   unsigned long long seed) {
  Model m;
  m.cfg = cfg_in;
  m.build_seed = seed;
  m.ast = formula::parse_formula(cfg_in.formula_text);

  // Default outcomes from the formula responses.
  if (m.cfg.outcomes.empty()) {
    if (m.ast.responses.empty()) {
      throw DataError("multitask formula '~ ...' requires explicit outcomes");
    }
    if (m.ast.responses.size() == 1) {
      fam::OutcomeSpec spec;
      spec.name = m.ast.responses[0];
      spec.targets = {m.ast.responses[0]};
      spec.family = fam::Family::Gaussian;
      m.cfg.outcomes.push_back(spec);
    } else {
      fam::OutcomeSpec spec;
      spec.name = m.ast.responses[0];
      spec.targets = m.ast.responses;
      spec.family = fam::Family::MvGaussian;
      m.cfg.outcomes.push_back(spec);
    }
  }
  {
    std::set<std::string> seen;
    for (const auto& o : m.cfg.outcomes) {
      if (!seen.insert(o.name).second) {
        throw DataError("duplicate outcome name '" + o.name + "'");
      }
      if (o.targets.empty()) {
        throw DataError("outcome '" + o.name + "' has no target columns");
      }
    }
  }

  auto design = formula::build_design(m.ast, data, m.cfg.schema, nullptr);
  m.fitted_levels = formula::capture_levels(design);

  // Resolve multinomial class counts from the data when unset.
  for (auto& o : m.cfg.outcomes) {
    if (o.family == fam::Family::Multinomial) {
      int observed = 0;
      if (data.has(o.targets[0])) {
        const Column& c = data.at(o.targets[0]);
        if (c.kind == Column::Kind::Categorical) {
          observed = static_cast<int>(c.levels.size());
        } else {
          for (double v : c.num) observed = std::max(observed, static_cast<int>(v) + 1);
        }
      }
      o.n_classes = std::max(o.n_classes, observed);
      if (o.n_classes < 2) {
        throw DataError("multinomial outcome '" + o.name + "' needs >= 2 classes");
      }
    }
  }

  // Encoder width: the model-wide embedding dimension is the fixed-path
  // width, so Eq-style addition of fixed and random parts typechecks.
  int width = m.cfg.encoder.embed_dim;
  for (const auto& c : design.cats) {
    width += enc::cat_embed_dim(m.cfg.encoder, c.name, c.cardinality);
  }
  m.encoder_width = width;

  // Variational tables, one per (group, slope term).
  for (std::size_t ti = 0; ti < design.terms.size(); ++ti) {
    const auto& term = design.terms[ti];
    auto add_table = [&](const std::string& slope, int z_col) {
      TableInfo info;
      info.group = term.group;
      info.slope = slope;
      info.key = "re/" + term.group + "/" + slope;
      info.term_index = static_cast<int>(ti);
      info.z_col = z_col;
      info.n_levels = term.n_levels;
      auto it = m.cfg.cov_map.find(term.group);
      if (it != m.cfg.cov_map.end()) {
        info.has_cov = true;
        info.cov = it->second;
        if (info.cov.kind == cov::Kind::GP && !info.cov.coordinate_cols.empty() &&
            info.cov.coords.rows() == 0) {
          // Resolve per-level coordinates from the first occurrence of each
          // level in the training data.
          const int ncoord = static_cast<int>(info.cov.coordinate_cols.size());
          info.cov.coords.resize(term.n_levels, ncoord);
          std::vector<bool> filled(term.n_levels, false);
          for (int i = 0; i < design.n; ++i) {
            const int g = term.group_index[i];
            if (g < 0 || filled[g]) continue;
            for (int c = 0; c < ncoord; ++c) {
              const Column& col = data.at(info.cov.coordinate_cols[c]);
              if (col.kind != Column::Kind::Numeric) {
                throw DataError("GP coordinate column '" +
                                info.cov.coordinate_cols[c] + "' must be numeric");
              }
              info.cov.coords(g, c) = col.num[i];
            }
            filled[g] = true;
          }
        }
        if (m.cfg.encoder.enforce_centering && !info.cov.exchangeable()) {
          m.warnings.push_back("centering skipped for non-exchangeable covariance on '" +
                               term.group + "'");
        }
      }
      m.tables.push_back(info);
    };
    int col = 0;
    if (term.include_intercept) add_table("1", col++);
    for (const auto& s : term.slope_names) add_table(s, col++);
  }

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  const int d = m.encoder_width;

  // Encoder parameters.
  if (design.p_cont > 0) {
    m.params.add("enc/w_cont", Shape{design.p_cont, m.cfg.encoder.embed_dim},
                 normal_init(rng, design.p_cont * m.cfg.encoder.embed_dim,
                             std::sqrt(1.0 / design.p_cont)));
  }
  for (const auto& c : design.cats) {
    const int w = enc::cat_embed_dim(m.cfg.encoder, c.name, c.cardinality);
    m.params.add("enc/cat/" + c.name, Shape{c.cardinality + 1, w},
                 normal_init(rng, (c.cardinality + 1) * w, 0.1));
  }

  for (const auto& t : m.tables) {
    m.params.add(t.key + "/mu", Shape{t.n_levels, d},
                 normal_init(rng, t.n_levels * d, 0.1));
    m.params.add(t.key + "/logvar", Shape{t.n_levels, d},
                 std::vector<double>(static_cast<std::size_t>(t.n_levels) * d,
                                     std::log(0.01)));
    if (m.cfg.encoder.unknown_strategy == enc::UnknownStrategy::Learned) {
      m.params.add(t.key + "/unknown", Shape{1, d}, zeros(d));
    }
    if (t.has_cov && t.cov.trainable) {
      if (t.cov.kind == cov::Kind::AR1 || t.cov.kind == cov::Kind::CS) {
        m.params.add(t.key + "/rho_raw", Shape{1, 1},
                     std::vector<double>{std::atanh(t.cov.rho)});
      } else if (t.cov.kind == cov::Kind::GP) {
        m.params.add(t.key + "/log_ell", Shape{1, 1},
                     std::vector<double>{std::log(t.cov.lengthscale)});
      }
    }
  }

  // Backbone parameters.
  if (m.cfg.backbone.kind == BackboneConfig::Kind::Gsem) {
    const auto& g = m.cfg.backbone.gsem;
    int in = d;
    for (std::size_t li = 0; li < g.hidden_dims.size(); ++li) {
      const int out = g.hidden_dims[li];
      if (out <= 0) throw DataError("gsem: hidden dims must be positive");
      if (g.residual && out != in) {
        throw DataError("gsem: residual connections require equal layer widths");
      }
      const std::string p = "gsem/l" + std::to_string(li);
      m.params.add(p + "/w", Shape{in, out},
                   normal_init(rng, in * out, std::sqrt(2.0 / (in + out))));
      m.params.add(p + "/b", Shape{1, out}, zeros(out));
      if (g.structure == gsem::Structure::Static ||
          g.structure == gsem::Structure::StaticFree ||
          g.structure == gsem::Structure::Hybrid) {
        m.params.add(p + "/bs", Shape{out, out}, zeros(out * out));
      }
      if (g.structure == gsem::Structure::Dynamic ||
          g.structure == gsem::Structure::Hybrid) {
        if (g.n_heads <= 0 || out % g.n_heads != 0) {
          throw DataError("gsem: layer width " + std::to_string(out) +
                          " is not divisible into " + std::to_string(g.n_heads) +
                          " attention heads");
        }
        m.params.add(p + "/attn/embed", Shape{out, out},
                     normal_init(rng, out * out, 0.1));
        m.params.add(p + "/attn/pos", Shape{out, out},
                     normal_init(rng, out * out, 0.1));
        for (const char* nm : {"wq", "wk", "wv"}) {
          m.params.add(p + "/attn/" + std::string(nm), Shape{out, out},
                       normal_init(rng, out * out, std::sqrt(1.0 / out)));
        }
        m.params.add(p + "/attn/wo", Shape{out, 1},
                     normal_init(rng, out, std::sqrt(1.0 / out)));
      }
      if (g.dropout < 0.0 || g.dropout >= 1.0) {
        throw DataError("gsem: dropout must be in [0, 1)");
      }
      in = out;
    }
  } else {
    int in = d;
    for (std::size_t bi = 0; bi < m.cfg.backbone.manifold.size(); ++bi) {
      const auto& blk = m.cfg.backbone.manifold[bi];
      blk.validate();
      const int cells = blk.cells();
      const std::string p = "mani/b" + std::to_string(bi);
      m.params.add(p + "/w_grid", Shape{in, cells},
                   normal_init(rng, in * cells, std::sqrt(2.0 / (in + cells))));
      if (blk.use_spde) {
        m.params.add(p + "/log_kappa", Shape{1, 1},
                     std::vector<double>{std::log(blk.spde_kappa_init)});
      }
      if (blk.use_sem) {
        m.params.add(p + "/sem_b", Shape{cells, cells}, zeros(cells * cells));
      }
      in = cells;
    }
    if (m.cfg.backbone.aggregation == mani::Aggregation::Attention) {
      const int nb = static_cast<int>(m.cfg.backbone.manifold.size());
      m.params.add("mani/agg_logits", Shape{1, nb}, zeros(nb));
    }
  }

  // Output heads.
  int backbone_width = d;
  if (m.cfg.backbone.kind == BackboneConfig::Kind::Gsem) {
    if (!m.cfg.backbone.gsem.hidden_dims.empty()) {
      backbone_width = m.cfg.backbone.gsem.hidden_dims.back();
    }
  } else {
    const auto& blocks = m.cfg.backbone.manifold;
    if (!blocks.empty()) {
      switch (m.cfg.backbone.aggregation) {
        case mani::Aggregation::Concat: {
          backbone_width = 0;
          for (const auto& b : blocks) backbone_width += b.cells();
          break;
        }
        default:
          backbone_width = blocks.back().cells();
          break;
      }
    }
  }

  for (const auto& o : m.cfg.outcomes) {
    const int w = fam::param_width(o);
    const std::string p = "head/" + o.name;
    m.params.add(p + "/w", Shape{backbone_width, w},
                 normal_init(rng, backbone_width * w,
                             std::sqrt(1.0 / backbone_width)));
    if (m.ast.has_intercept()) m.params.add(p + "/b", Shape{1, w}, zeros(w));
    switch (o.family) {
      case fam::Family::Gaussian:
        m.params.add(p + "/log_sigma2", Shape{1, 1}, zeros(1));
        break;
      case fam::Family::NegBin:
        m.params.add(p + "/log_phi", Shape{1, 1},
                     std::vector<double>{std::log(o.dispersion_init)});
        break;
      case fam::Family::MvGaussian: {
        const int mdim = static_cast<int>(o.targets.size());
        m.params.add(p + "/mv_offdiag", Shape{mdim, mdim}, zeros(mdim * mdim));
        m.params.add(p + "/mv_logdiag", Shape{1, mdim}, zeros(mdim));
        break;
      }
      default:
        break;
    }
  }

  // Output-level SEM.
  if (m.cfg.output_sem == fam::OutputSemMode::Learned) {
    int total = 0;
    for (const auto& o : m.cfg.outcomes) total += fam::param_width(o);
    m.params.add("osem/b", Shape{total, total}, zeros(total * total));
  } else if (m.cfg.output_sem == fam::OutputSemMode::Edges) {
    const auto resolved = fam::resolve_edges(m.cfg.output_edges, m.cfg.outcomes);
    for (std::size_t e = 0; e < resolved.from.size(); ++e) {
      if (!resolved.weight[e].has_value()) {
        m.params.add("osem/e" + std::to_string(e), Shape{1, 1}, zeros(1));
      }
    }
  }

  return m;
}

PreparedData Model::prepare(const ColumnTable& data, bool require_targets) const {
  PreparedData out;
  out.design = formula::build_design(ast, data, cfg.schema, &fitted_levels);
  out.n = out.design.n;
  out.y_num.resize(cfg.outcomes.size());
  out.y_class.resize(cfg.outcomes.size());

  for (std::size_t k = 0; k < cfg.outcomes.size(); ++k) {
    const auto& o = cfg.outcomes[k];
    bool have_all = true;
    for (const auto& col : o.targets) have_all = have_all && data.has(col);
    if (!have_all) {
      if (require_targets) {
        throw DataError("outcome '" + o.name + "': target column missing");
      }
      continue;
    }
    if (o.family == fam::Family::Multinomial) {
      const Column& c = data.at(o.targets[0]);
      std::vector<int> labels(out.n);
      if (c.kind == Column::Kind::Categorical) {
        for (int i = 0; i < out.n; ++i) labels[i] = c.codes[i];
      } else {
        for (int i = 0; i < out.n; ++i) {
          labels[i] = static_cast<int>(std::llround(c.num[i]));
        }
      }
      for (int i = 0; i < out.n; ++i) {
        if (labels[i] < 0 || labels[i] >= o.n_classes) {
          throw DataError("outcome '" + o.name + "': class label " +
                          std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(o.n_classes) + ")");
        }
      }
      out.y_class[k] = std::move(labels);
      continue;
    }
    const int w = static_cast<int>(o.targets.size());
    std::vector<double> y(static_cast<std::size_t>(out.n) * w);
    for (int j = 0; j < w; ++j) {
      const Column& c = data.at(o.targets[j]);
      for (int i = 0; i < out.n; ++i) {
        double v;
        if (c.kind == Column::Kind::Categorical) {
          if (c.levels.size() > 2) {
            throw DataError("outcome '" + o.name + "': categorical target '" +
                            o.targets[j] + "' has more than two levels");
          }
          v = static_cast<double>(c.codes[i]);
        } else {
          v = c.num[i];
        }
        if (std::isnan(v)) {
          throw DataError("outcome '" + o.name + "': missing target value in row " +
                          std::to_string(i));
        }
        if ((o.family == fam::Family::Binomial ||
             o.family == fam::Family::Multilabel) &&
            v != 0.0 && v != 1.0) {
          throw DataError("outcome '" + o.name + "': binary target must be 0/1");
        }
        y[static_cast<std::size_t>(i) * w + j] = v;
      }
    }
    out.y_num[k] = std::move(y);
  }
  return out;
}

Var Model::param_leaf(Tape& tape, const std::string& name,
                      std::map<std::string, Var>& leaves) const {
  auto it = leaves.find(name);
  if (it != leaves.end()) return it->second;
  const Tensor& t = params.at(name);
  Var v = tape.leaf(t.shape, t.value);
  leaves.emplace(name, v);
  return v;
}

Var Model::head_forward(Tape& tape, Var h, int k,
                        std::map<std::string, Var>& leaves) const {
  const auto& o = cfg.outcomes[k];
  const std::string p = "head/" + o.name;
  Var theta = matmul(h, param_leaf(tape, p + "/w", leaves));
  if (params.has(p + "/b")) {
    theta = add(theta, param_leaf(tape, p + "/b", leaves));
  }
  return theta;
}

ForwardResult Model::forward(Tape& tape, const PreparedData& data,
                             const std::vector<int>& rows,
                             const ForwardOptions& opts, std::mt19937_64& rng,
                             std::map<std::string, Var>& leaves) const {
  ForwardResult res;
  const auto& design = data.design;
  const int nb = static_cast<int>(rows.size());
  const int d = encoder_width;

  // --- fixed path ---
  std::vector<Var> fixed_parts;
  if (design.p_cont > 0) {
    std::vector<double> xb(static_cast<std::size_t>(nb) * design.p_cont);
    for (int i = 0; i < nb; ++i) {
      for (int j = 0; j < design.p_cont; ++j) {
        xb[static_cast<std::size_t>(i) * design.p_cont + j] =
            design.x_cont[static_cast<std::size_t>(rows[i]) * design.p_cont + j];
      }
    }
    Var x = opts.probe_inputs
                ? tape.leaf(Shape{nb, design.p_cont}, xb)
                : tape.constant(Shape{nb, design.p_cont}, std::move(xb));
    res.x_cont = x;
    fixed_parts.push_back(matmul(x, param_leaf(tape, "enc/w_cont", leaves)));
  } else {
    fixed_parts.push_back(tape.constant(
        Shape{nb, cfg.encoder.embed_dim},
        std::vector<double>(static_cast<std::size_t>(nb) * cfg.encoder.embed_dim,
                            0.0)));
  }
  for (const auto& c : design.cats) {
    Var table = param_leaf(tape, "enc/cat/" + c.name, leaves);
    std::vector<int> codes(nb);
    for (int i = 0; i < nb; ++i) codes[i] = c.codes[rows[i]];
    fixed_parts.push_back(gather_rows(table, codes));
  }
  res.h_fixed = fixed_parts.size() == 1 ? fixed_parts[0]
                                        : concat_cols(fixed_parts);

  // --- random effects ---
  Var kl_acc;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (const auto& t : tables) {
    Var mu = param_leaf(tape, t.key + "/mu", leaves);
    Var lv = param_leaf(tape, t.key + "/logvar", leaves);
    if (cfg.encoder.enforce_centering && t.centering_applies()) {
      mu = enc::center_rows(mu);
    }
    Var chol;  // invalid = identity transform
    if (t.has_cov) {
      Var rho_raw, log_ell;
      if (params.has(t.key + "/rho_raw"))
        rho_raw = param_leaf(tape, t.key + "/rho_raw", leaves);
      if (params.has(t.key + "/log_ell"))
        log_ell = param_leaf(tape, t.key + "/log_ell", leaves);
      chol = cov::build_chol_node(tape, t.cov, t.n_levels, rho_raw, log_ell);
    }
    Var table_v = enc::sample_table(tape, mu, lv, chol,
                                    opts.train || opts.sample_re, rng);

    const auto& term = design.terms[t.term_index];
    std::vector<int> idx(nb);
    for (int i = 0; i < nb; ++i) {
      idx[i] = term.group_index[rows[i]];
      if (opts.unknown_remap_rate > 0.0 && unif(rng) < opts.unknown_remap_rate) {
        idx[i] = -1;
      }
    }
    Var unknown_row;
    if (params.has(t.key + "/unknown")) {
      unknown_row = param_leaf(tape, t.key + "/unknown", leaves);
    }
    res.u_rows.push_back(enc::gather_with_unknown(table_v, idx, unknown_row));

    std::vector<double> zb(nb);
    for (int i = 0; i < nb; ++i) {
      zb[i] = term.z[static_cast<std::size_t>(rows[i]) * term.z_cols + t.z_col];
    }
    res.z_cols.push_back(tape.constant(Shape{nb, 1}, std::move(zb)));

    // KL(N(mu, diag(sigma^2)) || N(0, I)) over levels, on the whitened table.
    Var term_kl = add(sub(sum(ad::exp(lv)), sum(lv)), sum(mul(mu, mu)));
    term_kl = sub(term_kl, tape.scalar_const(static_cast<double>(t.n_levels) * d));
    term_kl = scale(term_kl, 0.5);
    kl_acc = kl_acc.valid() ? add(kl_acc, term_kl) : term_kl;
  }
  res.kl = kl_acc.valid() ? kl_acc : tape.scalar_const(0.0);
  Var h_enc = res.h_fixed;
  for (std::size_t t = 0; t < tables.size(); ++t) {
    Var c = mul(res.z_cols[t], res.u_rows[t]);
    res.contribs.push_back(c);
    const bool muted =
        std::find(opts.mute_tables.begin(), opts.mute_tables.end(),
                  static_cast<int>(t)) != opts.mute_tables.end();
    if (!muted) h_enc = add(h_enc, c);
  }
  res.h_encoder = h_enc;

  // --- backbone ---
  Var h = res.h_encoder;
  Var dag_acc, sparse_acc, contract_acc;
  if (cfg.backbone.kind == BackboneConfig::Kind::Gsem) {
    const auto& g = cfg.backbone.gsem;
    for (std::size_t li = 0; li < g.hidden_dims.size(); ++li) {
      const std::string p = "gsem/l" + std::to_string(li);
      const int out = g.hidden_dims[li];
      Var h_in = h;
      Var xi = add(matmul(h, param_leaf(tape, p + "/w", leaves)),
                   param_leaf(tape, p + "/b", leaves));
      Var eta = xi;
      if (g.structure != gsem::Structure::None) {
        std::vector<double> strict(static_cast<std::size_t>(out) * out, 0.0);
        std::vector<double> offdiag(static_cast<std::size_t>(out) * out, 1.0);
        for (int i = 0; i < out; ++i) {
          offdiag[static_cast<std::size_t>(i) * out + i] = 0.0;
          for (int j = 0; j < i; ++j)
            strict[static_cast<std::size_t>(i) * out + j] = 1.0;
        }
        auto attn_params = [&]() {
          gsem::AttentionParams ap;
          ap.value_embed = param_leaf(tape, p + "/attn/embed", leaves);
          ap.pos_embed = param_leaf(tape, p + "/attn/pos", leaves);
          ap.wq = param_leaf(tape, p + "/attn/wq", leaves);
          ap.wk = param_leaf(tape, p + "/attn/wk", leaves);
          ap.wv = param_leaf(tape, p + "/attn/wv", leaves);
          ap.wo = param_leaf(tape, p + "/attn/wo", leaves);
          ap.n_heads = g.n_heads;
          return ap;
        };
        switch (g.structure) {
          case gsem::Structure::Static: {
            Var bs = mul(param_leaf(tape, p + "/bs", leaves),
                         tape.constant(Shape{out, out}, std::move(strict)));
            eta = gsem::static_transform(xi, bs);
            break;
          }
          case gsem::Structure::StaticFree: {
            Var bs = mul(param_leaf(tape, p + "/bs", leaves),
                         tape.constant(Shape{out, out}, std::move(offdiag)));
            eta = gsem::hybrid_transform(xi, bs, nullptr, {},
                                         &res.hybrid_failures);
            Var dag = gsem::dag_penalty(bs);
            Var sp = gsem::sparse_penalty(bs);
            dag_acc = dag_acc.valid() ? add(dag_acc, dag) : dag;
            sparse_acc = sparse_acc.valid() ? add(sparse_acc, sp) : sp;
            break;
          }
          case gsem::Structure::Dynamic: {
            auto ar = gsem::dynamic_attention(xi, attn_params());
            eta = ar.output;
            break;
          }
          case gsem::Structure::Hybrid: {
            Var bs = mul(param_leaf(tape, p + "/bs", leaves),
                         tape.constant(Shape{out, out}, std::move(strict)));
            auto ap = attn_params();
            auto bd_fn = [&ap](Var cur) {
              return gsem::dynamic_attention(cur, ap).b_d;
            };
            eta = gsem::hybrid_transform(xi, bs, bd_fn, {},
                                         &res.hybrid_failures);
            auto final_attn = gsem::dynamic_attention(eta, ap);
            Var contract = gsem::contraction_penalty(bs, final_attn.b_mean);
            contract_acc =
                contract_acc.valid() ? add(contract_acc, contract) : contract;
            break;
          }
          default:
            break;
        }
        if (li == 0) res.first_structure_eta = eta;
      }
      switch (g.activation) {
        case gsem::Activation::Relu: eta = relu(eta); break;
        case gsem::Activation::Tanh: eta = ad::tanh(eta); break;
        case gsem::Activation::Gelu: eta = gelu(eta); break;
      }
      if (g.layer_norm) eta = layer_norm_rows(eta);
      if (g.dropout > 0.0) eta = dropout(eta, g.dropout, opts.train, rng);
      if (g.residual && h_in.cols() == eta.cols()) eta = add(eta, h_in);
      h = eta;
    }
  } else {
    std::vector<Var> block_outputs;
    for (std::size_t bi = 0; bi < cfg.backbone.manifold.size(); ++bi) {
      const auto& blk = cfg.backbone.manifold[bi];
      const std::string p = "mani/b" + std::to_string(bi);
      const int cells = blk.cells();
      Var grid = matmul(h, param_leaf(tape, p + "/w_grid", leaves));
      if (blk.use_spde && opts.train) {
        std::normal_distribution<double> nd;
        std::vector<double> eps(cells);
        for (auto& e : eps) e = nd(rng);
        const auto lap = mani::discrete_laplacian(blk.grid_shape);
        if (blk.train_kappa && cells <= 1024) {
          Var field = mani::spde_field_node(
              tape, param_leaf(tape, p + "/log_kappa", leaves), blk.spde_alpha,
              Eigen::MatrixXd(lap), eps);
          grid = add(grid, transpose(field));
        } else {
          // Large grids: sparse factor at the current kappa, no gradient path.
          const double kappa =
              std::exp(params.at(p + "/log_kappa").value[0]);
          auto q = mani::spde_precision(kappa, blk.spde_alpha, lap);
          Eigen::VectorXd epsv(cells);
          for (int i = 0; i < cells; ++i) epsv(i) = eps[i];
          Eigen::VectorXd u = mani::spde_sample(q, epsv);
          std::vector<double> uv(cells);
          for (int i = 0; i < cells; ++i) uv[i] = u(i);
          grid = add(grid, tape.constant(Shape{1, cells}, std::move(uv)));
        }
      }
      if (blk.use_sem) {
        const auto mask = mani::spatial_sem_mask(blk.grid_shape, blk.sem_lengthscale);
        grid = mani::sem_layer_spatial(grid, param_leaf(tape, p + "/sem_b", leaves),
                                       mask);
      }
      block_outputs.push_back(grid);
      h = grid;
    }
    if (!block_outputs.empty()) {
      Var logits;
      if (cfg.backbone.aggregation == mani::Aggregation::Attention) {
        logits = param_leaf(tape, "mani/agg_logits", leaves);
      }
      h = mani::aggregate(block_outputs, cfg.backbone.aggregation, logits);
    }
  }
  res.h_backbone = h;

  // --- heads + output SEM ---
  std::vector<Var> raw;
  raw.reserve(cfg.outcomes.size());
  for (std::size_t k = 0; k < cfg.outcomes.size(); ++k) {
    raw.push_back(head_forward(tape, h, static_cast<int>(k), leaves));
  }
  if (cfg.output_sem == fam::OutputSemMode::None || raw.size() == 0) {
    res.theta = std::move(raw);
  } else {
    int total = 0;
    std::vector<int> widths;
    for (const auto& o : cfg.outcomes) {
      widths.push_back(fam::param_width(o));
      total += widths.back();
    }
    Var stacked = raw.size() == 1 ? raw[0] : concat_cols(raw);
    Var b;
    if (cfg.output_sem == fam::OutputSemMode::Learned) {
      std::vector<double> offdiag(static_cast<std::size_t>(total) * total, 1.0);
      for (int i = 0; i < total; ++i)
        offdiag[static_cast<std::size_t>(i) * total + i] = 0.0;
      b = mul(param_leaf(tape, "osem/b", leaves),
              tape.constant(Shape{total, total}, std::move(offdiag)));
      Var dag = gsem::dag_penalty(b);
      Var sp = gsem::sparse_penalty(b);
      dag_acc = dag_acc.valid() ? add(dag_acc, dag) : dag;
      sparse_acc = sparse_acc.valid() ? add(sparse_acc, sp) : sp;
    } else {
      const auto resolved = fam::resolve_edges(cfg.output_edges, cfg.outcomes);
      Var acc = tape.constant(
          Shape{total, total},
          std::vector<double>(static_cast<std::size_t>(total) * total, 0.0));
      for (std::size_t e = 0; e < resolved.from.size(); ++e) {
        std::vector<double> unit(static_cast<std::size_t>(total) * total, 0.0);
        unit[static_cast<std::size_t>(resolved.to[e]) * total + resolved.from[e]] = 1.0;
        Var unit_m = tape.constant(Shape{total, total}, std::move(unit));
        Var w = resolved.weight[e].has_value()
                    ? tape.scalar_const(*resolved.weight[e])
                    : param_leaf(tape, "osem/e" + std::to_string(e), leaves);
        acc = add(acc, mul(w, unit_m));
      }
      b = acc;
    }
    Var coupled = fam::apply_output_sem(stacked, b);
    int off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      res.theta.push_back(slice_cols(coupled, off, off + widths[k]));
      off += widths[k];
    }
  }

  res.dag_pen = dag_acc;
  res.sparse_pen = sparse_acc;
  res.contract_pen = contract_acc;
  res.leaves = &leaves;
  return res;
}

LossResult Model::batch_loss(Tape& tape, const PreparedData& data,
                             const std::vector<int>& rows,
                             const ForwardOptions& opts, std::mt19937_64& rng,
                             double lambda_kl, double lambda_dag,
                             double lambda_contract, double lambda_sparse,
                             double row_scale, double kl_fraction,
                             std::map<std::string, Var>& leaves) const {
  LossResult out;
  auto fwd = forward(tape, data, rows, opts, rng, leaves);
  out.hybrid_failures = fwd.hybrid_failures;
  const int nb = static_cast<int>(rows.size());

  Var total;
  auto accumulate = [&](const std::string& name, Var term) {
    out.components[name] = term.scalar();
    total = total.valid() ? add(total, term) : term;
  };

  for (std::size_t k = 0; k < cfg.outcomes.size(); ++k) {
    const auto& o = cfg.outcomes[k];
    const int w = fam::param_width(o);
    const std::string p = "head/" + o.name;
    Var nll;
    if (o.family == fam::Family::Multinomial) {
      if (data.y_class[k].empty()) {
        throw DataError("outcome '" + o.name + "': no labels prepared");
      }
      std::vector<int> yb(nb);
      for (int i = 0; i < nb; ++i) yb[i] = data.y_class[k][rows[i]];
      nll = fam::multinomial_nll(fwd.theta[k], yb);
    } else {
      if (data.y_num[k].empty()) {
        throw DataError("outcome '" + o.name + "': no targets prepared");
      }
      const int width = static_cast<int>(o.targets.size());
      std::vector<double> yb(static_cast<std::size_t>(nb) * width);
      for (int i = 0; i < nb; ++i) {
        for (int j = 0; j < width; ++j) {
          yb[static_cast<std::size_t>(i) * width + j] =
              data.y_num[k][static_cast<std::size_t>(rows[i]) * width + j];
        }
      }
      Var y = tape.constant(Shape{nb, width}, std::move(yb));
      switch (o.family) {
        case fam::Family::Gaussian:
          nll = fam::gaussian_nll(fwd.theta[k],
                                  param_leaf(tape, p + "/log_sigma2", leaves), y);
          break;
        case fam::Family::Binomial:
          nll = fam::binomial_nll(fwd.theta[k], y);
          break;
        case fam::Family::Poisson:
          nll = fam::poisson_nll(fwd.theta[k], y);
          break;
        case fam::Family::NegBin:
          nll = fam::negbin_nll(fwd.theta[k],
                                param_leaf(tape, p + "/log_phi", leaves), y);
          break;
        case fam::Family::MvGaussian: {
          Var off = param_leaf(tape, p + "/mv_offdiag", leaves);
          Var logd = param_leaf(tape, p + "/mv_logdiag", leaves);
          std::vector<double> strict(static_cast<std::size_t>(w) * w, 0.0);
          std::vector<double> eye(static_cast<std::size_t>(w) * w, 0.0);
          for (int i = 0; i < w; ++i) {
            eye[static_cast<std::size_t>(i) * w + i] = 1.0;
            for (int j = 0; j < i; ++j)
              strict[static_cast<std::size_t>(i) * w + j] = 1.0;
          }
          Var l = add(mul(off, tape.constant(Shape{w, w}, std::move(strict))),
                      mul(tape.constant(Shape{w, w}, std::move(eye)),
                          ad::exp(logd)));
          nll = fam::mvgaussian_nll(fwd.theta[k], l, logd, y);
          break;
        }
        case fam::Family::Multilabel:
          nll = fam::multilabel_nll(fwd.theta[k], y);
          break;
        default:
          throw DataError("unhandled family");
      }
    }
    accumulate("nll/" + o.name, scale(nll, o.weight * row_scale));
  }

  accumulate("kl", scale(fwd.kl, lambda_kl * kl_fraction));
  if (fwd.dag_pen.valid()) {
    accumulate("dag", scale(fwd.dag_pen, lambda_dag * kl_fraction));
  }
  if (fwd.sparse_pen.valid()) {
    accumulate("sparse", scale(fwd.sparse_pen, lambda_sparse * kl_fraction));
  }
  if (fwd.contract_pen.valid()) {
    accumulate("contract", scale(fwd.contract_pen, lambda_contract * kl_fraction));
  }
  out.total = total;
  return out;
}

Eigen::MatrixXd Model::structure_matrix() const {
  if (cfg.backbone.kind != BackboneConfig::Kind::Gsem) {
    throw DataError("no structured layer in this model");
  }
  const auto& g = cfg.backbone.gsem;
  if (g.structure != gsem::Structure::Static &&
      g.structure != gsem::Structure::StaticFree &&
      g.structure != gsem::Structure::Hybrid) {
    throw DataError("no structured layer in this model");
  }
  const Tensor& t = params.at("gsem/l0/bs");
  const int d = t.shape.rows;
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(d, d);
  const bool strict = g.structure != gsem::Structure::StaticFree;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      if (i == j) continue;
      if (strict && j > i) continue;
      b(i, j) = t.value[static_cast<std::size_t>(i) * d + j];
    }
  }
  return b;
}

int Model::extend_levels(const ColumnTable& data) {
  auto fresh = formula::build_design(ast, data, cfg.schema, nullptr);
  std::mt19937_64 rng(build_seed ^ 0xd1b54a32d192ed03ull);
  int added_total = 0;
  for (auto& t : tables) {
    const auto& term = fresh.terms[t.term_index];
    auto& known = fitted_levels.levels[t.group];
    std::vector<std::string> new_levels;
    for (const auto& lv : term.levels) {
      if (std::find(known.begin(), known.end(), lv) == known.end()) {
        new_levels.push_back(lv);
      }
    }
    if (new_levels.empty()) continue;
    if (t.has_cov) {
      throw DataError("cannot extend covariance-structured table for group '" +
                      t.group + "' with new levels");
    }
    const int d = encoder_width;
    const int extra = static_cast<int>(new_levels.size());
    Tensor& mu = params.at(t.key + "/mu");
    Tensor& lvar = params.at(t.key + "/logvar");
    auto grow = [&](Tensor& tensor, std::vector<double> tail) {
      tensor.shape.rows += extra;
      tensor.value.insert(tensor.value.end(), tail.begin(), tail.end());
      tensor.grad.assign(tensor.value.size(), 0.0);
    };
    grow(mu, normal_init(rng, extra * d, 0.1));
    grow(lvar, std::vector<double>(static_cast<std::size_t>(extra) * d,
                                   std::log(0.01)));
    t.n_levels += extra;
    // Level maps are shared per group column; only append once.
    for (const auto& lv : new_levels) {
      if (std::find(known.begin(), known.end(), lv) == known.end()) {
        known.push_back(lv);
      }
    }
    added_total += extra;
  }
  // Group tables sharing one column must stay consistent.
  for (auto& t : tables) {
    const auto& known = fitted_levels.levels[t.group];
    if (t.n_levels != static_cast<int>(known.size())) {
      const int extra = static_cast<int>(known.size()) - t.n_levels;
      if (extra > 0) {
        const int d = encoder_width;
        Tensor& mu = params.at(t.key + "/mu");
        Tensor& lvar = params.at(t.key + "/logvar");
        mu.shape.rows += extra;
        mu.value.insert(mu.value.end(),
                        normal_init(rng, extra * d, 0.1).begin(),
                        normal_init(rng, extra * d, 0.1).end());
        mu.grad.assign(mu.value.size(), 0.0);
        lvar.shape.rows += extra;
        lvar.value.insert(lvar.value.end(),
                          static_cast<std::size_t>(extra) * d, std::log(0.01));
        lvar.grad.assign(lvar.value.size(), 0.0);
        t.n_levels += extra;
      }
    }
  }
  return added_total;
}

void Model::center_tables() {
  if (!cfg.encoder.enforce_centering) return;
  for (const auto& t : tables) {
    if (!t.centering_applies()) continue;
    Tensor& mu = params.at(t.key + "/mu");
    const int rows = mu.shape.rows, cols = mu.shape.cols;
    for (int j = 0; j < cols; ++j) {
      double m = 0;
      for (int i = 0; i < rows; ++i) m += mu.value[static_cast<std::size_t>(i) * cols + j];
      m /= rows;
      for (int i = 0; i < rows; ++i) mu.value[static_cast<std::size_t>(i) * cols + j] -= m;
    }
  }
}

double Model::mean_group_size(const PreparedData& data) const {
  std::set<std::string> seen;
  double total = 0;
  int levels = 0;
  for (const auto& t : tables) {
    if (!seen.insert(t.group).second) continue;
    const auto& term = data.design.terms[t.term_index];
    std::map<int, int> counts;
    for (int idx : term.group_index) {
      if (idx >= 0) counts[idx]++;
    }
    for (const auto& [k, c] : counts) {
      total += c;
      ++levels;
    }
  }
  if (levels == 0) return 1.0;
  return total / levels;
}

std::vector<std::string> Model::family_param_names(int k) const {
  const auto& o = cfg.outcomes[k];
  const std::string p = "head/" + o.name;
  switch (o.family) {
    case fam::Family::Gaussian: return {p + "/log_sigma2"};
    case fam::Family::NegBin: return {p + "/log_phi"};
    case fam::Family::MvGaussian: return {p + "/mv_offdiag", p + "/mv_logdiag"};
    default: return {};
  }
}

}  // namespace mixnn
