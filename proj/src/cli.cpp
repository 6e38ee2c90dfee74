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

#include "mixnn/cli.hpp"

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mixnn/interpret.hpp"
#include "mixnn/mme.hpp"
#include "mixnn/persist.hpp"
#include "mixnn/sim.hpp"
#include "mixnn/trainer.hpp"

namespace mixnn {

using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("'" + path + "' is not valid JSON: " + std::string(e.what()));
  }
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  cfg.lr = j.value("lr", cfg.lr);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  if (j.contains("lambda_kl")) {
    if (j["lambda_kl"].is_string()) {
      if (j["lambda_kl"].get<std::string>() != "auto") {
        throw DataError("lambda_kl must be a number or \"auto\"");
      }
      cfg.lambda_kl = -1.0;
    } else {
      cfg.lambda_kl = j["lambda_kl"].get<double>();
    }
  }
  cfg.lambda_dag = j.value("lambda_dag", cfg.lambda_dag);
  cfg.lambda_contract = j.value("lambda_contract", cfg.lambda_contract);
  cfg.lambda_sparse = j.value("lambda_sparse", cfg.lambda_sparse);
  if (j.contains("clip_norm") && !j["clip_norm"].is_null()) {
    cfg.clip_norm = j["clip_norm"].get<double>();
  }
  cfg.patience = j.value("patience", cfg.patience);
  const std::string sched = j.value("scheduler", std::string("none"));
  if (sched == "none") cfg.scheduler = TrainConfig::Scheduler::None;
  else if (sched == "plateau") cfg.scheduler = TrainConfig::Scheduler::Plateau;
  else if (sched == "cosine") cfg.scheduler = TrainConfig::Scheduler::Cosine;
  else throw DataError("unknown scheduler '" + sched + "'");
  cfg.seed = j.value("seed", 0ull);
  return cfg;
}

ModelConfig model_config_from_json(const json& j, const std::string& formula) {
  ModelConfig cfg;
  cfg.formula_text = formula;

  for (const std::string& col :
       j.value("categorical", std::vector<std::string>{})) {
    cfg.schema[col] = formula::ColKind::Categorical;
  }

  cfg.encoder.embed_dim = j.value("embed_dim", 16);
  cfg.encoder.enforce_centering = j.value("enforce_centering", true);
  const std::string unk = j.value("unknown_strategy", std::string("zero"));
  if (unk == "zero") cfg.encoder.unknown_strategy = enc::UnknownStrategy::Zero;
  else if (unk == "learned") cfg.encoder.unknown_strategy = enc::UnknownStrategy::Learned;
  else throw DataError("unknown_strategy must be 'zero' or 'learned'");
  if (j.contains("cat_embed_dims")) {
    for (const auto& [col, w] : j["cat_embed_dims"].items()) {
      cfg.encoder.cat_embed_dims[col] = w.get<int>();
    }
  }

  const std::string arch = j.value("architecture", std::string("gsem"));
  if (arch == "gsem") {
    cfg.backbone.kind = BackboneConfig::Kind::Gsem;
  } else if (arch == "manifold") {
    cfg.backbone.kind = BackboneConfig::Kind::Manifold;
  } else {
    throw DataError("architecture must be 'gsem' or 'manifold'");
  }
  if (j.contains("hidden_dims")) {
    cfg.backbone.gsem.hidden_dims = j["hidden_dims"].get<std::vector<int>>();
  }
  if (j.contains("gsem")) {
    const auto& g = j["gsem"];
    cfg.backbone.gsem.hidden_dims =
        g.value("hidden_dims", cfg.backbone.gsem.hidden_dims);
    cfg.backbone.gsem.activation =
        gsem::activation_from_name(g.value("activation", std::string("relu")));
    cfg.backbone.gsem.dropout = g.value("dropout", 0.1);
    cfg.backbone.gsem.layer_norm = g.value("layer_norm", false);
    cfg.backbone.gsem.residual = g.value("residual", false);
    cfg.backbone.gsem.structure =
        gsem::structure_from_name(g.value("structure", std::string("none")));
    cfg.backbone.gsem.n_heads = g.value("n_heads", 2);
    cfg.backbone.gsem.edge_threshold = g.value("edge_threshold", 0.3);
  }
  if (j.contains("manifold_configs")) {
    for (const auto& jm : j["manifold_configs"]) {
      mani::ManifoldBlockConfig blk;
      blk.grid_shape = jm.at("grid_shape").get<std::vector<int>>();
      blk.use_spde = jm.value("use_spde", false);
      blk.spde_alpha = jm.value("spde_alpha", 1);
      blk.spde_kappa_init = jm.value("spde_kappa_init", 1.0);
      blk.use_sem = jm.value("use_sem", false);
      blk.sem_lengthscale = jm.value("sem_lengthscale", 2.0);
      blk.train_kappa = jm.value("train_kappa", true);
      cfg.backbone.manifold.push_back(blk);
    }
  }
  cfg.backbone.aggregation =
      mani::aggregation_from_name(j.value("aggregation", std::string("sum")));

  if (j.contains("outcomes")) {
    for (const auto& jo : j["outcomes"]) {
      fam::OutcomeSpec o;
      o.name = jo.at("name").get<std::string>();
      if (jo.contains("targets")) {
        o.targets = jo["targets"].get<std::vector<std::string>>();
      } else if (jo.contains("y")) {
        o.targets = {jo["y"].get<std::string>()};
      } else {
        o.targets = {o.name};
      }
      o.family = fam::family_from_name(jo.value("family", std::string("gaussian")));
      o.n_classes = jo.value("n_classes", 2);
      o.dispersion_init = jo.value("dispersion_init", 1.0);
      o.weight = jo.value("weight", 1.0);
      cfg.outcomes.push_back(o);
    }
  }

  const std::string osem = j.value("output_sem_mode", std::string("none"));
  if (osem == "none") cfg.output_sem = fam::OutputSemMode::None;
  else if (osem == "learned") cfg.output_sem = fam::OutputSemMode::Learned;
  else if (osem == "edges") cfg.output_sem = fam::OutputSemMode::Edges;
  else throw DataError("output_sem_mode must be none|learned|edges");
  if (j.contains("output_edges")) {
    for (const auto& je : j["output_edges"]) {
      fam::OutputEdge e;
      e.from = je.at("from").get<std::string>();
      e.to = je.at("to").get<std::string>();
      if (je.contains("weight") && !je["weight"].is_string()) {
        e.weight = je["weight"].get<double>();
      }
      cfg.output_edges.push_back(e);
    }
  }

  if (j.contains("cov_struct_map")) {
    for (const auto& [group, jc] : j["cov_struct_map"].items()) {
      cov::CovarianceSpec spec;
      spec.kind = cov::kind_from_name(jc.at("type").get<std::string>());
      spec.sigma2 = jc.value("sigma2", 1.0);
      spec.rho = jc.value("rho", 0.7);
      spec.phi = jc.value("phi", std::vector<double>{});
      spec.theta = jc.value("theta", std::vector<double>{});
      spec.arma_sigma = jc.value("arma_sigma", 1.0);
      spec.lengthscale = jc.value("lengthscale", 1.0);
      spec.trainable = jc.value("trainable", false);
      if (jc.contains("coordinates_cols")) {
        spec.coordinate_cols = jc["coordinates_cols"].get<std::vector<std::string>>();
      }
      if (jc.contains("kinship_file")) {
        spec.kinship = cov::load_matrix_text(jc["kinship_file"].get<std::string>());
      }
      if (jc.contains("train_levels")) {
        spec.train_rows = jc["train_levels"].get<std::vector<int>>();
      }
      cfg.cov_map[group] = spec;
      // Grouping columns behave as categoricals; nothing to add to schema,
      // they are coded through the level map regardless of storage type.
    }
  }
  return cfg;
}

LoadOptions load_options_for(const ModelConfig& cfg, bool impute_mean) {
  LoadOptions opts;
  opts.impute_mean = impute_mean;
  for (const auto& [col, kind] : cfg.schema) {
    if (kind == formula::ColKind::Categorical) opts.categorical.insert(col);
  }
  auto ast = formula::parse_formula(cfg.formula_text);
  for (const auto& r : ast.random) opts.categorical.insert(r.group);
  for (const auto& o : cfg.outcomes) {
    for (const auto& t : o.targets) opts.targets.insert(t);
  }
  if (cfg.outcomes.empty()) {
    for (const auto& resp : ast.responses) opts.targets.insert(resp);
  }
  return opts;
}

int cmd_train(const std::string& data_path, const std::string& formula,
              const std::string& config_path, const std::string& out_dir,
              const std::string& val_path, const std::string& log_file,
              bool impute_mean, bool warm_start) {
  json jcfg = config_path.empty() ? json::object() : load_json_file(config_path);
  TrainConfig tcfg = train_config_from_json(jcfg);
  tcfg.log_file = log_file;

  Model model;
  ColumnTable data;
  LoadReport report;
  if (warm_start) {
    model = persist::load_model(out_dir);
    LoadOptions lopts = load_options_for(model.cfg, impute_mean);
    data = load_csv(data_path, lopts, &report);
  } else {
    ModelConfig mcfg = model_config_from_json(jcfg, formula);
    LoadOptions lopts = load_options_for(mcfg, impute_mean);
    data = load_csv(data_path, lopts, &report);
    model = Model::build(mcfg, data, tcfg.seed);
  }
  if (report.rows_dropped_missing_target > 0) {
    std::cerr << "dropped " << report.rows_dropped_missing_target
              << " rows with missing targets\n";
  }
  for (const auto& w : model.warnings) std::cerr << "warning: " << w << '\n';

  std::optional<ColumnTable> val;
  if (!val_path.empty()) {
    LoadOptions lopts = load_options_for(model.cfg, impute_mean);
    val = load_csv(val_path, lopts, nullptr);
  }

  FitReport fit_report = warm_start
                             ? warm_start_fit(model, data, val ? &*val : nullptr, tcfg)
                             : fit(model, data, val ? &*val : nullptr, tcfg);

  json meta;
  meta["train_config"] = {{"lr", tcfg.lr},
                          {"batch_size", tcfg.batch_size},
                          {"epochs", tcfg.epochs},
                          {"lambda_kl", fit_report.lambda_kl_used},
                          {"lambda_dag", tcfg.lambda_dag},
                          {"lambda_contract", tcfg.lambda_contract},
                          {"lambda_sparse", tcfg.lambda_sparse},
                          {"patience", tcfg.patience},
                          {"seed", tcfg.seed}};
  meta["fit"] = {{"stopped_epoch", fit_report.stopped_epoch},
                 {"best_epoch", fit_report.best_epoch},
                 {"hybrid_failures", fit_report.hybrid_failures}};
  if (!fit_report.train_loss.empty()) {
    meta["fit"]["final_train_loss"] = fit_report.train_loss.back();
  }
  if (!fit_report.val_loss.empty()) {
    meta["fit"]["best_val_loss"] = fit_report.best_val;
  }
  persist::save_model(model, out_dir, &meta);
  std::cout << "model written to " << out_dir << " ("
            << fit_report.stopped_epoch << " epochs)\n";
  return 0;
}

int cmd_predict(const std::string& model_dir, const std::string& data_path,
                const std::string& out_path, double interval_alpha,
                int interval_samples, const std::string& outcome,
                bool impute_mean) {
  Model model = persist::load_model(model_dir);
  LoadOptions lopts = load_options_for(model.cfg, impute_mean);
  lopts.targets.clear();  // targets are not required at predict time
  ColumnTable data = load_csv(data_path, lopts, nullptr);

  auto preds = interpret::predict_point(model, data);

  ColumnTable out;
  for (const auto& o : preds.outcomes) {
    if (!outcome.empty() && o.name != outcome) continue;
    if (o.width == 1) {
      out.add_numeric(o.name, o.values);
    } else {
      for (int j = 0; j < o.width; ++j) {
        std::vector<double> col(preds.n);
        for (int i = 0; i < preds.n; ++i)
          col[i] = o.values[static_cast<std::size_t>(i) * o.width + j];
        out.add_numeric(o.name + "." + std::to_string(j), std::move(col));
      }
    }
    if (!o.classes.empty()) {
      std::vector<double> cls(o.classes.begin(), o.classes.end());
      out.add_numeric(o.name + ".class", std::move(cls));
    }
  }

  if (interval_alpha > 0) {
    int idx = 0;
    if (!outcome.empty()) {
      for (std::size_t k = 0; k < model.cfg.outcomes.size(); ++k) {
        if (model.cfg.outcomes[k].name == outcome) idx = static_cast<int>(k);
      }
    }
    auto iv = interpret::predict_interval(model, data, idx, interval_samples,
                                          interval_alpha, /*seed=*/1234);
    out.add_numeric("lower", iv.lower);
    out.add_numeric("upper", iv.upper);
  }
  write_csv(out_path, out);
  std::cout << "predictions written to " << out_path << '\n';
  return 0;
}

int cmd_summary(const std::string& model_dir, const std::string& data_path,
                const std::string& out_path, bool as_json, bool impute_mean) {
  Model model = persist::load_model(model_dir);
  LoadOptions lopts = load_options_for(model.cfg, impute_mean);
  ColumnTable data = load_csv(data_path, lopts, nullptr);
  auto table = interpret::summary(model, data);
  const std::string text =
      as_json ? interpret::summary_json(table) : interpret::summary_csv(table);
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write '" + out_path + "'");
    out << text;
    std::cout << "summary written to " << out_path << '\n';
  }
  return 0;
}

int cmd_shap(const std::string& model_dir, const std::string& data_path,
             const std::string& out_path, const std::string& mode,
             const std::string& outcome, int samples, bool random_effects,
             bool as_json, bool impute_mean) {
  Model model = persist::load_model(model_dir);
  LoadOptions lopts = load_options_for(model.cfg, impute_mean);
  lopts.targets.clear();
  ColumnTable data = load_csv(data_path, lopts, nullptr);
  int idx = 0;
  if (!outcome.empty()) {
    for (std::size_t k = 0; k < model.cfg.outcomes.size(); ++k) {
      if (model.cfg.outcomes[k].name == outcome) idx = static_cast<int>(k);
    }
  }
  std::string text;
  if (random_effects) {
    auto rep = interpret::shapley_random_effects(model, data, idx);
    json j;
    j["terms"] = rep.term_keys;
    j["mean_abs"] = rep.mean_abs;
    for (int i = 0; i < rep.n; ++i) {
      json row;
      for (int t = 0; t < rep.t; ++t)
        row.push_back(rep.phi[static_cast<std::size_t>(i) * rep.t + t]);
      j["phi"].push_back(row);
    }
    text = j.dump(2);
  } else {
    if (mode != "exact" && mode != "sampled") {
      throw DataError("shap mode must be 'exact' or 'sampled'");
    }
    auto rep = interpret::shapley_values(model, data, idx, mode == "exact",
                                         samples, /*seed=*/99);
    text = as_json || random_effects ? interpret::shap_json(rep)
                                     : interpret::shap_csv(rep);
  }
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write '" + out_path + "'");
    out << text;
    std::cout << "shap output written to " << out_path << '\n';
  }
  return 0;
}

int cmd_simulate(const std::string& kind, unsigned long long seed,
                 const std::string& out_path,
                 const std::vector<std::string>& params) {
  std::map<std::string, double> p;
  for (const auto& kv : params) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw DataError("simulate parameter '" + kv + "' is not name=value");
    }
    p[kv.substr(0, eq)] = std::stod(kv.substr(eq + 1));
  }
  auto result = sim::simulate(kind, p, seed);
  write_csv(out_path, result.data);
  std::cout << "simulated " << result.data.n_rows << " rows to " << out_path
            << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"mixed-effects neural networks for grouped tabular data"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "fit a model");
  std::string data_path, formula, config_path, out_dir, val_path, log_file;
  bool impute_mean = false, warm_start = false;
  train_cmd->add_option("--data", data_path, "training CSV")->required();
  train_cmd->add_option("--formula", formula, "model formula");
  train_cmd->add_option("--config", config_path, "JSON config");
  train_cmd->add_option("--out", out_dir, "output model directory")->required();
  train_cmd->add_option("--val", val_path, "validation CSV");
  train_cmd->add_option("--log-file", log_file, "line-delimited JSON metrics");
  train_cmd->add_flag("--impute-mean", impute_mean, "fill missing features");
  train_cmd->add_flag("--warm-start", warm_start,
                      "continue training the model in --out");

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "predict with a model");
  std::string p_model, p_data, p_out, p_outcome;
  double p_alpha = 0.0;
  int p_samples = 200;
  bool p_impute = false;
  predict_cmd->add_option("--model", p_model, "model directory")->required();
  predict_cmd->add_option("--data", p_data, "input CSV")->required();
  predict_cmd->add_option("--out", p_out, "output CSV")->required();
  predict_cmd->add_option("--interval", p_alpha,
                          "interval level alpha (e.g. 0.1 for 90%)");
  predict_cmd->add_option("--samples", p_samples, "Monte Carlo draws");
  predict_cmd->add_option("--outcome", p_outcome, "restrict to one outcome");
  predict_cmd->add_flag("--impute-mean", p_impute, "fill missing features");

  // summary
  auto* summary_cmd = app.add_subcommand("summary", "model summary table");
  std::string s_model, s_data, s_out;
  bool s_json = false, s_impute = false;
  summary_cmd->add_option("--model", s_model, "model directory")->required();
  summary_cmd->add_option("--data", s_data, "data CSV")->required();
  summary_cmd->add_option("--out", s_out, "output path (default stdout)");
  summary_cmd->add_flag("--json", s_json, "emit JSON instead of CSV");
  summary_cmd->add_flag("--impute-mean", s_impute, "fill missing features");

  // shap
  auto* shap_cmd = app.add_subcommand("shap", "Shapley attributions");
  std::string h_model, h_data, h_out, h_mode = "exact", h_outcome;
  int h_samples = 64;
  bool h_re = false, h_json = false, h_impute = false;
  shap_cmd->add_option("--model", h_model, "model directory")->required();
  shap_cmd->add_option("--data", h_data, "data CSV")->required();
  shap_cmd->add_option("--out", h_out, "output path (default stdout)");
  shap_cmd->add_option("--mode", h_mode, "exact|sampled");
  shap_cmd->add_option("--outcome", h_outcome, "outcome name");
  shap_cmd->add_option("--samples", h_samples, "permutations (sampled mode)");
  shap_cmd->add_flag("--random-effects", h_re, "attribute random-effect terms");
  shap_cmd->add_flag("--json", h_json, "emit JSON instead of CSV");
  shap_cmd->add_flag("--impute-mean", h_impute, "fill missing features");

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "generate synthetic data");
  std::string m_kind, m_out;
  unsigned long long m_seed = 0;
  std::vector<std::string> m_params;
  sim_cmd->add_option("--kind", m_kind, "lmm|sleepstudy_like|sem_chain|spatial")
      ->required();
  sim_cmd->add_option("--seed", m_seed, "RNG seed");
  sim_cmd->add_option("--out", m_out, "output CSV")->required();
  sim_cmd->add_option("--param", m_params, "name=value (repeatable)");

  std::vector<std::string> argv_copy = args;
  std::vector<char*> argv;
  std::string prog = "mixnn";
  argv.push_back(prog.data());
  for (auto& a : argv_copy) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) {
      if (!warm_start && formula.empty()) {
        std::cerr << "train: --formula is required unless --warm-start\n";
        return 1;
      }
      return cmd_train(data_path, formula, config_path, out_dir, val_path,
                       log_file, impute_mean, warm_start);
    }
    if (*predict_cmd) {
      return cmd_predict(p_model, p_data, p_out, p_alpha, p_samples, p_outcome,
                         p_impute);
    }
    if (*summary_cmd) {
      return cmd_summary(s_model, s_data, s_out, s_json, s_impute);
    }
    if (*shap_cmd) {
      return cmd_shap(h_model, h_data, h_out, h_mode, h_outcome, h_samples,
                      h_re, h_json, h_impute);
    }
    if (*sim_cmd) {
      return cmd_simulate(m_kind, m_seed, m_out, m_params);
    }
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  }
  return 1;
}

}  // namespace mixnn
